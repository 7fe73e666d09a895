#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "ieql/data.hpp"

using namespace ieql;
namespace fs = std::filesystem;

namespace {

SyntheticSpec ambiguity_spec(long n_train = 10000, long n_test = 1000) {
  SyntheticSpec s;
  s.formulas = {"8*cos(0.5*x1) - 4"};
  s.input_names = {"x1"};
  s.box.train = {{-1.0, 1.0}};
  s.box.test = {{-2.0, 2.0}};
  s.box.exempt = {0};
  s.n_train = n_train;
  s.n_test = n_test;
  s.gamma = 0.01;
  return s;
}

std::string tmp_path(const std::string& name) {
  fs::create_directories("tmp_test");
  return "tmp_test/" + name;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("synthetic generation: noise moments match gamma") {
  const SyntheticSpec spec = ambiguity_spec();
  const Dataset ds = generate_synthetic(spec, 11);
  const std::vector<std::string> names = {"x1"};
  Expression f = parse_formula(spec.formulas[0], names);

  double ss = 0.0, mean = 0.0;
  long n = 0;
  for (long i = 0; i < ds.X.rows(); ++i) {
    if (ds.split[static_cast<std::size_t>(i)] == Split::Test) continue;
    std::vector<double> x = {ds.X(i, 0)};
    const double r = ds.Y(i, 0) - f.eval(x);
    mean += r;
    ss += r * r;
    ++n;
  }
  mean /= static_cast<double>(n);
  const double std_dev = std::sqrt(ss / n - mean * mean);
  CHECK(n == 10000);
  CHECK(std_dev >= 0.0097);
  CHECK(std_dev <= 0.0103);
  // calibration bound: relative error below 3/sqrt(2N)
  const double rel = std::abs(std_dev - 0.01) / 0.01;
  CHECK(rel <= 3.0 / std::sqrt(2.0 * static_cast<double>(n)));

  // test targets are noiseless by default
  for (long i = 0; i < ds.X.rows(); ++i) {
    if (ds.split[static_cast<std::size_t>(i)] != Split::Test) continue;
    std::vector<double> x = {ds.X(i, 0)};
    CHECK(ds.Y(i, 0) == doctest::Approx(f.eval(x)).epsilon(1e-12));
  }
}

TEST_CASE("synthetic generation: gamma=0 reproduces the formula exactly") {
  SyntheticSpec spec = ambiguity_spec(500, 100);
  spec.gamma = 0.0;
  const Dataset ds = generate_synthetic(spec, 3);
  const std::vector<std::string> names = {"x1"};
  Expression f = parse_formula(spec.formulas[0], names);
  for (long i = 0; i < ds.X.rows(); ++i) {
    std::vector<double> x = {ds.X(i, 0)};
    CHECK(ds.Y(i, 0) == f.eval(x));
  }
}

TEST_CASE("synthetic generation: constant formula leaves pure noise") {
  SyntheticSpec spec = ambiguity_spec(4000, 0);
  spec.formulas = {"2.5"};
  spec.gamma = 0.05;
  const Dataset ds = generate_synthetic(spec, 8);
  double mean = 0.0, ss = 0.0;
  for (long i = 0; i < ds.Y.rows(); ++i) {
    mean += ds.Y(i, 0);
    ss += ds.Y(i, 0) * ds.Y(i, 0);
  }
  mean /= static_cast<double>(ds.Y.rows());
  const double var = ss / static_cast<double>(ds.Y.rows()) - mean * mean;
  CHECK(mean == doctest::Approx(2.5).epsilon(0.01));
  CHECK(var == doctest::Approx(0.05 * 0.05).epsilon(0.15));
}

TEST_CASE("synthetic generation: determinism and containment") {
  const SyntheticSpec spec = ambiguity_spec(600, 200);
  const Dataset a = generate_synthetic(spec, 21);
  const Dataset b = generate_synthetic(spec, 21);
  CHECK((a.X - b.X).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.Y - b.Y).cwiseAbs().maxCoeff() == 0.0);
  // split sizes: 10% validation of 600 = 60
  CHECK(a.rows(Split::Validation) == 60);
  CHECK(a.rows(Split::Train) == 540);
  CHECK(a.rows(Split::Test) == 200);
  CHECK_NOTHROW(a.validate());
  // formula domain violation inside the box is a data error
  SyntheticSpec bad = spec;
  bad.formulas = {"log(x1)"};
  CHECK_THROWS_AS(generate_synthetic(bad, 2), DataError);
}

TEST_CASE("shrink_domain") {
  const Interval sym = shrink_domain({-2, 2}, 0.5, ShrinkMode::Midpoint);
  CHECK(sym.lo == doctest::Approx(-1.0));
  CHECK(sym.hi == doctest::Approx(1.0));
  const Interval paper = shrink_domain({1, 525}, 0.8, ShrinkMode::PaperScale);
  CHECK(paper.lo == doctest::Approx(0.8));
  CHECK(paper.hi == doctest::Approx(420.0));
  const Interval same = shrink_domain({-3, 7}, 1.0, ShrinkMode::Midpoint);
  CHECK(same.lo == doctest::Approx(-3.0));
  CHECK(same.hi == doctest::Approx(7.0));
  CHECK_THROWS_AS(shrink_domain({0, 1}, 0.0, ShrinkMode::Midpoint), ConfigError);
  CHECK_THROWS_AS(shrink_domain({0, 1}, 1.5, ShrinkMode::Midpoint), ConfigError);
}

TEST_CASE("csv: write-then-read round trip is bit exact") {
  const Dataset ds = generate_synthetic(ambiguity_spec(300, 80), 5);
  const std::string path = tmp_path("roundtrip.csv");
  write_csv(ds, path, "deadbeef");
  CsvSchema schema;
  schema.inputs = ds.input_names;
  schema.outputs = ds.output_names;
  schema.split_column = "split";
  const Dataset back = load_csv(path, schema);
  REQUIRE(back.X.rows() == ds.X.rows());
  for (long i = 0; i < ds.X.rows(); ++i) {
    CHECK(back.X(i, 0) == ds.X(i, 0));
    CHECK(back.Y(i, 0) == ds.Y(i, 0));
    CHECK(back.split[static_cast<std::size_t>(i)] ==
          ds.split[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("csv: small file and schema") {
  const std::string path = tmp_path("small.csv");
  {
    std::ofstream out(path);
    out << "a,b,y\n1,2,3\n4,5,6\n7,8,9\n";
  }
  CsvSchema schema;
  schema.inputs = {"a", "b"};
  schema.outputs = {"y"};
  schema.test_fraction = 0.0;
  schema.val_fraction = 0.0;
  const Dataset ds = load_csv(path, schema);
  CHECK(ds.X.rows() == 3);
  CHECK(ds.X.cols() == 2);
  CHECK(ds.Y.cols() == 1);
  CHECK(ds.Y(2, 0) == 9.0);
}

TEST_CASE("csv: split arithmetic 80/20 with 10 percent validation") {
  // 1000 rows -> 200 test, 80 validation, 720 train
  SyntheticSpec spec = ambiguity_spec(1000, 0);
  spec.val_fraction = 0.0;
  const Dataset src = generate_synthetic(spec, 17);
  const std::string path = tmp_path("split.csv");
  write_csv(src, path);
  CsvSchema schema;
  schema.inputs = {"x1"};
  schema.outputs = {"y1"};
  schema.test_fraction = 0.2;
  schema.val_fraction = 0.1;
  schema.seed = 4;
  const Dataset ds = load_csv(path, schema);
  CHECK(ds.rows(Split::Train) == 720);
  CHECK(ds.rows(Split::Validation) == 80);
  CHECK(ds.rows(Split::Test) == 200);
}

TEST_CASE("csv: domain restriction moves outlying train rows to test") {
  SyntheticSpec spec = ambiguity_spec(2000, 0);
  spec.box.train = {{-2.0, 2.0}};
  spec.box.test = {{-2.0, 2.0}};
  spec.val_fraction = 0.0;
  const Dataset src = generate_synthetic(spec, 23);
  const std::string path = tmp_path("restrict.csv");
  write_csv(src, path);
  CsvSchema schema;
  schema.inputs = {"x1"};
  schema.outputs = {"y1"};
  schema.test_fraction = 0.2;
  schema.val_fraction = 0.1;
  schema.restrict_fraction = 0.8;
  schema.seed = 4;
  const Dataset ds = load_csv(path, schema);
  // train box shrunk around the midpoint
  CHECK(ds.box.train[0].lo == doctest::Approx(-1.6).epsilon(0.01));
  CHECK(ds.box.train[0].hi == doctest::Approx(1.6).epsilon(0.01));
  CHECK_NOTHROW(ds.validate());
  CHECK(ds.rows(Split::Test) > 400);  // 20% plus the displaced rows
}

TEST_CASE("csv: errors") {
  CsvSchema schema;
  schema.inputs = {"a"};
  schema.outputs = {"y"};
  const std::string missing = tmp_path("missing.csv");
  {
    std::ofstream out(missing);
    out << "a,z\n1,2\n";
  }
  CHECK_THROWS_AS(load_csv(missing, schema), DataError);

  const std::string bad_cell = tmp_path("badcell.csv");
  {
    std::ofstream out(bad_cell);
    out << "a,y\n1,2\n3,oops\n";
  }
  try {
    load_csv(bad_cell, schema);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("'y'") != std::string::npos);
  }

  const std::string empty = tmp_path("empty.csv");
  { std::ofstream out(empty); }
  CHECK_THROWS_AS(load_csv(empty, schema), DataError);
  CHECK_THROWS_AS(load_csv(tmp_path("does_not_exist.csv"), schema), DataError);
}

TEST_CASE("penalty inputs: uniform over the test box, deterministic") {
  DomainBox box;
  box.train = {{-1, 1}, {0, 2}};
  box.test = {{-2, 2}, {0, 4}};
  const Eigen::MatrixXd a = sample_penalty_inputs(box, 100, 9);
  const Eigen::MatrixXd b = sample_penalty_inputs(box, 100, 9);
  CHECK(a.rows() == 100);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  for (long i = 0; i < a.rows(); ++i) {
    CHECK(box.test_contains(a.row(i)));
  }
  CHECK(sample_penalty_inputs(box, 1, 2).rows() == 1);
  CHECK_THROWS_AS(sample_penalty_inputs(box, 0, 2), ConfigError);
}

TEST_CASE("extrapolation rows live outside the train box") {
  const Dataset ds = generate_synthetic(ambiguity_spec(500, 400), 31);
  const auto [xs, ys] = ds.extrapolation_rows(40);
  CHECK(xs.rows() > 0);
  CHECK(xs.rows() <= 40);
  for (long i = 0; i < xs.rows(); ++i) {
    CHECK(ds.box.is_extrapolation(xs.row(i)));
  }
  // no restricted dimension -> no extrapolation rows
  SyntheticSpec flat = ambiguity_spec(200, 100);
  flat.box.train = flat.box.test;
  const Dataset none = generate_synthetic(flat, 2);
  CHECK(none.extrapolation_rows(40).first.rows() == 0);
}

}  // TEST_SUITE
