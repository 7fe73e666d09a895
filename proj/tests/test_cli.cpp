#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ieql/manifest.hpp"

using namespace ieql;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

nlohmann::json tiny_sweep_manifest() {
  nlohmann::json m;
  m["seed"] = 5;
  m["dataset"] = {{"formulas", "8*cos(0.5*x1) - 4"},
                  {"inputs", {"x1"}},
                  {"box", {{"train", {{-1.0, 1.0}}}, {"test", {{-2.0, 2.0}}}}},
                  {"n_train", 400},
                  {"n_test", 120},
                  {"gamma", 0.01}};
  m["architecture"] = {{"hidden_layers", 1},
                       {"unary", {{"cos", 1}, {"square", 1}}},
                       {"binary", {{"mul", 1}}},
                       {"prohibitions", nlohmann::json::array()}};
  m["train"] = {{"t1", 4}, {"t2", 8}, {"batch", 128}};
  m["lambda_grid"] = {1e-4, 1e-2};
  return m;
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(IEQL_BIN_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("manifest: profiles and hashing") {
  nlohmann::json j = tiny_sweep_manifest();
  const ExperimentManifest a = ExperimentManifest::from_json(j);
  CHECK(a.arch.hidden_layers == 1);
  CHECK(a.train.t1 == 4);
  CHECK(a.grid.values().size() == 2);
  CHECK(a.hash() == ExperimentManifest::from_json(j).hash());

  // desk profile fills scaled-down defaults that explicit fields override
  nlohmann::json d;
  d["profile"] = "desk";
  d["dataset"] = j["dataset"];
  const ExperimentManifest desk = ExperimentManifest::from_json(d);
  CHECK(desk.arch.hidden_layers == 2);
  CHECK(desk.train.t1 == 500);
  CHECK(desk.train.t2 == 2000);
  CHECK(desk.grid.values().size() == 12);
  for (const auto& [k, m] : desk.arch.unary) CHECK(m == 2);

  nlohmann::json p;
  p["profile"] = "paper";
  p["dataset"] = j["dataset"];
  const ExperimentManifest paper = ExperimentManifest::from_json(p);
  CHECK(paper.arch.hidden_layers == 4);
  CHECK(paper.train.t1 == 2000);
  CHECK(paper.train.t2 == 10000);
  CHECK(paper.grid.values().size() == 78);

  nlohmann::json bad = j;
  bad["profile"] = "galactic";
  CHECK_THROWS_AS(ExperimentManifest::from_json(bad), ConfigError);
}

TEST_CASE("factors lookup") {
  CHECK(factors_from_name("plain").at(UnitKind::Cos) == 1.0);
  CHECK(factors_from_name("motor").at(UnitKind::Cos) == 10.0);
  CHECK(factors_from_name("motor").at(UnitKind::Sqrt) == 3.0);
  CHECK_THROWS_AS(factors_from_name("no_such_file.json"), ConfigError);
  fs::create_directories("tmp_test");
  {
    std::ofstream out("tmp_test/factors.json");
    out << R"({"cos": 0.2})";
  }
  const auto f = factors_from_name("tmp_test/factors.json");
  CHECK(f.at(UnitKind::Cos) == 0.2);
  CHECK(f.at(UnitKind::Square) == 1.0);  // unlisted kinds stay plain
}

TEST_CASE("gen-data: files are reproducible byte for byte") {
  nlohmann::json j = tiny_sweep_manifest();
  j["dataset"]["n_train"] = 10000;
  j["dataset"]["n_test"] = 500;
  const ExperimentManifest m = ExperimentManifest::from_json(j);
  REQUIRE(run_gen_data(m, "tmp_cli/gen1") == 0);
  REQUIRE(run_gen_data(m, "tmp_cli/gen2") == 0);
  CHECK(slurp("tmp_cli/gen1/data.csv") == slurp("tmp_cli/gen2/data.csv"));
  CHECK(slurp("tmp_cli/gen1/dataset.json") == slurp("tmp_cli/gen2/dataset.json"));
  // 10^4 train rows requested: train+validation lines say "train"/"validation"
  const std::string csv = slurp("tmp_cli/gen1/data.csv");
  long train_rows = 0;
  std::istringstream is(csv);
  std::string line;
  while (std::getline(is, line)) {
    if (line.find(",train") != std::string::npos ||
        line.find(",validation") != std::string::npos)
      ++train_rows;
  }
  CHECK(train_rows == 10000);

  nlohmann::json bad = tiny_sweep_manifest();
  bad["dataset"]["n_train"] = 0;
  CHECK_THROWS_AS(run_gen_data(ExperimentManifest::from_json(bad), "tmp_cli/gen3"),
                  ConfigError);
}

TEST_CASE("sweep: outputs, determinism across parallelism") {
  const ExperimentManifest m = ExperimentManifest::from_json(tiny_sweep_manifest());
  std::ostringstream log;
  REQUIRE(run_sweep(m, "tmp_cli/s1", 1, log) == 0);
  REQUIRE(run_sweep(m, "tmp_cli/s2", 2, log) == 0);
  CHECK(slurp("tmp_cli/s1/candidates.json") == slurp("tmp_cli/s2/candidates.json"));
  CHECK(slurp("tmp_cli/s1/pareto.csv") == slurp("tmp_cli/s2/pareto.csv"));
  CHECK(fs::exists("tmp_cli/s1/trace_000.csv"));
  CHECK(fs::exists("tmp_cli/s1/trace_001.csv"));

  const nlohmann::json out = nlohmann::json::parse(slurp("tmp_cli/s1/candidates.json"));
  CHECK(out.at("candidates").size() == 2);
  CHECK(out.at("failures").empty());
  CHECK(out.at("manifest_hash").get<std::string>() == m.hash());
}

TEST_CASE("select: documented winners and factor sensitivity") {
  // constructed candidate file shaped like the selection example
  nlohmann::json file;
  file["manifest_hash"] = "feed";
  file["input_names"] = {"x1"};
  auto cand = [](int idx, double nu, nlohmann::json counts, long active) {
    nlohmann::json c;
    c["index"] = idx;
    c["lambda"] = 0.001 * (idx + 1);
    c["seed"] = idx;
    c["expr"] = Expression::constant(idx).to_json();
    c["expr_str"] = std::to_string(idx);
    c["weight_counts"] = std::move(counts);
    c["active_params"] = active;
    c["nu_int"] = nu;
    return c;
  };
  {
    // three candidates with (nt2_int, nt2_s) = (0,1), (0.2,0.1), (1,0)
    nlohmann::json f = file;
    f["candidates"] = nlohmann::json::array();
    // complexity via plain factors = total weight count
    f["candidates"].push_back(cand(0, 0.0, {{"+/-", 10}}, 11));
    f["candidates"].push_back(
        cand(1, std::sqrt(0.2), {{"+/-", 10 * std::sqrt(0.1)}}, 5));
    f["candidates"].push_back(cand(2, 1.0, nlohmann::json::object(), 1));
    fs::create_directories("tmp_cli");
    std::ofstream("tmp_cli/cands.json") << f.dump();
  }
  std::ostringstream rep;
  REQUIRE(run_select("tmp_cli/cands.json", Criterion::VintS,
                     ComplexityFactors::plain(), "tmp_cli/sel", rep) == 0);
  const nlohmann::json sel = nlohmann::json::parse(slurp("tmp_cli/sel/selected.json"));
  CHECK(sel.at("selected").at("index").get<int>() == 1);
  CHECK(rep.str().find("selected index 1") != std::string::npos);

  // motor vs plain factors flip the winner on a constructed pair
  {
    nlohmann::json f = file;
    f["candidates"] = nlohmann::json::array();
    f["candidates"].push_back(cand(0, 0.02, {{"cos", 1}, {"+/-", 2}}, 4));       // cos-heavy
    f["candidates"].push_back(cand(1, 0.0205, {{"x^2", 1}, {"*", 1}, {"+/-", 3}}, 6));  // polynomial
    f["candidates"].push_back(cand(2, 0.1, {{"+/-", 1}}, 2));                    // stretcher
    std::ofstream("tmp_cli/flip.json") << f.dump();
  }
  std::ostringstream r1, r2;
  REQUIRE(run_select("tmp_cli/flip.json", Criterion::VintS,
                     ComplexityFactors::plain(), "tmp_cli/sel_plain", r1) == 0);
  REQUIRE(run_select("tmp_cli/flip.json", Criterion::VintS,
                     ComplexityFactors::motor(), "tmp_cli/sel_motor", r2) == 0);
  const int plain_winner = nlohmann::json::parse(slurp("tmp_cli/sel_plain/selected.json"))
                               .at("selected").at("index").get<int>();
  const int motor_winner = nlohmann::json::parse(slurp("tmp_cli/sel_motor/selected.json"))
                               .at("selected").at("index").get<int>();
  CHECK(plain_winner == 0);
  CHECK(motor_winner == 1);

  // single candidate selects itself under any criterion
  {
    nlohmann::json f = file;
    f["candidates"] = nlohmann::json::array();
    f["candidates"].push_back(cand(0, 0.5, {{"+/-", 2}}, 3));
    std::ofstream("tmp_cli/one.json") << f.dump();
  }
  std::ostringstream r3;
  REQUIRE(run_select("tmp_cli/one.json", Criterion::Vint,
                     ComplexityFactors::plain(), "", r3) == 0);
  CHECK(r3.str().find("selected index 0") != std::string::npos);

  // vint-ex without extrapolation errors is a config error
  std::ostringstream r4;
  CHECK_THROWS_AS(run_select("tmp_cli/one.json", Criterion::VintEx,
                             ComplexityFactors::plain(), "", r4),
                  ConfigError);
  CHECK_THROWS_AS(run_select("tmp_cli/nope.json", Criterion::Vint,
                             ComplexityFactors::plain(), "", r4),
                  DataError);
}

TEST_CASE("binary: exit codes") {
  CHECK(run_binary("check-grad --seed 7") == 0);
  CHECK(run_binary("gen-data --manifest does_not_exist.json") == 1);
  CHECK(run_binary("select --candidates nope.json") == 2);
  CHECK(run_binary("definitely-not-a-command") != 0);
}

TEST_CASE("binary: environment overrides") {
  fs::create_directories("tmp_cli");
  {
    std::ofstream out("tmp_cli/env_manifest.json");
    nlohmann::json j = tiny_sweep_manifest();
    j["dataset"]["n_train"] = 100;
    j["dataset"]["n_test"] = 20;
    out << j.dump();
  }
  const std::string cmd =
      std::string("IEQL_OUT=tmp_cli/env_out IEQL_SEED=99 ") + IEQL_BIN_PATH +
      " gen-data --manifest tmp_cli/env_manifest.json >/dev/null 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  CHECK(fs::exists("tmp_cli/env_out/data.csv"));
  // the seed override reaches the dataset metadata
  const nlohmann::json meta =
      nlohmann::json::parse(slurp("tmp_cli/env_out/dataset.json"));
  CHECK(meta.at("seed").get<std::uint64_t>() == 99);
}

}  // TEST_SUITE
