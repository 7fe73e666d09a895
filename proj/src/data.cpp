#include "ieql/data.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

namespace ieql {

void DomainBox::validate() const {
  if (train.size() != test.size())
    throw ConfigError("domain box: train/test dimension mismatch");
  if (test.empty()) throw ConfigError("domain box must have at least one dimension");
  for (std::size_t d = 0; d < test.size(); ++d) {
    if (!(train[d].lo < train[d].hi) || !(test[d].lo < test[d].hi))
      throw ConfigError("domain box intervals require lo < hi");
    if (train[d].lo < test[d].lo || train[d].hi > test[d].hi)
      throw ConfigError("train interval must be contained in the test interval");
  }
}

bool DomainBox::train_contains(const Eigen::RowVectorXd& x) const {
  for (int d = 0; d < x.size(); ++d)
    if (!train[static_cast<std::size_t>(d)].contains(x(d))) return false;
  return true;
}

bool DomainBox::test_contains(const Eigen::RowVectorXd& x) const {
  for (int d = 0; d < x.size(); ++d)
    if (!test[static_cast<std::size_t>(d)].contains(x(d))) return false;
  return true;
}

bool DomainBox::is_extrapolation(const Eigen::RowVectorXd& x) const {
  return test_contains(x) && !train_contains(x);
}

nlohmann::json DomainBox::to_json() const {
  nlohmann::json j;
  auto dump = [](const std::vector<Interval>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& i : v) arr.push_back({i.lo, i.hi});
    return arr;
  };
  j["train"] = dump(train);
  j["test"] = dump(test);
  j["exempt"] = exempt;
  return j;
}

DomainBox DomainBox::from_json(const nlohmann::json& j) {
  DomainBox b;
  auto read = [](const nlohmann::json& arr) {
    std::vector<Interval> v;
    for (const auto& e : arr) v.push_back({e.at(0).get<double>(), e.at(1).get<double>()});
    return v;
  };
  b.train = read(j.at("train"));
  b.test = read(j.at("test"));
  if (j.contains("exempt")) b.exempt = j.at("exempt").get<std::vector<std::uint8_t>>();
  b.validate();
  return b;
}

Interval shrink_domain(Interval test, double fraction, ShrinkMode mode) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ConfigError("shrink fraction must lie in (0,1]");
  if (mode == ShrinkMode::Midpoint) {
    const double c = 0.5 * (test.lo + test.hi);
    const double h = 0.5 * (test.hi - test.lo) * fraction;
    return {c - h, c + h};
  }
  return {fraction * test.lo, fraction * test.hi};
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "validation" || name == "val") return Split::Validation;
  if (name == "test") return Split::Test;
  throw DataError("unknown split label '" + name + "'");
}

long Dataset::rows(Split s) const {
  long n = 0;
  for (Split v : split) n += v == s ? 1 : 0;
  return n;
}

Eigen::MatrixXd Dataset::x_rows(Split s) const {
  Eigen::MatrixXd out(rows(s), X.cols());
  long r = 0;
  for (long i = 0; i < X.rows(); ++i)
    if (split[static_cast<std::size_t>(i)] == s) out.row(r++) = X.row(i);
  return out;
}

Eigen::MatrixXd Dataset::y_rows(Split s) const {
  Eigen::MatrixXd out(rows(s), Y.cols());
  long r = 0;
  for (long i = 0; i < Y.rows(); ++i)
    if (split[static_cast<std::size_t>(i)] == s) out.row(r++) = Y.row(i);
  return out;
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> Dataset::extrapolation_rows(
    long max_rows) const {
  std::vector<long> idx;
  for (long i = 0; i < X.rows(); ++i) {
    if (split[static_cast<std::size_t>(i)] == Split::Test &&
        box.is_extrapolation(X.row(i))) {
      idx.push_back(i);
    }
  }
  std::vector<long> pick;
  if (max_rows > 0 && static_cast<long>(idx.size()) > max_rows) {
    // Even thinning keeps the selection independent of any RNG.
    for (long k = 0; k < max_rows; ++k)
      pick.push_back(idx[static_cast<std::size_t>(
          k * static_cast<long>(idx.size()) / max_rows)]);
  } else {
    pick = idx;
  }
  Eigen::MatrixXd xs(static_cast<long>(pick.size()), X.cols());
  Eigen::MatrixXd ys(static_cast<long>(pick.size()), Y.cols());
  for (std::size_t k = 0; k < pick.size(); ++k) {
    xs.row(static_cast<long>(k)) = X.row(pick[k]);
    ys.row(static_cast<long>(k)) = Y.row(pick[k]);
  }
  return {xs, ys};
}

void Dataset::validate() const {
  if (X.rows() != Y.rows() || X.rows() != static_cast<long>(split.size()))
    throw DataError("dataset matrices and split labels disagree in length");
  box.validate();
  if (box.dim() != X.cols()) throw DataError("domain box dimension mismatch");
  for (long i = 0; i < X.rows(); ++i) {
    const Split s = split[static_cast<std::size_t>(i)];
    if (s != Split::Test && !box.train_contains(X.row(i)))
      throw DataError("train/validation row " + std::to_string(i) +
                      " lies outside the train box");
    if (s == Split::Test && !box.test_contains(X.row(i)))
      throw DataError("test row " + std::to_string(i) +
                      " lies outside the test box");
  }
}

Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.formulas.empty()) throw ConfigError("no generator formula given");
  if (spec.n_train < 1) throw ConfigError("n_train must be >= 1");
  if (spec.n_test < 0) throw ConfigError("n_test must be >= 0");
  if (!(spec.gamma >= 0.0)) throw ConfigError("noise std must be >= 0");
  if (!(spec.val_fraction >= 0.0 && spec.val_fraction < 1.0))
    throw ConfigError("val_fraction must lie in [0,1)");
  spec.box.validate();
  if (static_cast<int>(spec.input_names.size()) != spec.box.dim())
    throw ConfigError("input name count must match the domain dimension");

  std::vector<Expression> exprs;
  for (const auto& f : spec.formulas)
    exprs.push_back(parse_formula(f, spec.input_names));

  Dataset ds;
  ds.box = spec.box;
  ds.noise_std = spec.gamma;
  ds.input_names = spec.input_names;
  ds.formulas = spec.formulas;
  ds.seed = seed;
  for (std::size_t k = 0; k < exprs.size(); ++k)
    ds.output_names.push_back("y" + std::to_string(k + 1));

  const long n = spec.n_train + spec.n_test;
  const int d_in = spec.box.dim();
  const int d_out = static_cast<int>(exprs.size());
  ds.X.resize(n, d_in);
  ds.Y.resize(n, d_out);
  ds.split.assign(static_cast<std::size_t>(n), Split::Train);

  Rng rng(derive_seed(seed, 0x64617461));
  auto fill = [&](long row0, long count, const std::vector<Interval>& box,
                  bool noisy) {
    std::vector<double> x(static_cast<std::size_t>(d_in));
    for (long i = 0; i < count; ++i) {
      for (int d = 0; d < d_in; ++d) {
        x[static_cast<std::size_t>(d)] =
            rng.uniform(box[static_cast<std::size_t>(d)].lo,
                        box[static_cast<std::size_t>(d)].hi);
        ds.X(row0 + i, d) = x[static_cast<std::size_t>(d)];
      }
      for (int k = 0; k < d_out; ++k) {
        double y;
        try {
          y = exprs[static_cast<std::size_t>(k)].eval(x);
        } catch (const EvalDomainError& e) {
          throw DataError(std::string("formula domain violation inside box: ") +
                          e.what());
        }
        if (noisy && spec.gamma > 0) y += rng.normal(0.0, spec.gamma);
        ds.Y(row0 + i, k) = y;
      }
    }
  };
  fill(0, spec.n_train, spec.box.train, true);
  fill(spec.n_train, spec.n_test, spec.box.test, spec.noisy_test);
  for (long i = spec.n_train; i < n; ++i)
    ds.split[static_cast<std::size_t>(i)] = Split::Test;

  // Validation: the tail of a seeded shuffle of the training rows.
  const long n_val = static_cast<long>(
      std::floor(spec.val_fraction * static_cast<double>(spec.n_train)));
  if (n_val > 0) {
    std::vector<long> order(static_cast<std::size_t>(spec.n_train));
    std::iota(order.begin(), order.end(), 0L);
    rng.shuffle(order.begin(), order.end());
    for (long k = 0; k < n_val; ++k) {
      ds.split[static_cast<std::size_t>(
          order[static_cast<std::size_t>(spec.n_train - 1 - k)])] =
          Split::Validation;
    }
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c == '\r') {
      // tolerate CRLF
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_cell(const std::string& cell, long row, const std::string& col) {
  const char* begin = cell.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || end != begin + cell.size())
    throw DataError("non-numeric cell in row " + std::to_string(row) +
                    ", column '" + col + "': '" + cell + "'");
  return v;
}

}  // namespace

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  if (schema.inputs.empty() || schema.outputs.empty())
    throw ConfigError("csv schema needs input and output columns");
  std::ifstream in(path);
  if (!in) throw DataError("cannot open csv file: " + path);
  std::string line;
  do {
    if (!std::getline(in, line)) throw DataError("empty csv file: " + path);
  } while (!line.empty() && line[0] == '#');
  const std::vector<std::string> header = split_csv_line(line);

  auto col_index = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    throw DataError("missing column '" + name + "' in " + path);
  };
  std::vector<int> in_cols, out_cols;
  for (const auto& c : schema.inputs) in_cols.push_back(col_index(c));
  for (const auto& c : schema.outputs) out_cols.push_back(col_index(c));
  int split_col = -1;
  if (schema.split_column) split_col = col_index(*schema.split_column);

  std::vector<std::vector<double>> xs, ys;
  std::vector<Split> labels;
  long row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() < header.size())
      throw DataError("row " + std::to_string(row) + " has " +
                      std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(header.size()));
    std::vector<double> x, y;
    for (std::size_t k = 0; k < in_cols.size(); ++k)
      x.push_back(parse_cell(cells[static_cast<std::size_t>(in_cols[k])], row,
                             schema.inputs[k]));
    for (std::size_t k = 0; k < out_cols.size(); ++k)
      y.push_back(parse_cell(cells[static_cast<std::size_t>(out_cols[k])], row,
                             schema.outputs[k]));
    xs.push_back(std::move(x));
    ys.push_back(std::move(y));
    if (split_col >= 0)
      labels.push_back(split_from_name(cells[static_cast<std::size_t>(split_col)]));
  }
  if (xs.empty()) throw DataError("csv file has no data rows: " + path);

  const long n = static_cast<long>(xs.size());
  const int d_in = static_cast<int>(schema.inputs.size());
  const int d_out = static_cast<int>(schema.outputs.size());
  Dataset ds;
  ds.X.resize(n, d_in);
  ds.Y.resize(n, d_out);
  for (long i = 0; i < n; ++i) {
    for (int d = 0; d < d_in; ++d) ds.X(i, d) = xs[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)];
    for (int d = 0; d < d_out; ++d) ds.Y(i, d) = ys[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)];
  }
  ds.input_names = schema.inputs;
  ds.output_names = schema.outputs;
  ds.seed = schema.seed;

  if (split_col >= 0) {
    ds.split = std::move(labels);
  } else {
    // Random split: test fraction first, optional train-domain restriction,
    // then the validation tail.
    ds.split.assign(static_cast<std::size_t>(n), Split::Train);
    std::vector<long> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0L);
    Rng rng(derive_seed(schema.seed, 0x637376));
    rng.shuffle(order.begin(), order.end());
    const long n_test = static_cast<long>(
        std::floor(schema.test_fraction * static_cast<double>(n)));
    for (long k = 0; k < n_test; ++k)
      ds.split[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] =
          Split::Test;

    std::vector<Interval> full(static_cast<std::size_t>(d_in));
    for (int d = 0; d < d_in; ++d)
      full[static_cast<std::size_t>(d)] = {ds.X.col(d).minCoeff(),
                                           ds.X.col(d).maxCoeff()};
    std::vector<Interval> train_box = full;
    if (schema.restrict_fraction) {
      for (int d = 0; d < d_in; ++d) {
        const bool ex = static_cast<std::size_t>(d) < schema.exempt.size() &&
                        schema.exempt[static_cast<std::size_t>(d)];
        if (!ex)
          train_box[static_cast<std::size_t>(d)] = shrink_domain(
              full[static_cast<std::size_t>(d)], *schema.restrict_fraction,
              schema.restrict_mode);
      }
      // Training candidates outside the restricted box are surrendered to
      // the test split so the box invariants hold.
      for (long i = 0; i < n; ++i) {
        if (ds.split[static_cast<std::size_t>(i)] == Split::Train) {
          bool inside = true;
          for (int d = 0; d < d_in; ++d)
            inside = inside && train_box[static_cast<std::size_t>(d)].contains(ds.X(i, d));
          if (!inside) ds.split[static_cast<std::size_t>(i)] = Split::Test;
        }
      }
    }
    std::vector<long> train_rows;
    for (long i = 0; i < n; ++i)
      if (ds.split[static_cast<std::size_t>(i)] == Split::Train)
        train_rows.push_back(i);
    rng.shuffle(train_rows.begin(), train_rows.end());
    const long n_val = static_cast<long>(std::floor(
        schema.val_fraction * static_cast<double>(train_rows.size())));
    for (long k = 0; k < n_val; ++k) {
      ds.split[static_cast<std::size_t>(
          train_rows[train_rows.size() - 1 - static_cast<std::size_t>(k)])] =
          Split::Validation;
    }
    ds.box.train = train_box;
    ds.box.test = full;
    ds.box.exempt = schema.exempt;
  }

  if (split_col >= 0) {
    // Boxes derived from the labelled data.
    std::vector<Interval> tb(static_cast<std::size_t>(d_in)), fb(static_cast<std::size_t>(d_in));
    bool any_train = false;
    for (int d = 0; d < d_in; ++d) {
      fb[static_cast<std::size_t>(d)] = {ds.X.col(d).minCoeff(), ds.X.col(d).maxCoeff()};
      tb[static_cast<std::size_t>(d)] = fb[static_cast<std::size_t>(d)];
    }
    for (long i = 0; i < n; ++i) {
      if (ds.split[static_cast<std::size_t>(i)] == Split::Test) continue;
      for (int d = 0; d < d_in; ++d) {
        auto& iv = tb[static_cast<std::size_t>(d)];
        if (!any_train) iv = {ds.X(i, d), ds.X(i, d)};
        else {
          iv.lo = std::min(iv.lo, ds.X(i, d));
          iv.hi = std::max(iv.hi, ds.X(i, d));
        }
      }
      any_train = true;
    }
    for (int d = 0; d < d_in; ++d) {
      auto& iv = tb[static_cast<std::size_t>(d)];
      if (!(iv.lo < iv.hi)) {
        // Degenerate interval; widen marginally to stay valid.
        iv.lo -= 1e-12 + 1e-12 * std::abs(iv.lo);
        iv.hi += 1e-12 + 1e-12 * std::abs(iv.hi);
      }
      auto& fv = fb[static_cast<std::size_t>(d)];
      fv.lo = std::min(fv.lo, iv.lo);
      fv.hi = std::max(fv.hi, iv.hi);
      if (!(fv.lo < fv.hi)) {
        fv.lo -= 1e-12 + 1e-12 * std::abs(fv.lo);
        fv.hi += 1e-12 + 1e-12 * std::abs(fv.hi);
      }
    }
    ds.box.train = tb;
    ds.box.test = fb;
    ds.box.exempt.assign(static_cast<std::size_t>(d_in), 0);
  }

  ds.validate();
  return ds;
}

void write_csv(const Dataset& ds, const std::string& path,
               const std::string& manifest_hash) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write csv file: " + path);
  if (!manifest_hash.empty()) out << "# manifest_hash=" << manifest_hash << "\n";
  for (std::size_t d = 0; d < ds.input_names.size(); ++d) {
    out << ds.input_names[d] << ",";
  }
  for (const auto& n : ds.output_names) out << n << ",";
  out << "split\n";
  for (long i = 0; i < ds.X.rows(); ++i) {
    for (int d = 0; d < ds.X.cols(); ++d)
      out << format_double_exact(ds.X(i, d)) << ",";
    for (int d = 0; d < ds.Y.cols(); ++d)
      out << format_double_exact(ds.Y(i, d)) << ",";
    out << split_name(ds.split[static_cast<std::size_t>(i)]) << "\n";
  }
}

Eigen::MatrixXd sample_box(const std::vector<Interval>& box, long n, Rng& rng) {
  Eigen::MatrixXd X(n, static_cast<int>(box.size()));
  for (long i = 0; i < n; ++i) {
    for (int d = 0; d < static_cast<int>(box.size()); ++d) {
      X(i, d) = rng.uniform(box[static_cast<std::size_t>(d)].lo,
                            box[static_cast<std::size_t>(d)].hi);
    }
  }
  return X;
}

Eigen::MatrixXd sample_penalty_inputs(const DomainBox& box, long n,
                                      std::uint64_t seed) {
  if (n < 1) throw ConfigError("penalty sample count must be >= 1");
  box.validate();
  Rng rng(derive_seed(seed, 0x70656e));
  return sample_box(box.test, n, rng);
}

nlohmann::json dataset_manifest(const Dataset& ds,
                                const std::string& manifest_hash) {
  nlohmann::json j;
  if (!manifest_hash.empty()) j["manifest_hash"] = manifest_hash;
  j["box"] = ds.box.to_json();
  j["noise_std"] = ds.noise_std;
  j["inputs"] = ds.input_names;
  j["outputs"] = ds.output_names;
  j["formulas"] = ds.formulas;
  j["seed"] = ds.seed;
  j["rows"] = {{"train", ds.rows(Split::Train)},
               {"validation", ds.rows(Split::Validation)},
               {"test", ds.rows(Split::Test)}};
  return j;
}

}  // namespace ieql
