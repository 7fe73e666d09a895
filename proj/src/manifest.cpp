#include "ieql/manifest.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace ieql {

namespace fs = std::filesystem;

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

void apply_profile(ExperimentManifest& m, const std::string& profile) {
  if (profile.empty() || profile == "paper") {
    m.profile = profile;
    return;  // full-scale settings are the defaults
  }
  if (profile == "desk") {
    m.profile = profile;
    m.arch.hidden_layers = 2;
    for (auto& [k, mult] : m.arch.unary) mult = 2;
    for (auto& [k, mult] : m.arch.binary) mult = 2;
    m.train.t1 = 500;
    m.train.t2 = 2000;
    m.grid.count = 12;
    return;
  }
  throw ConfigError("unknown profile '" + profile + "' (use desk or paper)");
}

ComplexityFactors factors_from_name(const std::string& name_or_path) {
  if (name_or_path == "plain") return ComplexityFactors::plain();
  if (name_or_path == "motor") return ComplexityFactors::motor();
  std::ifstream in(name_or_path);
  if (!in)
    throw ConfigError("factors must be 'plain', 'motor' or a JSON file path; "
                      "cannot open '" + name_or_path + "'");
  nlohmann::json j;
  in >> j;
  return ComplexityFactors::from_json(j);
}

nlohmann::json ExperimentManifest::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  if (!profile.empty()) j["profile"] = profile;
  if (synth) {
    nlohmann::json d;
    d["formulas"] = synth->formulas;
    d["inputs"] = synth->input_names;
    d["box"] = synth->box.to_json();
    d["n_train"] = synth->n_train;
    d["n_test"] = synth->n_test;
    d["gamma"] = synth->gamma;
    d["val_fraction"] = synth->val_fraction;
    d["noisy_test"] = synth->noisy_test;
    j["dataset"] = d;
  } else if (csv_path) {
    nlohmann::json d;
    d["csv"] = *csv_path;
    d["inputs"] = csv_schema.inputs;
    d["outputs"] = csv_schema.outputs;
    if (csv_schema.split_column) d["split_column"] = *csv_schema.split_column;
    d["test_fraction"] = csv_schema.test_fraction;
    d["val_fraction"] = csv_schema.val_fraction;
    if (csv_schema.restrict_fraction) {
      d["restrict_fraction"] = *csv_schema.restrict_fraction;
      d["restrict_mode"] =
          csv_schema.restrict_mode == ShrinkMode::Midpoint ? "midpoint"
                                                           : "paper_scale";
      d["exempt"] = csv_schema.exempt;
    }
    j["dataset"] = d;
  }
  j["architecture"] = arch.to_json();
  j["factors"] = factors.to_json();
  j["factors_name"] = factors_name;
  j["train"] = train.to_json();
  if (grid.explicit_values) {
    j["lambda_grid"] = *grid.explicit_values;
  } else {
    j["lambda_grid"] = {{"log10_min", grid.log10_min},
                        {"log10_max", grid.log10_max},
                        {"count", grid.count}};
  }
  j["criterion"] = criterion_name(criterion);
  j["extrapolation_points"] = extrapolation_points;
  return j;
}

ExperimentManifest ExperimentManifest::from_json(const nlohmann::json& j) {
  ExperimentManifest m;
  if (j.contains("profile"))
    apply_profile(m, j.at("profile").get<std::string>());
  if (j.contains("seed")) m.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("out_dir")) m.out_dir = j.at("out_dir").get<std::string>();

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    if (d.contains("csv")) {
      m.csv_path = d.at("csv").get<std::string>();
      CsvSchema s;
      s.inputs = d.at("inputs").get<std::vector<std::string>>();
      s.outputs = d.at("outputs").get<std::vector<std::string>>();
      if (d.contains("split_column"))
        s.split_column = d.at("split_column").get<std::string>();
      if (d.contains("test_fraction"))
        s.test_fraction = d.at("test_fraction").get<double>();
      if (d.contains("val_fraction"))
        s.val_fraction = d.at("val_fraction").get<double>();
      if (d.contains("restrict_fraction")) {
        s.restrict_fraction = d.at("restrict_fraction").get<double>();
        if (d.contains("restrict_mode")) {
          const std::string mode = d.at("restrict_mode").get<std::string>();
          if (mode == "midpoint") s.restrict_mode = ShrinkMode::Midpoint;
          else if (mode == "paper_scale") s.restrict_mode = ShrinkMode::PaperScale;
          else throw ConfigError("unknown restrict_mode '" + mode + "'");
        }
        if (d.contains("exempt"))
          s.exempt = d.at("exempt").get<std::vector<std::uint8_t>>();
      }
      m.csv_schema = s;
    } else {
      SyntheticSpec s;
      if (d.at("formulas").is_string()) {
        s.formulas = {d.at("formulas").get<std::string>()};
      } else {
        s.formulas = d.at("formulas").get<std::vector<std::string>>();
      }
      s.input_names = d.at("inputs").get<std::vector<std::string>>();
      s.box = DomainBox::from_json(d.at("box"));
      if (d.contains("n_train")) s.n_train = d.at("n_train").get<long>();
      if (d.contains("n_test")) s.n_test = d.at("n_test").get<long>();
      if (d.contains("gamma")) s.gamma = d.at("gamma").get<double>();
      if (d.contains("val_fraction"))
        s.val_fraction = d.at("val_fraction").get<double>();
      if (d.contains("noisy_test")) s.noisy_test = d.at("noisy_test").get<bool>();
      m.synth = s;
    }
  }

  if (j.contains("architecture")) {
    // Profile multiplicities yield to explicit architecture blocks.
    nlohmann::json a = m.arch.to_json();
    a.update(j.at("architecture"));
    m.arch = ArchitectureSpec::from_json(a);
  }
  if (j.contains("factors")) {
    if (j.at("factors").is_string()) {
      m.factors_name = j.at("factors").get<std::string>();
      m.factors = factors_from_name(m.factors_name);
    } else {
      m.factors = ComplexityFactors::from_json(j.at("factors"));
      m.factors_name = "custom";
    }
  }
  if (j.contains("train")) {
    nlohmann::json t = m.train.to_json();
    t.update(j.at("train"));
    m.train = TrainConfig::from_json(t);
  }
  if (j.contains("lambda_grid")) {
    const auto& g = j.at("lambda_grid");
    if (g.is_array()) {
      m.grid.explicit_values = g.get<std::vector<double>>();
    } else {
      if (g.contains("log10_min")) m.grid.log10_min = g.at("log10_min").get<double>();
      if (g.contains("log10_max")) m.grid.log10_max = g.at("log10_max").get<double>();
      if (g.contains("count")) m.grid.count = g.at("count").get<int>();
    }
  }
  if (j.contains("criterion"))
    m.criterion = criterion_from_name(j.at("criterion").get<std::string>());
  if (j.contains("extrapolation_points"))
    m.extrapolation_points = j.at("extrapolation_points").get<int>();
  return m;
}

ExperimentManifest ExperimentManifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest parse error in " + path + ": " + e.what());
  }
  return from_json(j);
}

std::string ExperimentManifest::hash() const { return fnv1a_hex(to_json().dump()); }

Dataset resolve_dataset(const ExperimentManifest& m) {
  if (m.synth) return generate_synthetic(*m.synth, m.seed);
  if (m.csv_path) {
    CsvSchema schema = m.csv_schema;
    schema.seed = m.seed;
    return load_csv(*m.csv_path, schema);
  }
  throw ConfigError("manifest has no dataset section");
}

int run_gen_data(const ExperimentManifest& m, const std::string& out_dir) {
  if (!m.synth) throw ConfigError("gen-data requires a formula dataset");
  const Dataset ds = resolve_dataset(m);
  fs::create_directories(out_dir);
  const std::string hash = m.hash();
  write_csv(ds, out_dir + "/data.csv", hash);
  std::ofstream meta(out_dir + "/dataset.json");
  if (!meta) throw DataError("cannot write " + out_dir + "/dataset.json");
  meta << dataset_manifest(ds, hash).dump(2) << "\n";
  return 0;
}

int run_sweep(const ExperimentManifest& m, const std::string& out_dir,
              int parallelism, std::ostream& log) {
  const Dataset ds = resolve_dataset(m);
  const std::vector<double> lambdas = m.grid.values();
  const std::string hash = m.hash();
  fs::create_directories(out_dir);

  TrainConfig cfg = m.train;
  cfg.seed = m.seed;
  SweepOutcome sweep =
      lambda_sweep(m.arch, ds, lambdas, cfg, m.factors, parallelism,
                   m.extrapolation_points, /*keep_traces=*/true);

  compute_complexity(sweep.candidates, m.factors);
  nlohmann::json j;
  j["manifest_hash"] = hash;
  j["seed"] = m.seed;
  j["factors"] = m.factors.to_json();
  j["input_names"] = ds.input_names;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : sweep.candidates) arr.push_back(candidate_to_json(c));
  j["candidates"] = arr;
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : sweep.failures) {
    failures.push_back({{"index", f.index},
                        {"lambda", f.lambda},
                        {"message", f.message}});
  }
  j["failures"] = failures;
  {
    std::ofstream out(out_dir + "/candidates.json");
    if (!out) throw DataError("cannot write " + out_dir + "/candidates.json");
    out << j.dump(2) << "\n";
  }
  write_pareto_csv(pareto_front(sweep.candidates), out_dir + "/pareto.csv", hash);
  for (std::size_t i = 0; i < sweep.traces.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "/trace_%03zu.csv", i);
    write_trace_csv(sweep.traces[i], out_dir + name, hash);
  }
  for (const auto& f : sweep.failures) {
    log << "run " << f.index << " (lambda=" << f.lambda
        << ") failed: " << f.message << "\n";
  }
  log << sweep.candidates.size() << "/" << lambdas.size()
      << " sweep runs succeeded\n";
  return 0;
}

int run_select(const std::string& candidates_path, Criterion criterion,
               const ComplexityFactors& factors, const std::string& out_dir,
               std::ostream& report) {
  std::ifstream in(candidates_path);
  if (!in) throw DataError("cannot open candidates file: " + candidates_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("candidates parse error: " + std::string(e.what()));
  }
  std::vector<Candidate> cs;
  for (const auto& cj : j.at("candidates")) cs.push_back(candidate_from_json(cj));
  if (cs.empty()) throw DataError("candidates file contains no candidates");
  std::vector<std::string> names;
  if (j.contains("input_names"))
    names = j.at("input_names").get<std::vector<std::string>>();

  compute_complexity(cs, factors);
  normalize_metrics(cs);
  const Candidate& best = select(cs, criterion);

  report << "criterion: " << criterion_name(criterion) << "\n";
  report << "selected index " << best.index << " (lambda="
         << format_double(best.lambda, 6) << ")\n";
  report << "equation (3 sig figs): " << format_expr(best.expr, 3, names) << "\n";
  report << "equation (full):       " << format_expr(best.expr, 17, names) << "\n";
  report << "validation RMSE: " << format_double(best.nu_int, 6) << "\n";
  if (best.nu_ex)
    report << "extrapolation RMSE: " << format_double(*best.nu_ex, 6) << "\n";
  report << "complexity: " << format_double(best.complexity, 6)
         << "  active parameters: " << best.active_params << "\n";
  report << "relative unit frequencies (surviving weights):\n";
  double total = 0.0;
  for (const auto& [k, v] : best.weight_counts) total += v;
  for (const auto& [k, v] : best.weight_counts) {
    report << "  " << unit_name(k) << ": "
           << format_double(total > 0 ? v / total : 0.0, 4) << " (" << v << ")\n";
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    nlohmann::json out;
    out["criterion"] = criterion_name(criterion);
    out["factors"] = factors.to_json();
    out["selected"] = candidate_to_json(best);
    out["expr_rounded"] = format_expr(best.expr, 3, names);
    if (j.contains("manifest_hash")) out["manifest_hash"] = j.at("manifest_hash");
    std::ofstream of(out_dir + "/selected.json");
    if (!of) throw DataError("cannot write " + out_dir + "/selected.json");
    of << out.dump(2) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

namespace {

double composite_loss(const Network& net, const Eigen::MatrixXd& X,
                      const Eigen::MatrixXd& Y, double delta, double lambda,
                      double bound, const ComplexityFactors& factors,
                      std::uint64_t noise_seed) {
  Rng rng(noise_seed);
  ForwardCache cache;
  net.forward(X, ForwardMode::Stochastic, &rng, cache);
  LossComponents lc = loss_from_cache(net, cache, Y, lambda, delta, factors);
  // Bound hinge, as in the intrinsic penalty epochs.
  double bound_loss = 0.0;
  for (long i = 0; i < cache.y_pred.rows(); ++i)
    for (int d = 0; d < cache.y_pred.cols(); ++d)
      bound_loss += std::max(std::abs(cache.y_pred(i, d)) - bound, 0.0);
  return lc.total + delta * bound_loss / static_cast<double>(X.rows());
}

}  // namespace

GradCheckResult check_gradients(const ArchitectureSpec& arch,
                                std::uint64_t seed, bool sabotage) {
  const double delta = 1.0;
  const double lambda = 0.05;
  const double bound = 1.5;  // low enough that some rows trip the hinge
  const ComplexityFactors factors = ComplexityFactors::motor();
  const std::uint64_t noise_seed = derive_seed(seed, 0x6e6f697365);

  Network net = Network::build(arch, seed);
  Rng data_rng(derive_seed(seed, 0x64617461));
  const long B = 24;
  Eigen::MatrixXd X(B, arch.input_dim), Y(B, arch.output_dim);
  for (long i = 0; i < B; ++i) {
    for (int d = 0; d < arch.input_dim; ++d) X(i, d) = data_rng.uniform(-1.5, 1.5);
    for (int d = 0; d < arch.output_dim; ++d) Y(i, d) = data_rng.uniform(-2, 2);
  }
  // Mixed-branch singular inputs: push some biases negative.
  for (int l = 0; l < net.n_hidden(); ++l) {
    const auto& t = net.layer(l);
    for (std::size_t k = 0; k < t.singular_slot.size(); ++k) {
      if (k % 2 == 1) net.b(l, t.singular_slot[k]) = -0.4;
    }
  }

  GradCheckResult res;
  {
    Rng rng(noise_seed);
    ForwardCache cache;
    net.forward(X, ForwardMode::Stochastic, &rng, cache);
    for (int l = 0; l < net.n_hidden(); ++l) {
      const auto& t = net.layer(l);
      for (int s : t.singular_slot) {
        for (long i = 0; i < B; ++i)
          res.out_of_domain_rows += cache.z[static_cast<std::size_t>(l)](i, s) <= 0 ? 1 : 0;
      }
    }

    Eigen::MatrixXd dLdY = (cache.y_pred - Y) * (2.0 / static_cast<double>(B));
    for (long i = 0; i < B; ++i) {
      for (int d = 0; d < arch.output_dim; ++d) {
        const double y = cache.y_pred(i, d);
        if (std::abs(y) > bound)
          dLdY(i, d) += delta * (y > 0 ? 1.0 : -1.0) / static_cast<double>(B);
      }
    }
    std::vector<double> analytic;
    net.backward(cache, dLdY, delta, lambda, factors, analytic);
    if (sabotage && !analytic.empty()) {
      std::size_t worst = 0;
      for (std::size_t i = 1; i < analytic.size(); ++i)
        if (std::abs(analytic[i]) > std::abs(analytic[worst])) worst = i;
      analytic[worst] *= -1.0;
    }

    const double h = 1e-5;
    auto params = net.params();
    res.checked_params = static_cast<long>(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double saved = params[i];
      params[i] = saved + h;
      const double fp = composite_loss(net, X, Y, delta, lambda, bound, factors,
                                       noise_seed);
      params[i] = saved - h;
      const double fm = composite_loss(net, X, Y, delta, lambda, bound, factors,
                                       noise_seed);
      params[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double rel = std::abs(analytic[i] - fd) /
                         std::max({std::abs(analytic[i]), std::abs(fd), 1.0});
      res.max_rel_error = std::max(res.max_rel_error, rel);
    }
  }

  // Pure-affine check against the closed-form least-squares gradient.
  {
    ArchitectureSpec affine;
    affine.input_dim = 3;
    affine.output_dim = 1;
    affine.hidden_layers = 0;
    affine.unary.clear();
    affine.binary.clear();
    affine.prohibitions.clear();
    Network anet = Network::build(affine, seed);
    anet.set_all_gates(30.0);  // deterministic open gates
    Rng arng(derive_seed(seed, 0x616666));
    Eigen::MatrixXd AX(5, 3), AY(5, 1);
    for (long i = 0; i < 5; ++i) {
      for (int d = 0; d < 3; ++d) AX(i, d) = arng.uniform(-1, 1);
      AY(i, 0) = arng.uniform(-1, 1);
    }
    ForwardCache cache;
    anet.forward(AX, ForwardMode::Deterministic, nullptr, cache);
    Eigen::MatrixXd dLdY = (cache.y_pred - AY) * (2.0 / 5.0);
    std::vector<double> analytic;
    anet.backward(cache, dLdY, 0.0, 0.0, factors, analytic);
    // closed form: dL/dW = 2/N (XW^T + b - Y)^T X
    Eigen::Map<const Eigen::MatrixXd> W(anet.params().data(), 1, 3);
    const Eigen::MatrixXd resid = AX * W.transpose() +
                                  Eigen::VectorXd::Constant(5, anet.out_b(0)) -
                                  AY;
    const Eigen::MatrixXd gW = 2.0 / 5.0 * resid.transpose() * AX;
    const double gB = 2.0 / 5.0 * resid.sum();
    for (int c = 0; c < 3; ++c) {
      const double a = analytic[static_cast<std::size_t>(c)];  // W block first
      res.max_rel_error_affine =
          std::max(res.max_rel_error_affine,
                   std::abs(a - gW(0, c)) / std::max(1.0, std::abs(gW(0, c))));
    }
    const double a_b = analytic[static_cast<std::size_t>(anet.layout().out.b)];
    res.max_rel_error_affine =
        std::max(res.max_rel_error_affine,
                 std::abs(a_b - gB) / std::max(1.0, std::abs(gB)));
  }

  res.pass = res.max_rel_error <= 1e-4 && res.max_rel_error_affine <= 1e-8;
  return res;
}

GradCheckResult check_gradients_default(std::uint64_t seed, bool sabotage) {
  ArchitectureSpec arch;
  arch.input_dim = 2;
  arch.output_dim = 2;
  arch.hidden_layers = 2;
  arch.unary = {{UnitKind::Cos, 1},
                {UnitKind::Exp, 1},
                {UnitKind::Log, 1},
                {UnitKind::Sqrt, 1},
                {UnitKind::Square, 1}};
  arch.binary = {{UnitKind::Mul, 1}, {UnitKind::Div, 1}};
  return check_gradients(arch, seed, sabotage);
}

}  // namespace ieql
