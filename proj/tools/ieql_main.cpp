#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "ieql/manifest.hpp"

namespace {

// Exit codes: 0 ok, 1 usage/config, 2 data, 3 numerical failure.
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : fallback;
}

struct CommonOpts {
  std::string manifest_path;
  std::string out_dir;
  std::string profile;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

ieql::ExperimentManifest load_manifest(const CommonOpts& o) {
  ieql::ExperimentManifest m = ieql::ExperimentManifest::load(o.manifest_path);
  if (!o.profile.empty()) ieql::apply_profile(m, o.profile);
  if (o.seed_set) {
    m.seed = o.seed;
  } else if (const char* s = std::getenv("IEQL_SEED")) {
    m.seed = std::strtoull(s, nullptr, 10);
  }
  return m;
}

std::string resolve_out(const CommonOpts& o, const ieql::ExperimentManifest& m) {
  if (!o.out_dir.empty()) return o.out_dir;
  const std::string env = env_or("IEQL_OUT", "");
  return env.empty() ? m.out_dir : env;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ieql: train equation-learning networks and extract compact "
               "closed-form equations"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string criterion = "vint-s";
  std::string factors = "";
  std::string candidates_path;
  int parallel = 1;

  auto add_common = [&](CLI::App* cmd, bool needs_manifest) {
    if (needs_manifest)
      cmd->add_option("--manifest", opts.manifest_path, "experiment manifest (JSON)")
          ->required();
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--profile", opts.profile, "configuration profile (desk|paper)");
    cmd->add_option("--seed", opts.seed, "master seed override")
        ->each([&](const std::string&) { opts.seed_set = true; });
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, true);

  CLI::App* sweep = app.add_subcommand(
      "sweep", "train one network per regularization strength");
  add_common(sweep, true);
  sweep->add_option("--parallel", parallel, "worker threads")->check(CLI::PositiveNumber);

  CLI::App* sel = app.add_subcommand("select", "apply a selection criterion");
  add_common(sel, false);
  sel->add_option("--candidates", candidates_path, "candidates.json path")
      ->required();
  sel->add_option("--criterion", criterion, "vint | vint-s | vint-ex");
  sel->add_option("--factors", factors, "plain | motor | JSON path");

  CLI::App* grad = app.add_subcommand("check-grad",
                                      "verify gradients against finite differences");
  grad->add_option("--seed", opts.seed, "seed")
      ->each([&](const std::string&) { opts.seed_set = true; });

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto m = load_manifest(opts);
      return ieql::run_gen_data(m, resolve_out(opts, m));
    }
    if (sweep->parsed()) {
      const auto m = load_manifest(opts);
      return ieql::run_sweep(m, resolve_out(opts, m), parallel, std::cerr);
    }
    if (sel->parsed()) {
      const auto crit = ieql::criterion_from_name(criterion);
      const auto f = factors.empty() ? ieql::ComplexityFactors::plain()
                                     : ieql::factors_from_name(factors);
      return ieql::run_select(candidates_path, crit, f, opts.out_dir, std::cout);
    }
    if (grad->parsed()) {
      std::uint64_t seed = opts.seed_set ? opts.seed : 7;
      if (!opts.seed_set) {
        if (const char* s = std::getenv("IEQL_SEED"))
          seed = std::strtoull(s, nullptr, 10);
      }
      const auto res = ieql::check_gradients_default(seed);
      std::cout << "checked " << res.checked_params << " parameters, "
                << res.out_of_domain_rows << " out-of-domain singular inputs\n";
      std::cout << "max relative error: "
                << ieql::format_double(res.max_rel_error, 6) << "\n";
      std::cout << "max affine closed-form error: "
                << ieql::format_double(res.max_rel_error_affine, 6) << "\n";
      std::cout << (res.pass ? "PASS" : "FAIL") << "\n";
      return res.pass ? 0 : kExitNumeric;
    }
  } catch (const ieql::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ieql::ParseError& e) {
    std::cerr << "formula error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ieql::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ieql::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}
