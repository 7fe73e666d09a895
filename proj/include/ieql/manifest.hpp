#pragma once

#include <iosfwd>
#include <optional>
#include <string>

#include "ieql/training.hpp"

namespace ieql {

struct LambdaGridSpec {
  double log10_min = -5.0;
  double log10_max = 0.0;
  int count = 78;
  std::optional<std::vector<double>> explicit_values;

  std::vector<double> values() const {
    if (explicit_values) {
      if (explicit_values->empty()) throw ConfigError("lambda grid is empty");
      return *explicit_values;
    }
    return lambda_grid(log10_min, log10_max, count);
  }
};

/// Everything one experiment needs: data source, architecture, factors,
/// training configuration, lambda grid, and the selection criterion. The
/// JSON form is hashed for provenance; the hash appears in every output.
struct ExperimentManifest {
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  std::string profile;  // "", "desk" or "paper"

  std::optional<SyntheticSpec> synth;
  std::optional<std::string> csv_path;
  CsvSchema csv_schema;

  ArchitectureSpec arch;
  ComplexityFactors factors = ComplexityFactors::plain();
  std::string factors_name = "plain";
  TrainConfig train;
  LambdaGridSpec grid;
  Criterion criterion = Criterion::VintS;
  int extrapolation_points = 40;

  nlohmann::json to_json() const;
  static ExperimentManifest from_json(const nlohmann::json& j);
  static ExperimentManifest load(const std::string& path);
  std::string hash() const;
};

/// Named profiles: "paper" keeps the full-scale defaults; "desk" shrinks to
/// 2 hidden layers with doubled units, t1=500/t2=2000 and a 12-point grid.
void apply_profile(ExperimentManifest& m, const std::string& profile);

ComplexityFactors factors_from_name(const std::string& name_or_path);

Dataset resolve_dataset(const ExperimentManifest& m);

int run_gen_data(const ExperimentManifest& m, const std::string& out_dir);
int run_sweep(const ExperimentManifest& m, const std::string& out_dir,
              int parallelism, std::ostream& log);
int run_select(const std::string& candidates_path, Criterion criterion,
               const ComplexityFactors& factors, const std::string& out_dir,
               std::ostream& report);

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_rel_error_affine = 0.0;
  long checked_params = 0;
  long out_of_domain_rows = 0;
  bool pass = false;
};

/// Central finite differences against the analytic gradient of the full
/// training objective (fixed gate noise), plus a pure-affine closed-form
/// case. `sabotage` flips one gradient entry to prove the check can fail.
GradCheckResult check_gradients(const ArchitectureSpec& arch,
                                std::uint64_t seed, bool sabotage = false);
GradCheckResult check_gradients_default(std::uint64_t seed,
                                        bool sabotage = false);

std::string fnv1a_hex(const std::string& bytes);

}  // namespace ieql
