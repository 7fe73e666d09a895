#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "ieql/common.hpp"
#include "ieql/expr.hpp"
#include "json.hpp"

namespace ieql {

struct Interval {
  double lo = 0.0, hi = 1.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

/// Per-dimension train and test intervals. The train interval must be
/// contained in the test interval; the difference is the extrapolation
/// margin.
struct DomainBox {
  std::vector<Interval> train;
  std::vector<Interval> test;
  std::vector<std::uint8_t> exempt;  // dims excluded from shrinking

  int dim() const { return static_cast<int>(test.size()); }
  void validate() const;
  bool train_contains(const Eigen::RowVectorXd& x) const;
  bool test_contains(const Eigen::RowVectorXd& x) const;
  /// True when x lies in the test box but outside the train box.
  bool is_extrapolation(const Eigen::RowVectorXd& x) const;

  nlohmann::json to_json() const;
  static DomainBox from_json(const nlohmann::json& j);
};

enum class ShrinkMode { Midpoint, PaperScale };

/// Train interval derived from a test interval. Midpoint keeps the centre
/// and scales the half-width by `fraction`; PaperScale maps [a,b] to
/// [f*a, f*b].
Interval shrink_domain(Interval test, double fraction, ShrinkMode mode);

enum class Split { Train, Validation, Test };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct Dataset {
  Eigen::MatrixXd X;  // N x D
  Eigen::MatrixXd Y;  // N x D'
  std::vector<Split> split;
  DomainBox box;
  double noise_std = 0.0;
  std::vector<std::string> input_names;
  std::vector<std::string> output_names;
  std::vector<std::string> formulas;  // generator formulas, possibly empty
  std::uint64_t seed = 0;

  int input_dim() const { return static_cast<int>(X.cols()); }
  int output_dim() const { return static_cast<int>(Y.cols()); }
  long rows(Split s) const;
  Eigen::MatrixXd x_rows(Split s) const;
  Eigen::MatrixXd y_rows(Split s) const;
  /// Deterministically thinned test rows outside the train box, for
  /// extrapolation scoring. Empty when no dimension is restricted.
  std::pair<Eigen::MatrixXd, Eigen::MatrixXd> extrapolation_rows(long max_rows) const;
  void validate() const;
};

struct SyntheticSpec {
  std::vector<std::string> formulas;
  std::vector<std::string> input_names;
  DomainBox box;
  long n_train = 10000;
  long n_test = 1000;
  double gamma = 0.01;
  double val_fraction = 0.1;
  bool noisy_test = false;
};

Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

struct CsvSchema {
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::optional<std::string> split_column;
  double test_fraction = 0.2;
  double val_fraction = 0.1;
  std::optional<double> restrict_fraction;  // train-domain shrink, e.g. 0.8
  ShrinkMode restrict_mode = ShrinkMode::Midpoint;
  std::vector<std::uint8_t> exempt;  // dims excluded from the shrink
  std::uint64_t seed = 0;
};

Dataset load_csv(const std::string& path, const CsvSchema& schema);
void write_csv(const Dataset& ds, const std::string& path,
               const std::string& manifest_hash = "");

Eigen::MatrixXd sample_box(const std::vector<Interval>& box, long n, Rng& rng);
/// Unlabeled points from the test box for intrinsic penalty epochs.
Eigen::MatrixXd sample_penalty_inputs(const DomainBox& box, long n,
                                      std::uint64_t seed);

nlohmann::json dataset_manifest(const Dataset& ds,
                                const std::string& manifest_hash = "");

}  // namespace ieql
