#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ieql/common.hpp"
#include "ieql/expr.hpp"
#include "ieql/gates.hpp"
#include "json.hpp"

namespace ieql {

// ---------------------------------------------------------------------------
// Architecture description: layer count, unit multiplicities per hidden
// layer, and expert-prohibited (consumer, producer) unit pairs.
// ---------------------------------------------------------------------------

struct ArchitectureSpec {
  int input_dim = 1;
  int output_dim = 1;
  int hidden_layers = 4;
  std::vector<std::pair<UnitKind, int>> unary = {{UnitKind::Cos, 4},
                                                 {UnitKind::Exp, 4},
                                                 {UnitKind::Log, 4},
                                                 {UnitKind::Sqrt, 4},
                                                 {UnitKind::Square, 4}};
  std::vector<std::pair<UnitKind, int>> binary = {{UnitKind::Mul, 4},
                                                  {UnitKind::Div, 4}};
  // Default bans: cos(cos), cos(exp), exp(exp), log(log).
  std::vector<std::pair<UnitKind, UnitKind>> prohibitions = {
      {UnitKind::Cos, UnitKind::Cos},
      {UnitKind::Cos, UnitKind::Exp},
      {UnitKind::Exp, UnitKind::Exp},
      {UnitKind::Log, UnitKind::Log}};

  double init_dropout = 0.5;    // initial gate dropout rate
  double gate_noise_std = 0.01; // symmetry-breaking noise on log_alpha
  double init_scale = 1.0;      // multiplier on the uniform weight-init bound

  void validate() const;
  nlohmann::json to_json() const;
  static ArchitectureSpec from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------------------
// Network topology helpers
// ---------------------------------------------------------------------------

struct UnitInstance {
  UnitKind kind;
  int slot0;            // first pre-activation slot in its layer
  int n_slots;          // 1 for unary, 2 for binary
  int out_col;          // column within the layer's output block
  int alpha_index = -1; // >= 0 for singular units (log, sqrt, div)
};

struct LayerTopo {
  int width = 0;    // concat width feeding this layer
  int n_slots = 0;
  int n_outputs = 0;
  std::vector<UnitInstance> units;
  std::vector<UnitKind> slot_kind;    // consumer kind per slot
  std::vector<int> singular_slot;     // slots that feed a singular function
  std::vector<int> singular_alpha;    // parallel alpha indices
  Eigen::MatrixXd mask;               // n_slots x width, 1 = connected
};

struct ColTag {
  bool is_input = true;
  int layer = -1;  // producing hidden layer
  int unit = -1;   // unit index within that layer
  UnitKind kind = UnitKind::AddSub;
};

struct ParamBlock {
  long w = 0, b = 0, la = 0;
};

struct ParamLayout {
  std::vector<ParamBlock> hidden;
  ParamBlock out;
  long alpha = 0;
  long n_alpha = 0;
  long total = 0;
};

struct ParamCounts {
  long weights = 0;  // unmasked weights (hidden + output)
  long biases = 0;
  long gates = 0;    // == weights, one gate per unmasked weight
  long relax = 0;    // alpha_hat parameters
  long weights_and_biases() const { return weights + biases; }
};

// ---------------------------------------------------------------------------
// Forward pass artifacts
// ---------------------------------------------------------------------------

struct ForwardCache {
  bool stochastic = false;
  long batch = 0;
  Eigen::MatrixXd ytilde;                 // batch x total concat width
  std::vector<Eigen::MatrixXd> z;         // per hidden layer, batch x slots
  std::vector<Eigen::MatrixXd> gate_z;    // per hidden layer + output last
  std::vector<Eigen::MatrixXd> gate_dz;
  std::vector<Eigen::MatrixXd> w_eff;
  Eigen::MatrixXd y_pred;                 // batch x output_dim
};

enum class ForwardMode { Deterministic, Stochastic };

/// Relaxed singular function: f(z + alpha) for z > 0, else 0. Non-singular
/// kinds ignore alpha. Div means the positive reciprocal branch.
double relaxed_unary(UnitKind kind, double z, double alpha);
double relaxed_unary_dz(UnitKind kind, double z, double alpha);

struct Extraction {
  std::vector<Expression> outputs;      // simplified, one per output dim
  std::vector<Expression> raw_outputs;  // pre-simplification
  long active_params = 0;
  std::map<UnitKind, double> weight_counts;  // surviving weights per kind
};

// ---------------------------------------------------------------------------
// The equation-learning network: layered atomic units over the concatenated
// outputs of all preceding layers, per-weight hard-concrete gates, learnable
// relaxation of singular units, and prohibition masks.
// ---------------------------------------------------------------------------

class Network {
 public:
  static Network build(const ArchitectureSpec& spec, std::uint64_t seed);

  const ArchitectureSpec& spec() const { return spec_; }
  const GateHyper& hyper() const { return hyper_; }
  std::uint64_t seed() const { return seed_; }
  int n_hidden() const { return static_cast<int>(topo_.size()); }
  const LayerTopo& layer(int l) const { return topo_[static_cast<std::size_t>(l)]; }
  int total_width() const { return total_width_; }
  int out_width() const { return topo_.empty() ? spec_.input_dim
                                               : topo_.back().width + topo_.back().n_outputs; }
  const std::vector<ColTag>& col_tags() const { return col_tags_; }
  const ParamLayout& layout() const { return layout_; }
  ParamCounts param_counts() const;

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  void set_params(std::span<const double> p);

  // Parameter accessors (layer-local indices).
  double& w(int l, int slot, int col);
  double& b(int l, int slot);
  double& log_alpha(int l, int slot, int col);
  double& out_w(int d, int col);
  double& out_b(int d);
  double& out_log_alpha(int d, int col);
  double& alpha_hat(int index);
  double w(int l, int slot, int col) const;
  double mask(int l, int slot, int col) const;
  long n_alpha() const { return layout_.n_alpha; }
  double relax_alpha(int index) const;  // softplus(alpha_hat)

  /// Open or close every gate at once (test wiring helper).
  void set_all_gates(double log_alpha_value);
  /// Clamp all gate locations into [-limit, limit].
  void clamp_log_alpha(double limit = 30.0);

  void forward(const Eigen::MatrixXd& X, ForwardMode mode, Rng* rng,
               ForwardCache& cache) const;
  Eigen::MatrixXd predict(const Eigen::MatrixXd& X) const;

  /// Mean over the batch of summed hinge violations max(-z, 0) across all
  /// singular-unit inputs.
  double domain_penalty(const ForwardCache& cache) const;
  /// Smallest singular-function input over the batch; nullopt when the
  /// network has no singular units (or `only` kind absent).
  std::optional<double> min_singular_input(
      const ForwardCache& cache, std::optional<UnitKind> only = {}) const;

  /// Gradient of  mean_i <dLdY_i, y_i>  + delta * L_su + lambda * L_C  with
  /// respect to every learnable parameter. dLdY must already include the
  /// data-loss scaling (e.g. 2/B * residual for the MSE).
  void backward(const ForwardCache& cache, const Eigen::MatrixXd& dLdY,
                double delta, double lambda, const ComplexityFactors& factors,
                std::vector<double>& grad) const;

  std::map<UnitKind, double> weighted_gate_counts(bool deterministic) const;

  Extraction extract_expression() const;

  nlohmann::json to_json() const;
  static Network from_json(const nlohmann::json& j);

 private:
  Network() = default;
  void build_topology();
  Eigen::Map<Eigen::MatrixXd> map_w(int l);
  Eigen::Map<const Eigen::MatrixXd> map_w(int l) const;
  Eigen::Map<Eigen::MatrixXd> map_la(int l);
  Eigen::Map<const Eigen::MatrixXd> map_la(int l) const;
  Eigen::Map<Eigen::VectorXd> map_b(int l);
  Eigen::Map<const Eigen::VectorXd> map_b(int l) const;
  // l == n_hidden() addresses the output block in the maps above.

  ArchitectureSpec spec_;
  GateHyper hyper_;
  std::uint64_t seed_ = 0;
  std::vector<LayerTopo> topo_;
  std::vector<ColTag> col_tags_;
  ParamLayout layout_;
  int total_width_ = 0;
  std::vector<double> params_;
};

}  // namespace ieql
