#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ieql/data.hpp"
#include "ieql/network.hpp"
#include "ieql/selection.hpp"

namespace ieql {

struct TrainConfig {
  int t1 = 2000;    // epochs without complexity regularization
  int t2 = 10000;   // regularized epochs
  double lr = 0.001;
  double beta1 = 0.4;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lambda = 0.0;        // complexity regularization strength
  double delta = 1.0;         // domain/bound penalty strength
  double bound = 10.0;        // output bound B for penalty epochs
  int penalty_points = 100;   // samples per intrinsic penalty epoch
  int batch = 128;
  std::uint64_t seed = 0;
  double max_skip_fraction = 0.01;  // non-finite batch tolerance

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct AdamState {
  std::vector<double> m, v;
  long step = 0;
  void init(std::size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    step = 0;
  }
};

/// Bias-corrected Adam update, in place.
void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, const TrainConfig& config);

struct LossComponents {
  double total = 0.0;
  double data = 0.0;        // mean squared error
  double complexity = 0.0;  // sum_u c_u sum_j expected_l0
  double domain = 0.0;      // singular-unit hinge penalty
};

/// L = L_D + delta*L_su + lambda*L_C for an existing forward cache.
LossComponents loss_from_cache(const Network& net, const ForwardCache& cache,
                               const Eigen::MatrixXd& Y, double lambda,
                               double delta, const ComplexityFactors& factors);

/// Convenience wrapper running its own forward pass (stochastic when an RNG
/// is supplied, deterministic otherwise).
LossComponents total_loss(const Network& net, const Eigen::MatrixXd& X,
                          const Eigen::MatrixXd& Y, double lambda, double delta,
                          const ComplexityFactors& factors, Rng* rng = nullptr);

double rmse(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target);

struct TraceRow {
  double data = 0.0, complexity = 0.0, domain = 0.0, bound = 0.0,
         val_rmse = 0.0;
};

struct TrainTrace {
  std::vector<TraceRow> rows;
  long skipped_batches = 0;
  long total_batches = 0;
  double wall_seconds = 0.0;
};

void write_trace_csv(const TrainTrace& trace, const std::string& path,
                     const std::string& manifest_hash = "");

struct PenaltyResult {
  double domain = 0.0;
  double bound = 0.0;
};

/// One optimization step on delta*(L_su + L_bound) over unlabeled inputs
/// sampled from the test domain. Shares the trainer's Adam state.
PenaltyResult penalty_epoch(Network& net, const Eigen::MatrixXd& x_penalty,
                            double delta, double bound, AdamState& adam,
                            const TrainConfig& config,
                            const ComplexityFactors& factors, Rng& rng);

struct TrainResult {
  Network net;
  TrainTrace trace;
};

/// Two-phase schedule: t1 epochs with lambda = 0, then t2 epochs with the
/// configured lambda; one intrinsic penalty epoch after every epoch.
TrainResult train(Network net, const Dataset& data, const TrainConfig& config,
                  const ComplexityFactors& factors, bool keep_trace = true);

std::vector<double> lambda_grid(double log10_min, double log10_max, int count);

struct SweepFailure {
  int index = 0;
  double lambda = 0.0;
  std::string message;
};

struct SweepOutcome {
  std::vector<Candidate> candidates;
  std::vector<SweepFailure> failures;
  std::vector<TrainTrace> traces;  // parallel to the lambda grid
};

/// Independent training run per lambda (fresh network, derived seed). The
/// result is deterministic for a given master seed regardless of
/// `parallelism`. Throws NumericError only if every run fails.
SweepOutcome lambda_sweep(const ArchitectureSpec& arch, const Dataset& data,
                          std::span<const double> lambdas,
                          const TrainConfig& config,
                          const ComplexityFactors& factors, int parallelism,
                          int n_extrapolation = 40, bool keep_traces = false);

// ---------------------------------------------------------------------------
// Dense MLP baseline (tanh, five hidden layers of 50 by default); used only
// for RMSE comparison tables.
// ---------------------------------------------------------------------------

struct MlpConfig {
  int hidden_layers = 5;
  int width = 50;
  int epochs = 5000;
  int batch = 100;
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
};

class MlpModel {
 public:
  MlpModel(int input_dim, int output_dim, const MlpConfig& config);
  Eigen::MatrixXd predict(const Eigen::MatrixXd& X) const;
  long param_count() const;
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  void backward(const Eigen::MatrixXd& X, const Eigen::MatrixXd& dLdY,
                std::vector<double>& grad) const;

 private:
  friend struct MlpLayout;
  int input_dim_, output_dim_, hidden_layers_, width_;
  std::vector<double> params_;
};

struct MlpResult {
  MlpModel model;
  double val_rmse = 0.0;
  double test_rmse = 0.0;
  int best_epoch = -1;
};

MlpResult train_mlp_baseline(const Dataset& data, const MlpConfig& config);

}  // namespace ieql
