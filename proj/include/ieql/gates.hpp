#pragma once

#include "ieql/common.hpp"

namespace ieql {

/// Shared hard-concrete distribution hyperparameters: stretch interval
/// (gamma, zeta) around (0,1) and temperature beta.
struct GateHyper {
  double zeta = 1.1;
  double gamma = -0.1;
  double beta = 2.0 / 3.0;

  void validate() const {
    if (!(gamma < 0.0 && 0.0 < 1.0 && 1.0 < zeta))
      throw ConfigError("gate hyperparameters require gamma < 0 < 1 < zeta");
    if (!(beta > 0.0)) throw ConfigError("gate temperature beta must be > 0");
  }

  double stretch() const { return zeta - gamma; }
  // beta * log(-gamma/zeta), the shift appearing in the expected-L0 term.
  double l0_shift() const { return beta * std::log(-gamma / zeta); }
};

struct GateSample {
  double z;              // gate value in [0,1]
  double dz_dlog_alpha;  // pathwise derivative, 0 on the clamped branches
};

/// Stretched-and-clamped concrete sample for one gate:
///   s = sigmoid((log u - log(1-u) + log_alpha)/beta)
///   z = clamp(s*(zeta-gamma) + gamma, 0, 1)
GateSample sample_gate(double log_alpha, double u, const GateHyper& h);

/// Probability that the stretched gate is non-zero:
/// sigmoid(log_alpha - beta*log(-gamma/zeta)). This is the per-gate
/// complexity loss.
double expected_l0(double log_alpha, const GateHyper& h);
double expected_l0_grad(double log_alpha, const GateHyper& h);

/// Noise-free gate estimate used for validation and extraction:
/// clamp(sigmoid(log_alpha)*(zeta-gamma) + gamma, 0, 1).
double deterministic_gate(double log_alpha, const GateHyper& h);

/// log_alpha for a requested initial dropout rate d: log((1-d)/d).
double init_log_alpha(double initial_dropout);

}  // namespace ieql
