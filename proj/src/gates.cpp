#include "ieql/gates.hpp"

namespace ieql {

GateSample sample_gate(double log_alpha, double u, const GateHyper& h) {
  if (!(u > 0.0 && u < 1.0))
    throw ConfigError("gate noise u must lie strictly inside (0,1)");
  const double logit_u = std::log(u) - std::log1p(-u);
  const double s = stable_sigmoid((logit_u + log_alpha) / h.beta);
  const double s_bar = s * h.stretch() + h.gamma;
  if (s_bar <= 0.0) return {0.0, 0.0};
  if (s_bar >= 1.0) return {1.0, 0.0};
  const double ds = s * (1.0 - s) / h.beta;
  return {s_bar, ds * h.stretch()};
}

double expected_l0(double log_alpha, const GateHyper& h) {
  return stable_sigmoid(log_alpha - h.l0_shift());
}

double expected_l0_grad(double log_alpha, const GateHyper& h) {
  const double p = stable_sigmoid(log_alpha - h.l0_shift());
  return p * (1.0 - p);
}

double deterministic_gate(double log_alpha, const GateHyper& h) {
  const double z = stable_sigmoid(log_alpha) * h.stretch() + h.gamma;
  if (z <= 0.0) return 0.0;
  if (z >= 1.0) return 1.0;
  return z;
}

double init_log_alpha(double initial_dropout) {
  if (!(initial_dropout > 0.0 && initial_dropout < 1.0))
    throw ConfigError("initial dropout rate must lie in (0,1)");
  return std::log((1.0 - initial_dropout) / initial_dropout);
}

}  // namespace ieql
