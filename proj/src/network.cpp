#include "ieql/network.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>

namespace ieql {

// ---------------------------------------------------------------------------
// ArchitectureSpec
// ---------------------------------------------------------------------------

void ArchitectureSpec::validate() const {
  if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
  if (output_dim < 1) throw ConfigError("output_dim must be >= 1");
  if (hidden_layers < 0) throw ConfigError("hidden_layers must be >= 0");
  for (const auto& [k, m] : unary) {
    if (!unit_is_unary(k))
      throw ConfigError(std::string("'") + unit_name(k) + "' is not a unary unit");
    if (m < 0) throw ConfigError("unit multiplicities must be >= 0");
  }
  for (const auto& [k, m] : binary) {
    if (!unit_is_binary(k))
      throw ConfigError(std::string("'") + unit_name(k) + "' is not a binary unit");
    if (m < 0) throw ConfigError("unit multiplicities must be >= 0");
  }
  for (const auto& [consumer, producer] : prohibitions) {
    if (consumer == UnitKind::AddSub || producer == UnitKind::AddSub)
      throw ConfigError("prohibition rules must reference atomic unit kinds");
  }
  if (!(init_dropout > 0.0 && init_dropout < 1.0))
    throw ConfigError("init_dropout must lie in (0,1)");
  if (gate_noise_std < 0.0)
    throw ConfigError("gate_noise_std must be >= 0");
  if (!(init_scale > 0.0)) throw ConfigError("init_scale must be > 0");
}

nlohmann::json ArchitectureSpec::to_json() const {
  nlohmann::json j;
  j["input_dim"] = input_dim;
  j["output_dim"] = output_dim;
  j["hidden_layers"] = hidden_layers;
  auto units = [](const std::vector<std::pair<UnitKind, int>>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [k, m] : v) arr.push_back({unit_name(k), m});
    return arr;
  };
  j["unary"] = units(unary);
  j["binary"] = units(binary);
  nlohmann::json proh = nlohmann::json::array();
  for (const auto& [c, p] : prohibitions)
    proh.push_back({unit_name(c), unit_name(p)});
  j["prohibitions"] = proh;
  j["init_dropout"] = init_dropout;
  j["gate_noise_std"] = gate_noise_std;
  j["init_scale"] = init_scale;
  return j;
}

ArchitectureSpec ArchitectureSpec::from_json(const nlohmann::json& j) {
  ArchitectureSpec s;
  s.input_dim = j.at("input_dim").get<int>();
  s.output_dim = j.at("output_dim").get<int>();
  s.hidden_layers = j.at("hidden_layers").get<int>();
  auto units = [](const nlohmann::json& arr) {
    std::vector<std::pair<UnitKind, int>> v;
    if (arr.is_object()) {
      for (auto it = arr.begin(); it != arr.end(); ++it)
        v.emplace_back(unit_from_name(it.key()), it.value().get<int>());
    } else {
      for (const auto& e : arr)
        v.emplace_back(unit_from_name(e.at(0).get<std::string>()),
                       e.at(1).get<int>());
    }
    return v;
  };
  if (j.contains("unary")) s.unary = units(j.at("unary"));
  if (j.contains("binary")) s.binary = units(j.at("binary"));
  if (j.contains("prohibitions")) {
    s.prohibitions.clear();
    for (const auto& e : j.at("prohibitions")) {
      s.prohibitions.emplace_back(unit_from_name(e.at(0).get<std::string>()),
                                  unit_from_name(e.at(1).get<std::string>()));
    }
  }
  if (j.contains("init_dropout")) s.init_dropout = j.at("init_dropout").get<double>();
  if (j.contains("gate_noise_std"))
    s.gate_noise_std = j.at("gate_noise_std").get<double>();
  if (j.contains("init_scale")) s.init_scale = j.at("init_scale").get<double>();
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Relaxed unit functions
// ---------------------------------------------------------------------------

double relaxed_unary(UnitKind kind, double z, double alpha) {
  switch (kind) {
    case UnitKind::Cos: return std::cos(z);
    case UnitKind::Exp: return std::exp(z);
    case UnitKind::Square: return z * z;
    case UnitKind::Log: return z > 0.0 ? std::log(z + alpha) : 0.0;
    case UnitKind::Sqrt: return z > 0.0 ? std::sqrt(z + alpha) : 0.0;
    case UnitKind::Div: return z > 0.0 ? 1.0 / (z + alpha) : 0.0;
    default:
      throw ConfigError("relaxed_unary: not a function kind");
  }
}

double relaxed_unary_dz(UnitKind kind, double z, double alpha) {
  switch (kind) {
    case UnitKind::Cos: return -std::sin(z);
    case UnitKind::Exp: return std::exp(z);
    case UnitKind::Square: return 2.0 * z;
    case UnitKind::Log: return z > 0.0 ? 1.0 / (z + alpha) : 0.0;
    case UnitKind::Sqrt: return z > 0.0 ? 0.5 / std::sqrt(z + alpha) : 0.0;
    case UnitKind::Div: {
      if (z <= 0.0) return 0.0;
      const double r = 1.0 / (z + alpha);
      return -r * r;
    }
    default:
      throw ConfigError("relaxed_unary_dz: not a function kind");
  }
}

// ---------------------------------------------------------------------------
// Topology / layout
// ---------------------------------------------------------------------------

void Network::build_topology() {
  spec_.validate();
  hyper_.validate();
  topo_.clear();
  col_tags_.clear();
  const int D = spec_.input_dim;
  for (int i = 0; i < D; ++i) col_tags_.push_back(ColTag{});

  int width = D;
  int n_alpha = 0;
  for (int l = 0; l < spec_.hidden_layers; ++l) {
    LayerTopo t;
    t.width = width;
    int slot = 0, out = 0;
    auto add_units = [&](UnitKind kind, int count) {
      for (int i = 0; i < count; ++i) {
        UnitInstance u;
        u.kind = kind;
        u.slot0 = slot;
        u.n_slots = unit_is_binary(kind) ? 2 : 1;
        u.out_col = out++;
        if (unit_is_singular(kind)) {
          u.alpha_index = n_alpha++;
          // log/sqrt relax their input slot; div relaxes the denominator.
          t.singular_slot.push_back(kind == UnitKind::Div ? slot + 1 : slot);
          t.singular_alpha.push_back(u.alpha_index);
        }
        slot += u.n_slots;
        t.units.push_back(u);
      }
    };
    for (const auto& [k, m] : spec_.unary) add_units(k, m);
    for (const auto& [k, m] : spec_.binary) add_units(k, m);
    t.n_slots = slot;
    t.n_outputs = out;

    t.slot_kind.assign(static_cast<std::size_t>(t.n_slots), UnitKind::AddSub);
    for (const auto& u : t.units) {
      for (int s = 0; s < u.n_slots; ++s)
        t.slot_kind[static_cast<std::size_t>(u.slot0 + s)] = u.kind;
    }

    // Prohibited (consumer, producer) pairs zero the connection from every
    // copy of the producer's output, in this and all later layers.
    t.mask = Eigen::MatrixXd::Ones(t.n_slots, t.width);
    for (int s = 0; s < t.n_slots; ++s) {
      const UnitKind consumer = t.slot_kind[static_cast<std::size_t>(s)];
      for (int c = 0; c < t.width; ++c) {
        const ColTag& tag = col_tags_[static_cast<std::size_t>(c)];
        if (tag.is_input) continue;
        for (const auto& [pc, pp] : spec_.prohibitions) {
          if (pc == consumer && pp == tag.kind) {
            t.mask(s, c) = 0.0;
            break;
          }
        }
      }
    }

    for (const auto& u : t.units) {
      col_tags_.push_back(ColTag{false, l, static_cast<int>(&u - t.units.data()),
                                 u.kind});
    }
    width += t.n_outputs;
    topo_.push_back(std::move(t));
  }
  total_width_ = width;

  layout_.hidden.clear();
  long off = 0;
  for (const auto& t : topo_) {
    ParamBlock b;
    b.w = off;
    off += static_cast<long>(t.n_slots) * t.width;
    b.b = off;
    off += t.n_slots;
    b.la = off;
    off += static_cast<long>(t.n_slots) * t.width;
    layout_.hidden.push_back(b);
  }
  layout_.out.w = off;
  off += static_cast<long>(spec_.output_dim) * total_width_;
  layout_.out.b = off;
  off += spec_.output_dim;
  layout_.out.la = off;
  off += static_cast<long>(spec_.output_dim) * total_width_;
  layout_.alpha = off;
  layout_.n_alpha = n_alpha;
  off += n_alpha;
  layout_.total = off;
  params_.assign(static_cast<std::size_t>(off), 0.0);
}

Eigen::Map<Eigen::MatrixXd> Network::map_w(int l) {
  if (l == n_hidden())
    return {params_.data() + layout_.out.w, spec_.output_dim, total_width_};
  const auto& t = topo_[static_cast<std::size_t>(l)];
  return {params_.data() + layout_.hidden[static_cast<std::size_t>(l)].w,
          t.n_slots, t.width};
}
Eigen::Map<const Eigen::MatrixXd> Network::map_w(int l) const {
  if (l == n_hidden())
    return {params_.data() + layout_.out.w, spec_.output_dim, total_width_};
  const auto& t = topo_[static_cast<std::size_t>(l)];
  return {params_.data() + layout_.hidden[static_cast<std::size_t>(l)].w,
          t.n_slots, t.width};
}
Eigen::Map<Eigen::MatrixXd> Network::map_la(int l) {
  if (l == n_hidden())
    return {params_.data() + layout_.out.la, spec_.output_dim, total_width_};
  const auto& t = topo_[static_cast<std::size_t>(l)];
  return {params_.data() + layout_.hidden[static_cast<std::size_t>(l)].la,
          t.n_slots, t.width};
}
Eigen::Map<const Eigen::MatrixXd> Network::map_la(int l) const {
  if (l == n_hidden())
    return {params_.data() + layout_.out.la, spec_.output_dim, total_width_};
  const auto& t = topo_[static_cast<std::size_t>(l)];
  return {params_.data() + layout_.hidden[static_cast<std::size_t>(l)].la,
          t.n_slots, t.width};
}
Eigen::Map<Eigen::VectorXd> Network::map_b(int l) {
  if (l == n_hidden())
    return {params_.data() + layout_.out.b, spec_.output_dim};
  const auto& t = topo_[static_cast<std::size_t>(l)];
  return {params_.data() + layout_.hidden[static_cast<std::size_t>(l)].b,
          t.n_slots};
}
Eigen::Map<const Eigen::VectorXd> Network::map_b(int l) const {
  if (l == n_hidden())
    return {params_.data() + layout_.out.b, spec_.output_dim};
  const auto& t = topo_[static_cast<std::size_t>(l)];
  return {params_.data() + layout_.hidden[static_cast<std::size_t>(l)].b,
          t.n_slots};
}

double& Network::w(int l, int slot, int col) { return map_w(l)(slot, col); }
double Network::w(int l, int slot, int col) const { return map_w(l)(slot, col); }
double& Network::b(int l, int slot) { return map_b(l)(slot); }
double& Network::log_alpha(int l, int slot, int col) { return map_la(l)(slot, col); }
double& Network::out_w(int d, int col) { return map_w(n_hidden())(d, col); }
double& Network::out_b(int d) { return map_b(n_hidden())(d); }
double& Network::out_log_alpha(int d, int col) { return map_la(n_hidden())(d, col); }
double& Network::alpha_hat(int index) {
  return params_[static_cast<std::size_t>(layout_.alpha + index)];
}
double Network::mask(int l, int slot, int col) const {
  return topo_[static_cast<std::size_t>(l)].mask(slot, col);
}
double Network::relax_alpha(int index) const {
  return softplus(params_[static_cast<std::size_t>(layout_.alpha + index)]);
}

void Network::set_params(std::span<const double> p) {
  if (p.size() != params_.size())
    throw ConfigError("parameter vector size mismatch");
  std::copy(p.begin(), p.end(), params_.begin());
}

void Network::set_all_gates(double log_alpha_value) {
  for (int l = 0; l <= n_hidden(); ++l) map_la(l).setConstant(log_alpha_value);
}

void Network::clamp_log_alpha(double limit) {
  for (int l = 0; l <= n_hidden(); ++l) {
    auto la = map_la(l);
    la = la.cwiseMax(-limit).cwiseMin(limit);
  }
}

ParamCounts Network::param_counts() const {
  ParamCounts c;
  for (int l = 0; l < n_hidden(); ++l) {
    const auto& t = topo_[static_cast<std::size_t>(l)];
    c.weights += static_cast<long>(t.mask.sum());
    c.biases += t.n_slots;
  }
  c.weights += static_cast<long>(spec_.output_dim) * total_width_;
  c.biases += spec_.output_dim;
  c.gates = c.weights;
  c.relax = layout_.n_alpha;
  return c;
}

Network Network::build(const ArchitectureSpec& spec, std::uint64_t seed) {
  Network net;
  net.spec_ = spec;
  net.seed_ = seed;
  net.build_topology();

  Rng rng(derive_seed(seed, 0x6e657477));
  for (int l = 0; l <= net.n_hidden(); ++l) {
    auto W = net.map_w(l);
    const double limit = spec.init_scale *
        std::sqrt(6.0 / static_cast<double>(W.rows() + W.cols()));
    for (int c = 0; c < W.cols(); ++c) {
      for (int r = 0; r < W.rows(); ++r) W(r, c) = rng.uniform(-limit, limit);
    }
    if (l < net.n_hidden()) {
      auto& t = net.topo_[static_cast<std::size_t>(l)];
      W.array() *= t.mask.array();
      // Nonzero biases keep units like x^2 off their zero-gradient point;
      // singular-unit inputs start inside their domain.
      auto B = net.map_b(l);
      for (int s = 0; s < t.n_slots; ++s) B(s) = rng.uniform(-1.25, 1.25);
      for (int s : t.singular_slot) B(s) = rng.uniform(0.1, 1.0);
    } else {
      net.map_b(l).setZero();
    }
    auto LA = net.map_la(l);
    const double base = init_log_alpha(spec.init_dropout);
    for (int c = 0; c < LA.cols(); ++c) {
      for (int r = 0; r < LA.rows(); ++r) {
        LA(r, c) = base + (spec.gate_noise_std > 0
                               ? rng.normal(0.0, spec.gate_noise_std)
                               : 0.0);
      }
    }
  }
  for (long i = 0; i < net.layout_.n_alpha; ++i) net.alpha_hat(static_cast<int>(i)) = 0.0;
  return net;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void throw_non_finite(int layer, int index, const char* what) {
  std::ostringstream os;
  os << "non-finite " << what << " at layer " << layer << ", unit slot " << index;
  throw NumericError(os.str());
}

}  // namespace

void Network::forward(const Eigen::MatrixXd& X, ForwardMode mode, Rng* rng,
                      ForwardCache& cache) const {
  if (X.cols() != spec_.input_dim)
    throw ConfigError("input has " + std::to_string(X.cols()) +
                      " columns, expected " + std::to_string(spec_.input_dim));
  if (mode == ForwardMode::Stochastic && rng == nullptr)
    throw ConfigError("stochastic forward requires an RNG");

  const long B = X.rows();
  const int L = n_hidden();
  cache.stochastic = mode == ForwardMode::Stochastic;
  cache.batch = B;
  cache.ytilde.resize(B, out_width());
  cache.ytilde.leftCols(spec_.input_dim) = X;
  cache.z.resize(static_cast<std::size_t>(L));
  cache.gate_z.resize(static_cast<std::size_t>(L) + 1);
  cache.gate_dz.resize(static_cast<std::size_t>(L) + 1);
  cache.w_eff.resize(static_cast<std::size_t>(L) + 1);

  for (int l = 0; l <= L; ++l) {
    const auto W = map_w(l);
    const auto LA = map_la(l);
    auto& gz = cache.gate_z[static_cast<std::size_t>(l)];
    auto& gdz = cache.gate_dz[static_cast<std::size_t>(l)];
    gz.resize(W.rows(), W.cols());
    gdz.resize(W.rows(), W.cols());
    const Eigen::MatrixXd* msk = l < L ? &topo_[static_cast<std::size_t>(l)].mask : nullptr;
    for (int c = 0; c < W.cols(); ++c) {
      for (int r = 0; r < W.rows(); ++r) {
        if (msk && (*msk)(r, c) == 0.0) {
          gz(r, c) = 0.0;
          gdz(r, c) = 0.0;
          continue;
        }
        if (mode == ForwardMode::Stochastic) {
          const GateSample gs = sample_gate(LA(r, c), rng->u01(), hyper_);
          gz(r, c) = gs.z;
          gdz(r, c) = gs.dz_dlog_alpha;
        } else {
          gz(r, c) = deterministic_gate(LA(r, c), hyper_);
          gdz(r, c) = 0.0;
        }
      }
    }
    auto& weff = cache.w_eff[static_cast<std::size_t>(l)];
    weff = W.cwiseProduct(gz);
    if (msk) weff = weff.cwiseProduct(*msk);

    if (l < L) {
      const auto& t = topo_[static_cast<std::size_t>(l)];
      auto& Z = cache.z[static_cast<std::size_t>(l)];
      Z.resize(B, t.n_slots);
      Z.noalias() = cache.ytilde.leftCols(t.width) * weff.transpose();
      Z.rowwise() += map_b(l).transpose();
      if (!Z.allFinite()) {
        for (int s = 0; s < t.n_slots; ++s)
          if (!Z.col(s).allFinite()) throw_non_finite(l, s, "pre-activation");
      }
      auto out_block = cache.ytilde.middleCols(t.width, t.n_outputs);
      for (const auto& u : t.units) {
        const double alpha = u.alpha_index >= 0 ? relax_alpha(u.alpha_index) : 0.0;
        double* y = out_block.col(u.out_col).data();
        // column pointers: ytilde is column-major, so each column is dense
        const double* z0 = Z.col(u.slot0).data();
        switch (u.kind) {
          case UnitKind::Cos:
            for (long i = 0; i < B; ++i) y[i] = std::cos(z0[i]);
            break;
          case UnitKind::Exp:
            for (long i = 0; i < B; ++i) y[i] = std::exp(z0[i]);
            break;
          case UnitKind::Square:
            for (long i = 0; i < B; ++i) y[i] = z0[i] * z0[i];
            break;
          case UnitKind::Log:
            for (long i = 0; i < B; ++i)
              y[i] = z0[i] > 0 ? std::log(z0[i] + alpha) : 0.0;
            break;
          case UnitKind::Sqrt:
            for (long i = 0; i < B; ++i)
              y[i] = z0[i] > 0 ? std::sqrt(z0[i] + alpha) : 0.0;
            break;
          case UnitKind::Mul: {
            const double* z1 = Z.col(u.slot0 + 1).data();
            for (long i = 0; i < B; ++i) y[i] = z0[i] * z1[i];
            break;
          }
          case UnitKind::Div: {
            const double* z1 = Z.col(u.slot0 + 1).data();
            for (long i = 0; i < B; ++i)
              y[i] = z1[i] > 0 ? z0[i] / (z1[i] + alpha) : 0.0;
            break;
          }
          default:
            throw ConfigError("invalid unit kind in topology");
        }
      }
      if (!out_block.allFinite()) {
        for (const auto& u : t.units)
          if (!out_block.col(u.out_col).allFinite())
            throw_non_finite(l, u.slot0, "unit output");
      }
    } else {
      cache.y_pred.resize(B, spec_.output_dim);
      cache.y_pred.noalias() = cache.ytilde * weff.transpose();
      cache.y_pred.rowwise() += map_b(l).transpose();
      if (!cache.y_pred.allFinite()) throw_non_finite(L, 0, "output");
    }
  }
}

Eigen::MatrixXd Network::predict(const Eigen::MatrixXd& X) const {
  ForwardCache cache;
  forward(X, ForwardMode::Deterministic, nullptr, cache);
  return cache.y_pred;
}

double Network::domain_penalty(const ForwardCache& cache) const {
  if (cache.batch == 0) return 0.0;
  double total = 0.0;
  for (int l = 0; l < n_hidden(); ++l) {
    const auto& t = topo_[static_cast<std::size_t>(l)];
    const auto& Z = cache.z[static_cast<std::size_t>(l)];
    for (int s : t.singular_slot) {
      for (long i = 0; i < cache.batch; ++i) {
        const double z = Z(i, s);
        if (z <= 0.0) total += -z;
      }
    }
  }
  return total / static_cast<double>(cache.batch);
}

std::optional<double> Network::min_singular_input(
    const ForwardCache& cache, std::optional<UnitKind> only) const {
  std::optional<double> best;
  for (int l = 0; l < n_hidden(); ++l) {
    const auto& t = topo_[static_cast<std::size_t>(l)];
    const auto& Z = cache.z[static_cast<std::size_t>(l)];
    for (std::size_t k = 0; k < t.singular_slot.size(); ++k) {
      const int s = t.singular_slot[k];
      if (only && t.slot_kind[static_cast<std::size_t>(s)] != *only) continue;
      const double m = Z.col(s).minCoeff();
      if (!best || m < *best) best = m;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void Network::backward(const ForwardCache& cache, const Eigen::MatrixXd& dLdY,
                       double delta, double lambda,
                       const ComplexityFactors& factors,
                       std::vector<double>& grad) const {
  const long B = cache.batch;
  const int L = n_hidden();
  if (dLdY.rows() != B || dLdY.cols() != spec_.output_dim)
    throw ConfigError("dLdY shape mismatch");

  grad.assign(params_.size(), 0.0);
  Eigen::VectorXd g_alpha = Eigen::VectorXd::Zero(layout_.n_alpha);

  auto g_w = [&](int l) {
    const auto W = map_w(l);
    const long off = l == L ? layout_.out.w
                            : layout_.hidden[static_cast<std::size_t>(l)].w;
    return Eigen::Map<Eigen::MatrixXd>(grad.data() + off, W.rows(), W.cols());
  };
  auto g_b = [&](int l) {
    const auto Bm = map_b(l);
    const long off = l == L ? layout_.out.b
                            : layout_.hidden[static_cast<std::size_t>(l)].b;
    return Eigen::Map<Eigen::VectorXd>(grad.data() + off, Bm.size());
  };
  auto g_la = [&](int l) {
    const auto W = map_w(l);
    const long off = l == L ? layout_.out.la
                            : layout_.hidden[static_cast<std::size_t>(l)].la;
    return Eigen::Map<Eigen::MatrixXd>(grad.data() + off, W.rows(), W.cols());
  };

  // Output layer.
  Eigen::MatrixXd dytilde(B, out_width());
  {
    const auto& weff = cache.w_eff[static_cast<std::size_t>(L)];
    Eigen::MatrixXd g_weff = dLdY.transpose() * cache.ytilde;
    g_w(L) = g_weff.cwiseProduct(cache.gate_z[static_cast<std::size_t>(L)]);
    g_la(L) = g_weff.cwiseProduct(map_w(L)).cwiseProduct(
        cache.gate_dz[static_cast<std::size_t>(L)]);
    g_b(L) = dLdY.colwise().sum();
    dytilde.noalias() = dLdY * weff;
  }

  for (int l = L - 1; l >= 0; --l) {
    const auto& t = topo_[static_cast<std::size_t>(l)];
    const auto& Z = cache.z[static_cast<std::size_t>(l)];
    Eigen::MatrixXd dZ = Eigen::MatrixXd::Zero(B, t.n_slots);

    for (const auto& u : t.units) {
      const double alpha = u.alpha_index >= 0 ? relax_alpha(u.alpha_index) : 0.0;
      const double* dy = dytilde.col(t.width + u.out_col).data();
      const double* z0 = Z.col(u.slot0).data();
      double* d0 = dZ.col(u.slot0).data();
      switch (u.kind) {
        case UnitKind::Cos:
          for (long i = 0; i < B; ++i) d0[i] = -std::sin(z0[i]) * dy[i];
          break;
        case UnitKind::Exp:
          for (long i = 0; i < B; ++i) d0[i] = std::exp(z0[i]) * dy[i];
          break;
        case UnitKind::Square:
          for (long i = 0; i < B; ++i) d0[i] = 2.0 * z0[i] * dy[i];
          break;
        case UnitKind::Log: {
          double ga = 0.0;
          for (long i = 0; i < B; ++i) {
            d0[i] = z0[i] > 0 ? dy[i] / (z0[i] + alpha) : 0.0;
            ga += d0[i];
          }
          g_alpha(u.alpha_index) += ga;
          break;
        }
        case UnitKind::Sqrt: {
          double ga = 0.0;
          for (long i = 0; i < B; ++i) {
            d0[i] = z0[i] > 0 ? 0.5 * dy[i] / std::sqrt(z0[i] + alpha) : 0.0;
            ga += d0[i];
          }
          g_alpha(u.alpha_index) += ga;
          break;
        }
        case UnitKind::Mul: {
          const double* z1 = Z.col(u.slot0 + 1).data();
          double* d1 = dZ.col(u.slot0 + 1).data();
          for (long i = 0; i < B; ++i) {
            d0[i] = z1[i] * dy[i];
            d1[i] = z0[i] * dy[i];
          }
          break;
        }
        case UnitKind::Div: {
          const double* z1 = Z.col(u.slot0 + 1).data();
          double* d1 = dZ.col(u.slot0 + 1).data();
          double ga = 0.0;
          for (long i = 0; i < B; ++i) {
            if (z1[i] > 0) {
              const double r = 1.0 / (z1[i] + alpha);
              d0[i] = r * dy[i];
              d1[i] = -z0[i] * r * r * dy[i];
              ga += d1[i];
            } else {
              d0[i] = 0.0;
              d1[i] = 0.0;
            }
          }
          g_alpha(u.alpha_index) += ga;
          break;
        }
        default:
          throw ConfigError("invalid unit kind in topology");
      }
    }

    // Domain-penalty subgradient: d/dz |0 - z| = -1 on the violating branch.
    if (delta != 0.0) {
      const double scale = delta / static_cast<double>(B);
      for (int s : t.singular_slot) {
        double* d = dZ.col(s).data();
        const double* z = Z.col(s).data();
        for (long i = 0; i < B; ++i) {
          if (z[i] <= 0.0) d[i] -= scale;
        }
      }
    }

    Eigen::MatrixXd g_weff = dZ.transpose() * cache.ytilde.leftCols(t.width);
    g_w(l) = g_weff.cwiseProduct(t.mask)
                 .cwiseProduct(cache.gate_z[static_cast<std::size_t>(l)]);
    g_la(l) = g_weff.cwiseProduct(t.mask)
                  .cwiseProduct(map_w(l))
                  .cwiseProduct(cache.gate_dz[static_cast<std::size_t>(l)]);
    g_b(l) = dZ.colwise().sum();
    dytilde.leftCols(t.width).noalias() += dZ * cache.w_eff[static_cast<std::size_t>(l)];
  }

  // Expected-L0 complexity term.
  if (lambda != 0.0) {
    for (int l = 0; l <= L; ++l) {
      const auto LA = map_la(l);
      auto gla = g_la(l);
      const Eigen::MatrixXd* msk =
          l < L ? &topo_[static_cast<std::size_t>(l)].mask : nullptr;
      for (int c = 0; c < LA.cols(); ++c) {
        for (int r = 0; r < LA.rows(); ++r) {
          if (msk && (*msk)(r, c) == 0.0) continue;
          const UnitKind kind =
              l < L ? topo_[static_cast<std::size_t>(l)]
                          .slot_kind[static_cast<std::size_t>(r)]
                    : UnitKind::AddSub;
          gla(r, c) += lambda * factors.at(kind) * expected_l0_grad(LA(r, c), hyper_);
        }
      }
    }
  }

  // Chain through alpha = softplus(alpha_hat).
  for (long i = 0; i < layout_.n_alpha; ++i) {
    const double ah = params_[static_cast<std::size_t>(layout_.alpha + i)];
    grad[static_cast<std::size_t>(layout_.alpha + i)] =
        g_alpha(i) * stable_sigmoid(ah);
  }
}

// ---------------------------------------------------------------------------
// Gate bookkeeping
// ---------------------------------------------------------------------------

std::map<UnitKind, double> Network::weighted_gate_counts(bool deterministic) const {
  std::map<UnitKind, double> counts;
  const int L = n_hidden();
  for (int l = 0; l <= L; ++l) {
    const auto LA = map_la(l);
    const Eigen::MatrixXd* msk =
        l < L ? &topo_[static_cast<std::size_t>(l)].mask : nullptr;
    for (int c = 0; c < LA.cols(); ++c) {
      for (int r = 0; r < LA.rows(); ++r) {
        if (msk && (*msk)(r, c) == 0.0) continue;
        const UnitKind kind =
            l < L ? topo_[static_cast<std::size_t>(l)]
                        .slot_kind[static_cast<std::size_t>(r)]
                  : UnitKind::AddSub;
        double& slot = counts[kind];
        if (deterministic) {
          slot += deterministic_gate(LA(r, c), hyper_) > 0.0 ? 1.0 : 0.0;
        } else {
          slot += expected_l0(LA(r, c), hyper_);
        }
      }
    }
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

Extraction Network::extract_expression() const {
  const int L = n_hidden();
  const int D = spec_.input_dim;
  const int W = out_width();

  std::vector<Eigen::MatrixXd> weff(static_cast<std::size_t>(L) + 1);
  for (int l = 0; l <= L; ++l) {
    const auto Wm = map_w(l);
    const auto LA = map_la(l);
    Eigen::MatrixXd gz(Wm.rows(), Wm.cols());
    for (int c = 0; c < Wm.cols(); ++c)
      for (int r = 0; r < Wm.rows(); ++r)
        gz(r, c) = deterministic_gate(LA(r, c), hyper_);
    weff[static_cast<std::size_t>(l)] = Wm.cwiseProduct(gz);
    if (l < L)
      weff[static_cast<std::size_t>(l)] =
          weff[static_cast<std::size_t>(l)].cwiseProduct(
              topo_[static_cast<std::size_t>(l)].mask);
  }

  // Liveness: a unit matters iff its output column reaches some output
  // through nonzero effective weights.
  std::vector<char> live(static_cast<std::size_t>(W), 0);
  std::deque<int> queue;
  auto mark = [&](int col) {
    if (!live[static_cast<std::size_t>(col)]) {
      live[static_cast<std::size_t>(col)] = 1;
      if (col >= D) queue.push_back(col);
    }
  };
  const auto& wout = weff[static_cast<std::size_t>(L)];
  for (int d = 0; d < spec_.output_dim; ++d)
    for (int c = 0; c < W; ++c)
      if (wout(d, c) != 0.0) mark(c);
  // Columns produced by earlier layers have smaller indices, so a simple
  // worklist terminates.
  std::vector<int> col_offset(static_cast<std::size_t>(L) + 1);
  {
    int off = D;
    for (int l = 0; l < L; ++l) {
      col_offset[static_cast<std::size_t>(l)] = off;
      off += topo_[static_cast<std::size_t>(l)].n_outputs;
    }
    col_offset[static_cast<std::size_t>(L)] = off;
  }
  while (!queue.empty()) {
    const int col = queue.front();
    queue.pop_front();
    const ColTag& tag = col_tags_[static_cast<std::size_t>(col)];
    const auto& t = topo_[static_cast<std::size_t>(tag.layer)];
    const auto& wl = weff[static_cast<std::size_t>(tag.layer)];
    const UnitInstance& u = t.units[static_cast<std::size_t>(tag.unit)];
    for (int s = 0; s < u.n_slots; ++s)
      for (int c = 0; c < t.width; ++c)
        if (wl(u.slot0 + s, c) != 0.0) mark(c);
  }

  // Counts.
  Extraction ex;
  for (int l = 0; l < L; ++l) {
    const auto& t = topo_[static_cast<std::size_t>(l)];
    for (UnitKind k : t.slot_kind) ex.weight_counts.emplace(k, 0.0);
  }
  ex.weight_counts[UnitKind::AddSub] = 0.0;
  long n_weights = 0;
  long n_live_units = 0;
  for (int d = 0; d < spec_.output_dim; ++d) {
    for (int c = 0; c < W; ++c) {
      if (wout(d, c) != 0.0) {
        ++n_weights;
        ex.weight_counts[UnitKind::AddSub] += 1.0;
      }
    }
  }
  for (int l = 0; l < L; ++l) {
    const auto& t = topo_[static_cast<std::size_t>(l)];
    const auto& wl = weff[static_cast<std::size_t>(l)];
    for (std::size_t ui = 0; ui < t.units.size(); ++ui) {
      const int gcol = col_offset[static_cast<std::size_t>(l)] +
                       t.units[ui].out_col;
      if (!live[static_cast<std::size_t>(gcol)]) continue;
      ++n_live_units;
      const UnitInstance& u = t.units[ui];
      for (int s = 0; s < u.n_slots; ++s) {
        for (int c = 0; c < t.width; ++c) {
          if (wl(u.slot0 + s, c) != 0.0) {
            ++n_weights;
            ex.weight_counts[u.kind] += 1.0;
          }
        }
      }
    }
  }
  ex.active_params = n_weights + n_live_units + spec_.output_dim;

  // Expressions.
  std::vector<std::optional<Expression>> memo(static_cast<std::size_t>(W));
  auto col_expr = [&](int col, auto&& self) -> Expression {
    auto& slot = memo[static_cast<std::size_t>(col)];
    if (slot) return *slot;
    Expression e = Expression::constant(0.0);
    if (col < D) {
      e = Expression::variable(col);
    } else {
      const ColTag& tag = col_tags_[static_cast<std::size_t>(col)];
      const auto& t = topo_[static_cast<std::size_t>(tag.layer)];
      const auto& wl = weff[static_cast<std::size_t>(tag.layer)];
      const UnitInstance& u = t.units[static_cast<std::size_t>(tag.unit)];
      const double alpha = u.alpha_index >= 0 ? relax_alpha(u.alpha_index) : 0.0;

      auto affine = [&](int s, double extra_bias,
                        bool* is_const) -> Expression {
        const double bias = map_b(tag.layer)(u.slot0 + s) + extra_bias;
        Expression acc;
        bool any = false;
        for (int c = 0; c < t.width; ++c) {
          const double wv = wl(u.slot0 + s, c);
          if (wv == 0.0) continue;
          Expression term =
              wv == 1.0 ? self(c, self)
                        : Expression::mul(Expression::constant(wv), self(c, self));
          acc = any ? Expression::add(acc, term) : term;
          any = true;
        }
        if (is_const) *is_const = !any;
        if (!any) return Expression::constant(bias);
        if (bias != 0.0) acc = Expression::add(acc, Expression::constant(bias));
        return acc;
      };

      switch (u.kind) {
        case UnitKind::Cos:
        case UnitKind::Exp:
        case UnitKind::Square: {
          const Expression::Kind ek = u.kind == UnitKind::Cos
                                          ? Expression::Kind::Cos
                                          : (u.kind == UnitKind::Exp
                                                 ? Expression::Kind::Exp
                                                 : Expression::Kind::Square);
          e = Expression::make(ek, {affine(0, 0.0, nullptr)});
          break;
        }
        case UnitKind::Log:
        case UnitKind::Sqrt: {
          bool is_const = false;
          Expression arg = affine(0, alpha, &is_const);
          if (is_const) {
            // Relaxed branch decision uses the pre-shift input z = bias.
            const double z = map_b(tag.layer)(u.slot0);
            e = Expression::constant(relaxed_unary(u.kind, z, alpha));
          } else {
            e = u.kind == UnitKind::Log ? Expression::log(arg)
                                        : Expression::sqrt(arg);
          }
          break;
        }
        case UnitKind::Mul: {
          e = Expression::mul(affine(0, 0.0, nullptr), affine(1, 0.0, nullptr));
          break;
        }
        case UnitKind::Div: {
          bool den_const = false;
          Expression den = affine(1, alpha, &den_const);
          Expression num = affine(0, 0.0, nullptr);
          if (den_const) {
            const double z = map_b(tag.layer)(u.slot0 + 1);
            e = Expression::mul(
                num, Expression::constant(relaxed_unary(UnitKind::Div, z, alpha)));
          } else {
            e = Expression::div(num, den);
          }
          break;
        }
        default:
          throw ConfigError("invalid unit kind in topology");
      }
    }
    slot = e;
    return e;
  };

  for (int d = 0; d < spec_.output_dim; ++d) {
    const double bias = map_b(L)(d);
    Expression acc;
    bool any = false;
    for (int c = 0; c < W; ++c) {
      const double wv = wout(d, c);
      if (wv == 0.0) continue;
      Expression term = wv == 1.0
                            ? col_expr(c, col_expr)
                            : Expression::mul(Expression::constant(wv),
                                              col_expr(c, col_expr));
      acc = any ? Expression::add(acc, term) : term;
      any = true;
    }
    if (!any) acc = Expression::constant(bias);
    else if (bias != 0.0) acc = Expression::add(acc, Expression::constant(bias));
    ex.raw_outputs.push_back(acc);
    ex.outputs.push_back(simplify(acc));
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

nlohmann::json Network::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  j["spec"] = spec_.to_json();
  j["hyper"] = {{"zeta", hyper_.zeta}, {"gamma", hyper_.gamma}, {"beta", hyper_.beta}};
  j["seed"] = seed_;
  j["params"] = params_;
  return j;
}

Network Network::from_json(const nlohmann::json& j) {
  if (j.at("version").get<int>() != 1)
    throw DataError("unsupported network file version");
  Network net;
  net.spec_ = ArchitectureSpec::from_json(j.at("spec"));
  const auto& h = j.at("hyper");
  net.hyper_.zeta = h.at("zeta").get<double>();
  net.hyper_.gamma = h.at("gamma").get<double>();
  net.hyper_.beta = h.at("beta").get<double>();
  net.seed_ = j.at("seed").get<std::uint64_t>();
  net.build_topology();
  const auto p = j.at("params").get<std::vector<double>>();
  net.set_params(p);
  return net;
}

}  // namespace ieql
