#include "ieql/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

namespace ieql {

void TrainConfig::validate() const {
  if (t1 < 0 || t2 < 0) throw ConfigError("epoch counts must be >= 0");
  if (!(lr > 0)) throw ConfigError("learning rate must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw ConfigError("adam betas must lie in [0,1)");
  if (!(eps > 0)) throw ConfigError("adam eps must be > 0");
  if (lambda < 0) throw ConfigError("lambda must be >= 0");
  if (delta < 0) throw ConfigError("delta must be >= 0");
  if (!(bound > 0)) throw ConfigError("output bound must be > 0");
  if (penalty_points < 1) throw ConfigError("penalty_points must be >= 1");
  if (batch < 1) throw ConfigError("batch size must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"t1", t1},       {"t2", t2},           {"lr", lr},
          {"beta1", beta1}, {"beta2", beta2},     {"eps", eps},
          {"lambda", lambda}, {"delta", delta},   {"bound", bound},
          {"penalty_points", penalty_points},     {"batch", batch},
          {"seed", seed},   {"max_skip_fraction", max_skip_fraction}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  auto opt = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
  };
  opt("t1", c.t1);
  opt("t2", c.t2);
  opt("lr", c.lr);
  opt("beta1", c.beta1);
  opt("beta2", c.beta2);
  opt("eps", c.eps);
  opt("lambda", c.lambda);
  opt("delta", c.delta);
  opt("bound", c.bound);
  opt("penalty_points", c.penalty_points);
  opt("batch", c.batch);
  opt("seed", c.seed);
  opt("max_skip_fraction", c.max_skip_fraction);
  c.validate();
  return c;
}

void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state, const TrainConfig& config) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ConfigError("adam_step: shape mismatch");
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
  }
}

LossComponents loss_from_cache(const Network& net, const ForwardCache& cache,
                               const Eigen::MatrixXd& Y, double lambda,
                               double delta, const ComplexityFactors& factors) {
  if (cache.y_pred.rows() != Y.rows() || cache.y_pred.cols() != Y.cols())
    throw ConfigError("loss: target shape mismatch");
  if (Y.rows() == 0) throw ConfigError("loss: empty batch");
  LossComponents out;
  out.data = (cache.y_pred - Y).squaredNorm() / static_cast<double>(Y.rows());
  out.domain = net.domain_penalty(cache);
  double lc = 0.0;
  for (const auto& [kind, sum] : net.weighted_gate_counts(false))
    lc += factors.at(kind) * sum;
  out.complexity = lc;
  out.total = out.data + delta * out.domain + lambda * out.complexity;
  return out;
}

LossComponents total_loss(const Network& net, const Eigen::MatrixXd& X,
                          const Eigen::MatrixXd& Y, double lambda, double delta,
                          const ComplexityFactors& factors, Rng* rng) {
  ForwardCache cache;
  net.forward(X, rng ? ForwardMode::Stochastic : ForwardMode::Deterministic,
              rng, cache);
  return loss_from_cache(net, cache, Y, lambda, delta, factors);
}

double rmse(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ConfigError("rmse: shape mismatch");
  if (pred.size() == 0) return 0.0;
  return std::sqrt((pred - target).squaredNorm() /
                   static_cast<double>(pred.size()));
}

void write_trace_csv(const TrainTrace& trace, const std::string& path,
                     const std::string& manifest_hash) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write trace csv: " + path);
  if (!manifest_hash.empty()) out << "# manifest_hash=" << manifest_hash << "\n";
  out << "epoch,L_D,L_C,L_su,L_bound,val_RMSE\n";
  for (std::size_t e = 0; e < trace.rows.size(); ++e) {
    const auto& r = trace.rows[e];
    out << e << ',' << format_double_exact(r.data) << ','
        << format_double_exact(r.complexity) << ','
        << format_double_exact(r.domain) << ','
        << format_double_exact(r.bound) << ','
        << format_double_exact(r.val_rmse) << "\n";
  }
}

PenaltyResult penalty_epoch(Network& net, const Eigen::MatrixXd& x_penalty,
                            double delta, double bound, AdamState& adam,
                            const TrainConfig& config,
                            const ComplexityFactors& factors, Rng& rng) {
  if (x_penalty.rows() == 0) throw ConfigError("penalty epoch without inputs");
  ForwardCache cache;
  net.forward(x_penalty, ForwardMode::Stochastic, &rng, cache);
  const long n = x_penalty.rows();

  PenaltyResult res;
  res.domain = net.domain_penalty(cache);
  Eigen::MatrixXd dLdY =
      Eigen::MatrixXd::Zero(n, cache.y_pred.cols());
  double bound_loss = 0.0;
  for (long i = 0; i < n; ++i) {
    for (int d = 0; d < cache.y_pred.cols(); ++d) {
      const double y = cache.y_pred(i, d);
      const double excess = std::abs(y) - bound;
      if (excess > 0) {
        bound_loss += excess;
        dLdY(i, d) = delta * (y > 0 ? 1.0 : -1.0) / static_cast<double>(n);
      }
    }
  }
  res.bound = bound_loss / static_cast<double>(n);

  std::vector<double> grad;
  net.backward(cache, dLdY, delta, 0.0, factors, grad);
  adam_step(net.params(), grad, adam, config);
  net.clamp_log_alpha();
  return res;
}

TrainResult train(Network net, const Dataset& data, const TrainConfig& config,
                  const ComplexityFactors& factors, bool keep_trace) {
  config.validate();
  const auto t_start = std::chrono::steady_clock::now();

  const Eigen::MatrixXd x_train = data.x_rows(Split::Train);
  const Eigen::MatrixXd y_train = data.y_rows(Split::Train);
  const Eigen::MatrixXd x_val = data.x_rows(Split::Validation);
  const Eigen::MatrixXd y_val = data.y_rows(Split::Validation);
  if (x_train.rows() == 0) throw ConfigError("training split is empty");

  Rng rng(derive_seed(config.seed, 0x747261696eULL));
  AdamState adam;
  adam.init(net.params().size());

  TrainTrace trace;
  const int total_epochs = config.t1 + config.t2;
  if (keep_trace) trace.rows.reserve(static_cast<std::size_t>(total_epochs));

  const long n = x_train.rows();
  std::vector<long> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0L);

  ForwardCache cache;
  std::vector<double> grad;
  Eigen::MatrixXd xb, yb, dLdY;

  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    const double lambda = epoch < config.t1 ? 0.0 : config.lambda;
    rng.shuffle(order.begin(), order.end());

    TraceRow row;
    long batches_this_epoch = 0;
    for (long start = 0; start < n; start += config.batch) {
      const long bs = std::min<long>(config.batch, n - start);
      xb.resize(bs, x_train.cols());
      yb.resize(bs, y_train.cols());
      for (long i = 0; i < bs; ++i) {
        xb.row(i) = x_train.row(order[static_cast<std::size_t>(start + i)]);
        yb.row(i) = y_train.row(order[static_cast<std::size_t>(start + i)]);
      }
      ++trace.total_batches;
      ++batches_this_epoch;
      try {
        net.forward(xb, ForwardMode::Stochastic, &rng, cache);
      } catch (const NumericError&) {
        ++trace.skipped_batches;
        continue;
      }
      const LossComponents loss =
          loss_from_cache(net, cache, yb, lambda, config.delta, factors);
      row.data += loss.data;
      row.complexity = loss.complexity;
      row.domain += loss.domain;

      dLdY = (cache.y_pred - yb) * (2.0 / static_cast<double>(bs));
      net.backward(cache, dLdY, config.delta, lambda, factors, grad);
      adam_step(net.params(), grad, adam, config);
      net.clamp_log_alpha();
    }
    row.data /= static_cast<double>(batches_this_epoch);
    row.domain /= static_cast<double>(batches_this_epoch);

    // Intrinsic penalty epoch on fresh unlabeled points from the test box.
    if (config.delta > 0) {
      const Eigen::MatrixXd xp =
          sample_box(data.box.test, config.penalty_points, rng);
      try {
        const PenaltyResult pr = penalty_epoch(net, xp, config.delta,
                                               config.bound, adam, config,
                                               factors, rng);
        row.bound = pr.bound;
      } catch (const NumericError&) {
        ++trace.skipped_batches;
        ++trace.total_batches;
      }
    }

    if (x_val.rows() > 0) {
      try {
        row.val_rmse = rmse(net.predict(x_val), y_val);
      } catch (const NumericError&) {
        row.val_rmse = std::numeric_limits<double>::quiet_NaN();
      }
    }
    if (keep_trace) trace.rows.push_back(row);

    if (trace.total_batches > 100 &&
        static_cast<double>(trace.skipped_batches) >
            config.max_skip_fraction * static_cast<double>(trace.total_batches)) {
      throw NumericError(
          "training diverged: " + std::to_string(trace.skipped_batches) + "/" +
          std::to_string(trace.total_batches) +
          " minibatches produced non-finite values (seed " +
          std::to_string(config.seed) + ", lambda " +
          format_double_exact(config.lambda) + ")");
    }
  }

  trace.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return {std::move(net), std::move(trace)};
}

std::vector<double> lambda_grid(double log10_min, double log10_max, int count) {
  if (count < 1) throw ConfigError("lambda grid must have at least one value");
  std::vector<double> grid;
  grid.reserve(static_cast<std::size_t>(count));
  if (count == 1) {
    grid.push_back(std::pow(10.0, log10_min));
    return grid;
  }
  for (int i = 0; i < count; ++i) {
    const double k = log10_min + (log10_max - log10_min) *
                                     static_cast<double>(i) /
                                     static_cast<double>(count - 1);
    grid.push_back(std::pow(10.0, k));
  }
  return grid;
}

SweepOutcome lambda_sweep(const ArchitectureSpec& arch, const Dataset& data,
                          std::span<const double> lambdas,
                          const TrainConfig& config,
                          const ComplexityFactors& factors, int parallelism,
                          int n_extrapolation, bool keep_traces) {
  if (lambdas.empty()) throw ConfigError("lambda grid is empty");
  if (parallelism < 1) parallelism = 1;

  const int n_runs = static_cast<int>(lambdas.size());
  std::vector<std::optional<Candidate>> slots(static_cast<std::size_t>(n_runs));
  std::vector<std::optional<SweepFailure>> fails(static_cast<std::size_t>(n_runs));
  std::vector<TrainTrace> traces(static_cast<std::size_t>(n_runs));

  const auto [x_ex, y_ex] = data.extrapolation_rows(n_extrapolation);

  auto run_one = [&](int i) {
    TrainConfig cfg = config;
    cfg.lambda = lambdas[static_cast<std::size_t>(i)];
    cfg.seed = derive_seed(config.seed, static_cast<std::uint64_t>(i) + 1);
    try {
      Network net = Network::build(arch, cfg.seed);
      TrainResult result = train(std::move(net), data, cfg, factors, keep_traces);
      if (keep_traces) traces[static_cast<std::size_t>(i)] = result.trace;

      Extraction ex = result.net.extract_expression();
      Candidate c;
      c.expr = ex.outputs.at(0);
      c.expr_str = format_expr(c.expr, 17, data.input_names);
      c.weight_counts = ex.weight_counts;
      c.active_params = ex.active_params;
      c.nu_int = rmse(result.net.predict(data.x_rows(Split::Validation)),
                      data.y_rows(Split::Validation));
      if (x_ex.rows() > 0) c.nu_ex = rmse(result.net.predict(x_ex), y_ex);
      c.lambda = cfg.lambda;
      c.seed = cfg.seed;
      c.index = i;
      slots[static_cast<std::size_t>(i)] = std::move(c);
    } catch (const std::exception& e) {
      fails[static_cast<std::size_t>(i)] =
          SweepFailure{i, lambdas[static_cast<std::size_t>(i)], e.what()};
    }
  };

  if (parallelism == 1) {
    for (int i = 0; i < n_runs; ++i) run_one(i);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> workers;
    const int n_workers = std::min(parallelism, n_runs);
    workers.reserve(static_cast<std::size_t>(n_workers));
    for (int w = 0; w < n_workers; ++w) {
      workers.emplace_back([&]() {
        for (;;) {
          const int i = next.fetch_add(1);
          if (i >= n_runs) return;
          run_one(i);
        }
      });
    }
    for (auto& t : workers) t.join();
  }

  SweepOutcome out;
  for (int i = 0; i < n_runs; ++i) {
    if (slots[static_cast<std::size_t>(i)])
      out.candidates.push_back(*slots[static_cast<std::size_t>(i)]);
    if (fails[static_cast<std::size_t>(i)])
      out.failures.push_back(*fails[static_cast<std::size_t>(i)]);
  }
  if (keep_traces) out.traces = std::move(traces);
  if (out.candidates.empty()) {
    std::string msg = "every sweep run failed";
    if (!out.failures.empty()) msg += "; first: " + out.failures.front().message;
    throw NumericError(msg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// MLP baseline
// ---------------------------------------------------------------------------

namespace {

struct MlpLayout {
  // Layer sizes: input -> width x hidden_layers -> output.
  std::vector<int> sizes;
  std::vector<long> w_off, b_off;
  long total = 0;

  MlpLayout(int input_dim, int output_dim, int hidden_layers, int width) {
    sizes.push_back(input_dim);
    for (int i = 0; i < hidden_layers; ++i) sizes.push_back(width);
    sizes.push_back(output_dim);
    long off = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      w_off.push_back(off);
      off += static_cast<long>(sizes[l]) * sizes[l + 1];
      b_off.push_back(off);
      off += sizes[l + 1];
    }
    total = off;
  }
};

}  // namespace

MlpModel::MlpModel(int input_dim, int output_dim, const MlpConfig& config)
    : input_dim_(input_dim),
      output_dim_(output_dim),
      hidden_layers_(config.hidden_layers),
      width_(config.width) {
  MlpLayout layout(input_dim_, output_dim_, hidden_layers_, width_);
  params_.assign(static_cast<std::size_t>(layout.total), 0.0);
  Rng rng(derive_seed(config.seed, 0x6d6c70));
  for (std::size_t l = 0; l + 1 < layout.sizes.size(); ++l) {
    const double limit =
        std::sqrt(6.0 / (layout.sizes[l] + layout.sizes[l + 1]));
    for (long k = 0; k < static_cast<long>(layout.sizes[l]) * layout.sizes[l + 1]; ++k)
      params_[static_cast<std::size_t>(layout.w_off[l] + k)] =
          rng.uniform(-limit, limit);
  }
}

long MlpModel::param_count() const { return static_cast<long>(params_.size()); }

Eigen::MatrixXd MlpModel::predict(const Eigen::MatrixXd& X) const {
  MlpLayout layout(input_dim_, output_dim_, hidden_layers_, width_);
  Eigen::MatrixXd a = X;
  for (std::size_t l = 0; l + 1 < layout.sizes.size(); ++l) {
    Eigen::Map<const Eigen::MatrixXd> W(params_.data() + layout.w_off[l],
                                        layout.sizes[l + 1], layout.sizes[l]);
    Eigen::Map<const Eigen::VectorXd> b(params_.data() + layout.b_off[l],
                                        layout.sizes[l + 1]);
    Eigen::MatrixXd z = a * W.transpose();
    z.rowwise() += b.transpose();
    if (l + 2 < layout.sizes.size()) {
      a = z.array().tanh().matrix();
    } else {
      a = std::move(z);
    }
  }
  return a;
}

void MlpModel::backward(const Eigen::MatrixXd& X, const Eigen::MatrixXd& dLdY,
                        std::vector<double>& grad) const {
  MlpLayout layout(input_dim_, output_dim_, hidden_layers_, width_);
  grad.assign(params_.size(), 0.0);
  std::vector<Eigen::MatrixXd> acts;  // activations per layer
  acts.push_back(X);
  for (std::size_t l = 0; l + 1 < layout.sizes.size(); ++l) {
    Eigen::Map<const Eigen::MatrixXd> W(params_.data() + layout.w_off[l],
                                        layout.sizes[l + 1], layout.sizes[l]);
    Eigen::Map<const Eigen::VectorXd> b(params_.data() + layout.b_off[l],
                                        layout.sizes[l + 1]);
    Eigen::MatrixXd z = acts.back() * W.transpose();
    z.rowwise() += b.transpose();
    if (l + 2 < layout.sizes.size()) {
      acts.push_back(z.array().tanh().matrix());
    } else {
      acts.push_back(std::move(z));
    }
  }
  Eigen::MatrixXd d = dLdY;
  for (long l = static_cast<long>(layout.sizes.size()) - 2; l >= 0; --l) {
    Eigen::Map<const Eigen::MatrixXd> W(
        params_.data() + layout.w_off[static_cast<std::size_t>(l)],
        layout.sizes[static_cast<std::size_t>(l) + 1],
        layout.sizes[static_cast<std::size_t>(l)]);
    Eigen::Map<Eigen::MatrixXd> gW(
        grad.data() + layout.w_off[static_cast<std::size_t>(l)],
        layout.sizes[static_cast<std::size_t>(l) + 1],
        layout.sizes[static_cast<std::size_t>(l)]);
    Eigen::Map<Eigen::VectorXd> gB(
        grad.data() + layout.b_off[static_cast<std::size_t>(l)],
        layout.sizes[static_cast<std::size_t>(l) + 1]);
    gW.noalias() = d.transpose() * acts[static_cast<std::size_t>(l)];
    gB = d.colwise().sum();
    if (l > 0) {
      Eigen::MatrixXd da = d * W;
      const auto& a = acts[static_cast<std::size_t>(l)];
      d = (da.array() * (1.0 - a.array().square())).matrix();
    }
  }
}

MlpResult train_mlp_baseline(const Dataset& data, const MlpConfig& config) {
  const Eigen::MatrixXd x_train = data.x_rows(Split::Train);
  const Eigen::MatrixXd y_train = data.y_rows(Split::Train);
  const Eigen::MatrixXd x_val = data.x_rows(Split::Validation);
  const Eigen::MatrixXd y_val = data.y_rows(Split::Validation);
  const Eigen::MatrixXd x_test = data.x_rows(Split::Test);
  const Eigen::MatrixXd y_test = data.y_rows(Split::Test);
  if (x_train.rows() == 0) throw ConfigError("training split is empty");

  MlpModel model(data.input_dim(), data.output_dim(), config);
  TrainConfig adam_cfg;
  adam_cfg.lr = config.lr;
  adam_cfg.beta1 = config.beta1;
  adam_cfg.beta2 = config.beta2;
  adam_cfg.eps = config.eps;
  AdamState adam;
  adam.init(model.params().size());

  Rng rng(derive_seed(config.seed, 0x6d6c7032));
  const long n = x_train.rows();
  std::vector<long> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0L);

  std::vector<double> best_params(model.params().begin(), model.params().end());
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::vector<double> grad;
  Eigen::MatrixXd xb, yb;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (long start = 0; start < n; start += config.batch) {
      const long bs = std::min<long>(config.batch, n - start);
      xb.resize(bs, x_train.cols());
      yb.resize(bs, y_train.cols());
      for (long i = 0; i < bs; ++i) {
        xb.row(i) = x_train.row(order[static_cast<std::size_t>(start + i)]);
        yb.row(i) = y_train.row(order[static_cast<std::size_t>(start + i)]);
      }
      const Eigen::MatrixXd pred = model.predict(xb);
      const Eigen::MatrixXd dLdY = (pred - yb) * (2.0 / static_cast<double>(bs));
      model.backward(xb, dLdY, grad);
      adam_step(model.params(), grad, adam, adam_cfg);
    }
    if (x_val.rows() > 0) {
      const double v = rmse(model.predict(x_val), y_val);
      if (v < best_val) {
        best_val = v;
        best_epoch = epoch;
        std::copy(model.params().begin(), model.params().end(),
                  best_params.begin());
      }
    }
  }
  if (best_epoch >= 0) {
    std::copy(best_params.begin(), best_params.end(), model.params().begin());
  }
  MlpResult res{std::move(model), best_val, 0.0, best_epoch};
  if (x_test.rows() > 0) res.test_rmse = rmse(res.model.predict(x_test), y_test);
  if (x_val.rows() == 0) res.val_rmse = 0.0;
  return res;
}

}  // namespace ieql
