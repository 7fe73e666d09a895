#include <cmath>
#include <set>

#include "doctest.h"
#include "ieql/network.hpp"

using namespace ieql;

namespace {

ArchitectureSpec tiny_spec(int input_dim, int hidden_layers,
                           std::vector<std::pair<UnitKind, int>> unary,
                           std::vector<std::pair<UnitKind, int>> binary,
                           bool prohibitions = false) {
  ArchitectureSpec s;
  s.input_dim = input_dim;
  s.output_dim = 1;
  s.hidden_layers = hidden_layers;
  s.unary = std::move(unary);
  s.binary = std::move(binary);
  if (!prohibitions) s.prohibitions.clear();
  return s;
}

// Whether any Cos node's argument directly references another Cos output.
bool has_direct_cos_of_cos(const Expression& e) {
  auto contains_cos_term = [](const Expression& arg, auto&& self_ref) -> bool {
    switch (arg.kind()) {
      case Expression::Kind::Cos:
        return true;
      case Expression::Kind::Add:
      case Expression::Kind::Sub:
      case Expression::Kind::Neg:
        for (const auto& c : arg.children())
          if (self_ref(c, self_ref)) return true;
        return false;
      case Expression::Kind::Mul:
        // constant * term keeps the direct-connection structure
        for (const auto& c : arg.children())
          if (c.kind() != Expression::Kind::Constant && self_ref(c, self_ref))
            return true;
        return false;
      default:
        return false;
    }
  };
  if (e.kind() == Expression::Kind::Cos &&
      contains_cos_term(e.children()[0], contains_cos_term))
    return true;
  for (const auto& c : e.children())
    if (has_direct_cos_of_cos(c)) return true;
  return false;
}

}  // namespace

TEST_SUITE("network") {

TEST_CASE("build: parameter counts for a one-layer cos/mul layout") {
  // 1 hidden layer, {cos x1, mul x1}, D=1, D'=1: slots 3, hidden params 6,
  // output 3 weights + 1 bias, 10 total.
  auto spec = tiny_spec(1, 1, {{UnitKind::Cos, 1}}, {{UnitKind::Mul, 1}});
  Network net = Network::build(spec, 1);
  CHECK(net.layer(0).n_slots == 3);
  CHECK(net.layer(0).n_outputs == 2);
  CHECK(net.out_width() == 3);
  const ParamCounts pc = net.param_counts();
  CHECK(pc.weights == 6);
  CHECK(pc.biases == 4);
  CHECK(pc.weights_and_biases() == 10);
  CHECK(pc.relax == 0);
}

TEST_CASE("build: prohibition removes exactly the forbidden copies") {
  ArchitectureSpec spec = tiny_spec(1, 2, {{UnitKind::Cos, 1}}, {{UnitKind::Mul, 1}});
  spec.prohibitions = {{UnitKind::Cos, UnitKind::Cos}};
  Network net = Network::build(spec, 1);
  // layer 1 sees [x, cos_0, mul_0]; the cos slot loses only cos_0
  const auto& t1 = net.layer(1);
  CHECK(t1.width == 3);
  CHECK(t1.mask(0, 0) == 1.0);
  CHECK(t1.mask(0, 1) == 0.0);
  CHECK(t1.mask(0, 2) == 1.0);
  // mul slots unaffected
  CHECK(t1.mask(1, 1) == 1.0);
  CHECK(t1.mask(2, 1) == 1.0);
  // masked weights are exactly zero and carry no gate
  CHECK(net.w(1, 0, 1) == 0.0);
  const ParamCounts pc = net.param_counts();
  ArchitectureSpec no_proh = spec;
  no_proh.prohibitions.clear();
  CHECK(Network::build(no_proh, 1).param_counts().weights == pc.weights + 1);
}

TEST_CASE("build: default paper-scale spec reports its learnable size") {
  ArchitectureSpec spec;  // defaults: 4 hidden layers, x4 units
  spec.input_dim = 4;
  spec.output_dim = 1;
  Network net = Network::build(spec, 3);
  const ParamCounts pc = net.param_counts();
  // 36 slots/layer over widths 4/32/60/88 plus the output row, minus the
  // 384 prohibited connections; biases 36*4 + 1.
  CHECK(pc.weights == 36 * (4 + 32 + 60 + 88) + 116 - 384);
  CHECK(pc.biases == 145);
  CHECK(pc.relax == 4 * 12);
  CHECK(net.n_alpha() == 48);
}

TEST_CASE("build: zero multiplicities give an affine network") {
  auto spec = tiny_spec(2, 1, {}, {});
  Network net = Network::build(spec, 9);
  net.set_all_gates(30.0);
  Extraction ex = net.extract_expression();
  const auto counts = ex.outputs[0].unit_counts();
  CHECK(counts.find(UnitKind::Cos) == counts.end());
  CHECK(counts.find(UnitKind::Div) == counts.end());
  CHECK(counts.find(UnitKind::Square) == counts.end());
  // linear: any product is a constant coefficient times a variable
  auto linear = [](const Expression& e, auto&& self) -> bool {
    if (e.kind() == Expression::Kind::Mul) {
      return e.children()[0].kind() == Expression::Kind::Constant &&
             e.children()[1].kind() == Expression::Kind::Variable;
    }
    for (const auto& c : e.children())
      if (!self(c, self)) return false;
    return true;
  };
  CHECK(linear(ex.outputs[0], linear));
  // y = w0 x0 + w1 x1 + b evaluates like the deterministic forward
  Eigen::MatrixXd X(3, 2);
  X << 0.2, -1.0, 0.5, 0.25, -2.0, 1.5;
  const Eigen::MatrixXd Y = net.predict(X);
  for (int i = 0; i < 3; ++i) {
    std::vector<double> x = {X(i, 0), X(i, 1)};
    CHECK(ex.outputs[0].eval(x) == doctest::Approx(Y(i, 0)).epsilon(1e-12));
  }
}

TEST_CASE("forward: hand-wired product route") {
  auto spec = tiny_spec(2, 1, {}, {{UnitKind::Mul, 1}});
  Network net = Network::build(spec, 5);
  net.set_all_gates(30.0);
  // zero everything, then route x1 and x2 into the mul arguments
  for (int s = 0; s < 2; ++s)
    for (int c = 0; c < 2; ++c) net.w(0, s, c) = 0.0;
  net.w(0, 0, 0) = 1.0;
  net.w(0, 1, 1) = 1.0;
  net.b(0, 0) = 0.0;
  net.b(0, 1) = 0.0;
  for (int c = 0; c < net.out_width(); ++c) net.out_w(0, c) = 0.0;
  net.out_w(0, 2) = 1.0;  // the mul output column
  net.out_b(0) = 0.0;
  Eigen::MatrixXd X(1, 2);
  X << 2.0, 3.0;
  CHECK(net.predict(X)(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("forward: closed gates leave only the output bias") {
  ArchitectureSpec spec = tiny_spec(2, 2,
                                    {{UnitKind::Cos, 1}, {UnitKind::Square, 1}},
                                    {{UnitKind::Mul, 1}});
  Network net = Network::build(spec, 8);
  net.set_all_gates(-30.0);
  net.out_b(0) = 1.75;
  Eigen::MatrixXd X(4, 2);
  X.setRandom();
  const Eigen::MatrixXd Y = net.predict(X);
  for (int i = 0; i < 4; ++i) CHECK(Y(i, 0) == doctest::Approx(1.75));
  Extraction ex = net.extract_expression();
  CHECK(ex.outputs[0].is_constant(1.75));
  CHECK(ex.active_params == 1);
}

TEST_CASE("relaxed unary functions") {
  const double a = std::log(2.0);
  CHECK(relaxed_unary(UnitKind::Log, 1.0, a) ==
        doctest::Approx(0.5265890341).epsilon(1e-9));
  CHECK(relaxed_unary(UnitKind::Div, 1.0, 1.0) == doctest::Approx(0.5));
  for (UnitKind k : {UnitKind::Log, UnitKind::Sqrt, UnitKind::Div}) {
    CHECK(relaxed_unary(k, -3.0, 0.7) == 0.0);
    CHECK(relaxed_unary_dz(k, -3.0, 0.7) == 0.0);
  }
  // non-singular kinds ignore alpha
  CHECK(relaxed_unary(UnitKind::Cos, 0.0, 5.0) == doctest::Approx(1.0));
  CHECK(relaxed_unary(UnitKind::Square, 3.0, 5.0) == doctest::Approx(9.0));
  // continuity in alpha on the live branch
  CHECK(relaxed_unary(UnitKind::Log, 0.5, 1e-12) ==
        doctest::Approx(std::log(0.5)).epsilon(1e-9));
}

TEST_CASE("domain penalty: hinge per singular input") {
  auto spec = tiny_spec(1, 1, {{UnitKind::Log, 1}, {UnitKind::Sqrt, 1}}, {});
  Network net = Network::build(spec, 2);
  net.set_all_gates(30.0);
  net.w(0, 0, 0) = 1.0;
  net.b(0, 0) = 0.0;
  net.w(0, 1, 0) = 2.0;
  net.b(0, 1) = 0.0;

  ForwardCache cache;
  Eigen::MatrixXd X(1, 1);
  X << -0.5;
  net.forward(X, ForwardMode::Deterministic, nullptr, cache);
  // log input -0.5, sqrt input -1.0
  CHECK(net.domain_penalty(cache) == doctest::Approx(1.5));
  CHECK(*net.min_singular_input(cache) == doctest::Approx(-1.0));

  X << 0.3;
  net.forward(X, ForwardMode::Deterministic, nullptr, cache);
  CHECK(net.domain_penalty(cache) == doctest::Approx(0.0));

  // one datum, inputs z=-1 and z=-2 sum to 3
  net.w(0, 1, 0) = 1.0;
  net.b(0, 0) = 0.0;
  net.b(0, 1) = -1.0;
  X << -1.0;
  net.forward(X, ForwardMode::Deterministic, nullptr, cache);
  CHECK(net.domain_penalty(cache) == doctest::Approx(3.0));
}

TEST_CASE("backward: zero upstream gradient leaves only penalty terms") {
  ArchitectureSpec spec = tiny_spec(2, 1,
                                    {{UnitKind::Cos, 1}, {UnitKind::Log, 1}},
                                    {{UnitKind::Div, 1}});
  Network net = Network::build(spec, 3);
  Eigen::MatrixXd X(6, 2);
  X.setRandom();
  Rng rng(1);
  ForwardCache cache;
  net.forward(X, ForwardMode::Stochastic, &rng, cache);
  std::vector<double> grad;
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(6, 1);
  net.backward(cache, zero, 0.0, 0.0, ComplexityFactors::plain(), grad);
  for (double g : grad) CHECK(g == 0.0);
}

TEST_CASE("extraction: the quadratic two-square wiring has 9 active params") {
  auto spec = tiny_spec(2, 1, {{UnitKind::Square, 2}}, {});
  Network net = Network::build(spec, 4);
  net.set_all_gates(30.0);
  // square_0 = (ID + 1)^2, square_1 = (IQ + 1)^2
  net.w(0, 0, 0) = 1.0;
  net.w(0, 0, 1) = 0.0;
  net.b(0, 0) = 1.0;
  net.w(0, 1, 0) = 0.0;
  net.w(0, 1, 1) = 1.0;
  net.b(0, 1) = 1.0;
  // y = -1.92 ID + 0.31 IQ + 0.4 sq0 + 0.41 sq1 - 1.12
  net.out_w(0, 0) = -1.92;
  net.out_w(0, 1) = 0.31;
  net.out_w(0, 2) = 0.4;
  net.out_w(0, 3) = 0.41;
  net.out_b(0) = -1.12;

  Extraction ex = net.extract_expression();
  CHECK(ex.active_params == 9);  // 6 weights + 2 unit biases + output bias
  CHECK(ex.weight_counts.at(UnitKind::Square) == 2.0);
  CHECK(ex.weight_counts.at(UnitKind::AddSub) == 4.0);

  // extraction fidelity + agreement with the reference polynomial
  const std::vector<std::string> names = {"ID", "IQ"};
  Expression ref = parse_formula(
      "0.4*ID^2 - 1.12*ID + 0.41*IQ^2 + 1.13*IQ - 0.31", names);
  Rng rng(12);
  for (int i = 0; i < 20; ++i) {
    Eigen::MatrixXd X(1, 2);
    X << rng.uniform(-2, 2), rng.uniform(-2, 2);
    std::vector<double> x = {X(0, 0), X(0, 1)};
    const double y = net.predict(X)(0, 0);
    CHECK(ex.outputs[0].eval(x) == doctest::Approx(y).epsilon(1e-12));
    CHECK(ref.eval(x) == doctest::Approx(y).epsilon(1e-9));
  }
}

TEST_CASE("extraction fidelity on randomly pruned networks") {
  ArchitectureSpec spec;
  spec.input_dim = 2;
  spec.output_dim = 1;
  spec.hidden_layers = 2;
  spec.unary = {{UnitKind::Cos, 2}, {UnitKind::Exp, 2}, {UnitKind::Log, 2},
                {UnitKind::Sqrt, 2}, {UnitKind::Square, 2}};
  spec.binary = {{UnitKind::Mul, 2}, {UnitKind::Div, 2}};
  Rng master(99);
  int verified_points = 0;
  for (int t = 0; t < 8; ++t) {
    Network net = Network::build(spec, master.next_u64());
    const double p_open = master.uniform(0.05, 0.25);
    for (int l = 0; l <= net.n_hidden(); ++l) {
      const int slots = l < net.n_hidden() ? net.layer(l).n_slots : 1;
      const int width = l < net.n_hidden() ? net.layer(l).width : net.out_width();
      for (int s = 0; s < slots; ++s) {
        for (int c = 0; c < width; ++c) {
          const double la = master.u01() < p_open ? 30.0 : -30.0;
          if (l < net.n_hidden()) net.log_alpha(l, s, c) = la;
          else net.out_log_alpha(s, c) = la;
        }
      }
    }
    Extraction ex = net.extract_expression();
    ForwardCache cache;
    for (int tries = 0; tries < 4000 && verified_points < 8 * 100; ++tries) {
      Eigen::MatrixXd X(1, 2);
      X << master.uniform(-1, 1), master.uniform(-1, 1);
      net.forward(X, ForwardMode::Deterministic, nullptr, cache);
      const auto min_z = net.min_singular_input(cache);
      if (min_z && *min_z <= 0.0) continue;  // outside the network's domain
      const double y = cache.y_pred(0, 0);
      std::vector<double> x = {X(0, 0), X(0, 1)};
      const double ye = ex.outputs[0].eval(x);
      CHECK(std::abs(y - ye) <= 1e-9 * (1.0 + std::abs(y)));
      ++verified_points;
    }
  }
  CHECK(verified_points > 200);
}

TEST_CASE("extraction: relaxation folds into the bias exactly") {
  auto spec = tiny_spec(1, 1, {{UnitKind::Log, 1}}, {});
  Network netA = Network::build(spec, 6);
  netA.set_all_gates(30.0);
  netA.w(0, 0, 0) = 1.0;
  netA.b(0, 0) = 0.3;
  netA.alpha_hat(0) = 0.25;  // alpha = softplus(0.25)
  const double alpha = netA.relax_alpha(0);
  for (int c = 0; c < netA.out_width(); ++c) netA.out_w(0, c) = 0.0;
  netA.out_w(0, 1) = 1.0;

  Network netB = Network::build(spec, 6);
  netB.set_all_gates(30.0);
  netB.w(0, 0, 0) = 1.0;
  netB.b(0, 0) = 0.3 + alpha;
  netB.alpha_hat(0) = -30.0;  // alpha -> 0+
  for (int c = 0; c < netB.out_width(); ++c) netB.out_w(0, c) = 0.0;
  netB.out_w(0, 1) = 1.0;

  Expression ea = netA.extract_expression().outputs[0];
  Expression eb = netB.extract_expression().outputs[0];
  for (double x : {0.5, 1.0, 2.0, 4.0}) {
    std::vector<double> xs = {x};
    CHECK(std::abs(ea.eval(xs) - eb.eval(xs)) < 1e-12);
  }
}

TEST_CASE("prohibited connections never reach extracted expressions") {
  ArchitectureSpec spec = tiny_spec(1, 2, {{UnitKind::Cos, 1}}, {});
  spec.prohibitions = {{UnitKind::Cos, UnitKind::Cos}};
  Network banned = Network::build(spec, 10);
  banned.set_all_gates(30.0);
  ArchitectureSpec open_spec = spec;
  open_spec.prohibitions.clear();
  Network open_net = Network::build(open_spec, 10);
  open_net.set_all_gates(30.0);
  // force nonzero weights everywhere allowed
  for (Network* n : {&banned, &open_net}) {
    for (int l = 0; l < 2; ++l) {
      const auto& t = n->layer(l);
      for (int s = 0; s < t.n_slots; ++s)
        for (int c = 0; c < t.width; ++c)
          n->w(l, s, c) = 0.5 * (1 + s + c) * t.mask(s, c);
    }
    for (int c = 0; c < n->out_width(); ++c) n->out_w(0, c) = 1.0;
  }
  CHECK_FALSE(has_direct_cos_of_cos(banned.extract_expression().raw_outputs[0]));
  CHECK(has_direct_cos_of_cos(open_net.extract_expression().raw_outputs[0]));
}

TEST_CASE("masked weights receive zero gradient and stay zero") {
  ArchitectureSpec spec = tiny_spec(1, 2, {{UnitKind::Cos, 2}}, {});
  spec.prohibitions = {{UnitKind::Cos, UnitKind::Cos}};
  Network net = Network::build(spec, 20);
  Eigen::MatrixXd X(8, 1), Y(8, 1);
  X.setRandom();
  Y.setRandom();
  Rng rng(3);
  ForwardCache cache;
  std::vector<double> grad;
  for (int step = 0; step < 5; ++step) {
    net.forward(X, ForwardMode::Stochastic, &rng, cache);
    Eigen::MatrixXd dLdY = (cache.y_pred - Y) * (2.0 / 8.0);
    net.backward(cache, dLdY, 1.0, 0.05, ComplexityFactors::plain(), grad);
    const auto& t1 = net.layer(1);
    for (int s = 0; s < t1.n_slots; ++s) {
      for (int c = 0; c < t1.width; ++c) {
        if (t1.mask(s, c) == 0.0) {
          CHECK(net.w(1, s, c) == 0.0);
          const long off = net.layout().hidden[1].w + c * t1.n_slots + s;
          CHECK(grad[static_cast<std::size_t>(off)] == 0.0);
        }
      }
    }
  }
}

TEST_CASE("weighted gate counts") {
  ArchitectureSpec spec = tiny_spec(2, 1,
                                    {{UnitKind::Cos, 1}, {UnitKind::Square, 1}},
                                    {{UnitKind::Mul, 1}});
  spec.gate_noise_std = 0.0;
  Network net = Network::build(spec, 30);
  // fresh gates at dropout 0.5: every gate contributes expected_l0(0)
  const auto counts = net.weighted_gate_counts(false);
  const double per_gate = expected_l0(0.0, net.hyper());
  CHECK(counts.at(UnitKind::Cos) == doctest::Approx(2 * per_gate));
  CHECK(counts.at(UnitKind::Square) == doctest::Approx(2 * per_gate));
  CHECK(counts.at(UnitKind::Mul) == doctest::Approx(4 * per_gate));
  CHECK(counts.at(UnitKind::AddSub) == doctest::Approx(5 * per_gate));
  // relative frequencies sum to one
  double total = 0.0;
  for (const auto& [k, v] : counts) total += v;
  double frac = 0.0;
  for (const auto& [k, v] : counts) frac += v / total;
  CHECK(frac == doctest::Approx(1.0));
  // fully pruned network counts zero everywhere
  net.set_all_gates(-30.0);
  for (const auto& [k, v] : net.weighted_gate_counts(true)) CHECK(v == 0.0);
}

TEST_CASE("non-finite forward reports coordinates") {
  auto spec = tiny_spec(1, 1, {{UnitKind::Exp, 1}}, {});
  Network net = Network::build(spec, 2);
  net.set_all_gates(30.0);
  net.w(0, 0, 0) = 1000.0;
  Eigen::MatrixXd X(1, 1);
  X << 1.0;
  ForwardCache cache;
  CHECK_THROWS_AS(net.forward(X, ForwardMode::Deterministic, nullptr, cache),
                  NumericError);
}

TEST_CASE("serialization: bit-exact round trip") {
  ArchitectureSpec spec;
  spec.input_dim = 3;
  spec.output_dim = 2;
  spec.hidden_layers = 2;
  Network net = Network::build(spec, 77);
  // make values less round
  Rng rng(5);
  for (double& p : net.params()) p += rng.uniform(-0.37, 0.41);
  const nlohmann::json j = net.to_json();
  Network back = Network::from_json(j);
  REQUIRE(back.params().size() == net.params().size());
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    CHECK(back.params()[i] == net.params()[i]);  // exact, not approximate
  }
  CHECK(back.to_json().dump() == j.dump());
}

TEST_CASE("stochastic forward is reproducible from the seed") {
  ArchitectureSpec spec = tiny_spec(2, 1, {{UnitKind::Cos, 2}}, {{UnitKind::Mul, 1}});
  Network net = Network::build(spec, 42);
  Eigen::MatrixXd X(5, 2);
  X.setRandom();
  ForwardCache a, b;
  Rng r1(9), r2(9);
  net.forward(X, ForwardMode::Stochastic, &r1, a);
  net.forward(X, ForwardMode::Stochastic, &r2, b);
  CHECK((a.y_pred - b.y_pred).cwiseAbs().maxCoeff() == 0.0);
}

}  // TEST_SUITE
