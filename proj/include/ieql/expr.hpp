#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ieql/common.hpp"
#include "json.hpp"

namespace ieql {

/// Immutable symbolic expression tree. Nodes are shared, so copies are cheap
/// and whole expressions are safe to evaluate from concurrent threads.
class Expression {
 public:
  enum class Kind {
    Constant,
    Variable,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Cos,
    Exp,
    Log,
    Sqrt,
    Square
  };

  Expression();  // constant 0

  static Expression constant(double v);
  static Expression variable(int index);
  static Expression make(Kind k, std::vector<Expression> children);

  static Expression add(Expression a, Expression b);
  static Expression sub(Expression a, Expression b);
  static Expression mul(Expression a, Expression b);
  static Expression div(Expression a, Expression b);
  static Expression neg(Expression a);
  static Expression cos(Expression a);
  static Expression exp(Expression a);
  static Expression log(Expression a);
  static Expression sqrt(Expression a);
  static Expression square(Expression a);
  /// base raised to an integer power, built from mul/square/div nodes.
  static Expression int_pow(Expression base, long exponent);

  Kind kind() const { return node_->kind; }
  double value() const { return node_->value; }
  int var_index() const { return node_->var; }
  const std::vector<Expression>& children() const { return node_->children; }
  const void* id() const { return node_.get(); }

  bool is_constant(double v) const {
    return kind() == Kind::Constant && value() == v;
  }

  /// Exact evaluation; throws EvalDomainError on log(z<=0), sqrt(z<0) or
  /// division by zero instead of clamping.
  double eval(std::span<const double> x) const;

  bool equals(const Expression& other) const;
  std::size_t node_count() const;
  int max_var_index() const;  // -1 when no variables occur

  /// Occurrences of each operation, Add/Sub/Neg pooled under AddSub.
  std::map<UnitKind, double> unit_counts() const;
  bool contains_variable(int index) const;

  nlohmann::json to_json() const;
  static Expression from_json(const nlohmann::json& j);

 private:
  struct Node {
    Kind kind;
    double value = 0.0;
    int var = -1;
    std::vector<Expression> children;
  };
  explicit Expression(std::shared_ptr<const Node> n) : node_(std::move(n)) {}
  std::shared_ptr<const Node> node_;
};

/// Parse an infix formula over the named inputs. Supported: real literals,
/// + - * /, unary minus, ^ with integer literal exponents, and the functions
/// cos, sin, exp, log, sqrt (sin is lowered to a shifted cos).
Expression parse_formula(const std::string& text,
                         std::span<const std::string> input_names);

/// Value-preserving cleanup: constant folding, zero-term dropping, affine
/// chain merging, pulling constants through products, and bounded expansion
/// of squared/multiplied sums. Iterated to a fixpoint, at most 100 passes.
Expression simplify(const Expression& e);

/// Deterministic infix rendering with constants at `precision` significant
/// digits (round-half-even). Variables print as names[i], or x{i+1} when no
/// name is supplied.
std::string format_expr(const Expression& e, int precision = 3,
                        std::span<const std::string> names = {});

std::string format_double(double v, int precision);
std::string format_double_exact(double v);

// ---------------------------------------------------------------------------
// Complexity factors c_u: the expert-supplied cost per atomic unit kind.
// ---------------------------------------------------------------------------

struct ComplexityFactors {
  std::map<UnitKind, double> cost;

  static ComplexityFactors plain();  // every kind costs 1
  static ComplexityFactors motor();  // engineering defaults

  double at(UnitKind k) const;
  void validate() const;

  nlohmann::json to_json() const;
  static ComplexityFactors from_json(const nlohmann::json& j);
};

/// Weighted sum of counts: sum_u c_u * count_u. Throws ConfigError when a
/// present kind has no factor.
double complexity_score(const std::map<UnitKind, double>& counts,
                        const ComplexityFactors& factors);

}  // namespace ieql
