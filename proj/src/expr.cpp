#include "ieql/expr.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <sstream>
#include <unordered_map>

namespace ieql {

using Kind = Expression::Kind;

namespace {

bool kind_is_unary(Kind k) {
  switch (k) {
    case Kind::Neg:
    case Kind::Cos:
    case Kind::Exp:
    case Kind::Log:
    case Kind::Sqrt:
    case Kind::Square:
      return true;
    default:
      return false;
  }
}

bool kind_is_binary(Kind k) {
  switch (k) {
    case Kind::Add:
    case Kind::Sub:
    case Kind::Mul:
    case Kind::Div:
      return true;
    default:
      return false;
  }
}

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::Constant: return "const";
    case Kind::Variable: return "var";
    case Kind::Add: return "add";
    case Kind::Sub: return "sub";
    case Kind::Mul: return "mul";
    case Kind::Div: return "div";
    case Kind::Neg: return "neg";
    case Kind::Cos: return "cos";
    case Kind::Exp: return "exp";
    case Kind::Log: return "log";
    case Kind::Sqrt: return "sqrt";
    case Kind::Square: return "square";
  }
  return "?";
}

Kind kind_from_string(const std::string& s) {
  static const std::unordered_map<std::string, Kind> table = {
      {"const", Kind::Constant}, {"var", Kind::Variable},
      {"add", Kind::Add},        {"sub", Kind::Sub},
      {"mul", Kind::Mul},        {"div", Kind::Div},
      {"neg", Kind::Neg},        {"cos", Kind::Cos},
      {"exp", Kind::Exp},        {"log", Kind::Log},
      {"sqrt", Kind::Sqrt},      {"square", Kind::Square}};
  auto it = table.find(s);
  if (it == table.end()) throw DataError("unknown expression node kind: " + s);
  return it->second;
}

}  // namespace

Expression::Expression() { *this = constant(0.0); }

Expression Expression::constant(double v) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::Constant;
  n->value = v;
  return Expression(std::move(n));
}

Expression Expression::variable(int index) {
  if (index < 0) throw ConfigError("variable index must be non-negative");
  auto n = std::make_shared<Node>();
  n->kind = Kind::Variable;
  n->var = index;
  return Expression(std::move(n));
}

Expression Expression::make(Kind k, std::vector<Expression> children) {
  if (kind_is_unary(k) && children.size() != 1)
    throw ConfigError("unary node requires exactly one child");
  if (kind_is_binary(k) && children.size() != 2)
    throw ConfigError("binary node requires exactly two children");
  if (k == Kind::Constant || k == Kind::Variable)
    throw ConfigError("use constant()/variable() for leaf nodes");
  auto n = std::make_shared<Node>();
  n->kind = k;
  n->children = std::move(children);
  return Expression(std::move(n));
}

Expression Expression::add(Expression a, Expression b) {
  return make(Kind::Add, {std::move(a), std::move(b)});
}
Expression Expression::sub(Expression a, Expression b) {
  return make(Kind::Sub, {std::move(a), std::move(b)});
}
Expression Expression::mul(Expression a, Expression b) {
  return make(Kind::Mul, {std::move(a), std::move(b)});
}
Expression Expression::div(Expression a, Expression b) {
  return make(Kind::Div, {std::move(a), std::move(b)});
}
Expression Expression::neg(Expression a) { return make(Kind::Neg, {std::move(a)}); }
Expression Expression::cos(Expression a) { return make(Kind::Cos, {std::move(a)}); }
Expression Expression::exp(Expression a) { return make(Kind::Exp, {std::move(a)}); }
Expression Expression::log(Expression a) { return make(Kind::Log, {std::move(a)}); }
Expression Expression::sqrt(Expression a) { return make(Kind::Sqrt, {std::move(a)}); }
Expression Expression::square(Expression a) { return make(Kind::Square, {std::move(a)}); }

Expression Expression::int_pow(Expression base, long exponent) {
  if (exponent < 0) {
    return div(constant(1.0), int_pow(std::move(base), -exponent));
  }
  if (exponent == 0) return constant(1.0);
  if (exponent == 1) return base;
  if (exponent == 2) return square(std::move(base));
  if (exponent % 2 == 0) return square(int_pow(std::move(base), exponent / 2));
  Expression rest = int_pow(base, exponent - 1);
  return mul(std::move(base), std::move(rest));
}

double Expression::eval(std::span<const double> x) const {
  const Node& n = *node_;
  switch (n.kind) {
    case Kind::Constant:
      return n.value;
    case Kind::Variable:
      if (n.var >= static_cast<int>(x.size()))
        throw EvalDomainError("variable index " + std::to_string(n.var) +
                              " out of range for input of dimension " +
                              std::to_string(x.size()));
      return x[static_cast<std::size_t>(n.var)];
    case Kind::Add:
      return n.children[0].eval(x) + n.children[1].eval(x);
    case Kind::Sub:
      return n.children[0].eval(x) - n.children[1].eval(x);
    case Kind::Mul:
      return n.children[0].eval(x) * n.children[1].eval(x);
    case Kind::Div: {
      const double num = n.children[0].eval(x);
      const double den = n.children[1].eval(x);
      if (den == 0.0) throw EvalDomainError("division by zero");
      return num / den;
    }
    case Kind::Neg:
      return -n.children[0].eval(x);
    case Kind::Cos:
      return std::cos(n.children[0].eval(x));
    case Kind::Exp:
      return std::exp(n.children[0].eval(x));
    case Kind::Log: {
      const double z = n.children[0].eval(x);
      if (z <= 0.0) throw EvalDomainError("log of non-positive value");
      return std::log(z);
    }
    case Kind::Sqrt: {
      const double z = n.children[0].eval(x);
      if (z < 0.0) throw EvalDomainError("sqrt of negative value");
      return std::sqrt(z);
    }
    case Kind::Square: {
      const double z = n.children[0].eval(x);
      return z * z;
    }
  }
  throw NumericError("corrupt expression node");
}

bool Expression::equals(const Expression& other) const {
  if (node_ == other.node_) return true;
  const Node& a = *node_;
  const Node& b = *other.node_;
  if (a.kind != b.kind || a.var != b.var) return false;
  if (a.kind == Kind::Constant && a.value != b.value) return false;
  if (a.children.size() != b.children.size()) return false;
  for (std::size_t i = 0; i < a.children.size(); ++i) {
    if (!a.children[i].equals(b.children[i])) return false;
  }
  return true;
}

std::size_t Expression::node_count() const {
  std::size_t n = 1;
  for (const auto& c : node_->children) n += c.node_count();
  return n;
}

int Expression::max_var_index() const {
  int m = node_->kind == Kind::Variable ? node_->var : -1;
  for (const auto& c : node_->children) m = std::max(m, c.max_var_index());
  return m;
}

bool Expression::contains_variable(int index) const {
  if (node_->kind == Kind::Variable && node_->var == index) return true;
  for (const auto& c : node_->children) {
    if (c.contains_variable(index)) return true;
  }
  return false;
}

std::map<UnitKind, double> Expression::unit_counts() const {
  std::map<UnitKind, double> counts;
  auto walk = [&counts](const Expression& e, auto&& self) -> void {
    switch (e.kind()) {
      case Kind::Add:
      case Kind::Sub:
      case Kind::Neg:
        counts[UnitKind::AddSub] += 1;
        break;
      case Kind::Mul:
        counts[UnitKind::Mul] += 1;
        break;
      case Kind::Div:
        counts[UnitKind::Div] += 1;
        break;
      case Kind::Cos:
        counts[UnitKind::Cos] += 1;
        break;
      case Kind::Exp:
        counts[UnitKind::Exp] += 1;
        break;
      case Kind::Log:
        counts[UnitKind::Log] += 1;
        break;
      case Kind::Sqrt:
        counts[UnitKind::Sqrt] += 1;
        break;
      case Kind::Square:
        counts[UnitKind::Square] += 1;
        break;
      default:
        break;
    }
    for (const auto& c : e.children()) self(c, self);
  };
  walk(*this, walk);
  return counts;
}

nlohmann::json Expression::to_json() const {
  nlohmann::json j;
  j["kind"] = kind_name(kind());
  if (kind() == Kind::Constant) j["value"] = value();
  if (kind() == Kind::Variable) j["var"] = var_index();
  if (!children().empty()) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : children()) arr.push_back(c.to_json());
    j["children"] = arr;
  }
  return j;
}

Expression Expression::from_json(const nlohmann::json& j) {
  const Kind k = kind_from_string(j.at("kind").get<std::string>());
  if (k == Kind::Constant) return constant(j.at("value").get<double>());
  if (k == Kind::Variable) return variable(j.at("var").get<int>());
  std::vector<Expression> children;
  for (const auto& c : j.at("children")) children.push_back(from_json(c));
  return make(k, std::move(children));
}

// ---------------------------------------------------------------------------
// Parser: recursive descent over
//   expr    := term (('+'|'-') term)*
//   term    := unary (('*'|'/') unary)*
//   unary   := ('-'|'+') unary | postfix
//   postfix := primary ('^' int_literal)*
//   primary := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'
// ---------------------------------------------------------------------------

namespace {

class Parser {
 public:
  Parser(const std::string& text, std::span<const std::string> names)
      : text_(text), names_(names) {}

  Expression parse() {
    Expression e = parse_expr();
    skip_ws();
    if (pos_ != text_.size()) fail("unexpected trailing input");
    return e;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(msg + " at position " + std::to_string(pos_), pos_);
  }

  void skip_ws() {
    while (pos_ < text_.size() &&
           std::isspace(static_cast<unsigned char>(text_[pos_]))) {
      ++pos_;
    }
  }

  bool accept(char c) {
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  void expect(char c) {
    if (!accept(c)) fail(std::string("expected '") + c + "'");
  }

  char peek() {
    skip_ws();
    return pos_ < text_.size() ? text_[pos_] : '\0';
  }

  Expression parse_expr() {
    Expression e = parse_term();
    for (;;) {
      if (accept('+')) {
        e = Expression::add(std::move(e), parse_term());
      } else if (accept('-')) {
        e = Expression::sub(std::move(e), parse_term());
      } else {
        return e;
      }
    }
  }

  Expression parse_term() {
    Expression e = parse_unary();
    for (;;) {
      if (accept('*')) {
        e = Expression::mul(std::move(e), parse_unary());
      } else if (accept('/')) {
        e = Expression::div(std::move(e), parse_unary());
      } else {
        return e;
      }
    }
  }

  Expression parse_unary() {
    if (accept('-')) return Expression::neg(parse_unary());
    if (accept('+')) return parse_unary();
    return parse_postfix();
  }

  Expression parse_postfix() {
    Expression e = parse_primary();
    while (accept('^')) {
      e = Expression::int_pow(std::move(e), parse_int_exponent());
    }
    return e;
  }

  long parse_int_exponent() {
    skip_ws();
    const bool negative = accept('-');
    skip_ws();
    const std::size_t start = pos_;
    while (pos_ < text_.size() &&
           std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      ++pos_;
    }
    if (pos_ == start) fail("exponent must be an integer literal");
    long v = 0;
    std::from_chars(text_.data() + start, text_.data() + pos_, v);
    if (v > 64) fail("exponent too large");
    return negative ? -v : v;
  }

  Expression parse_primary() {
    skip_ws();
    if (pos_ >= text_.size()) fail("unexpected end of input");
    const char c = text_[pos_];
    if (c == '(') {
      ++pos_;
      Expression e = parse_expr();
      expect(')');
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      return parse_number();
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      return parse_ident();
    }
    fail(std::string("unexpected character '") + c + "'");
  }

  Expression parse_number() {
    const char* begin = text_.c_str() + pos_;
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin) fail("malformed number");
    pos_ += static_cast<std::size_t>(end - begin);
    return Expression::constant(v);
  }

  Expression parse_ident() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) ||
            text_[pos_] == '_')) {
      ++pos_;
    }
    const std::string name = text_.substr(start, pos_ - start);
    if (peek() == '(') {
      expect('(');
      Expression arg = parse_expr();
      expect(')');
      if (name == "cos") return Expression::cos(std::move(arg));
      if (name == "exp") return Expression::exp(std::move(arg));
      if (name == "log") return Expression::log(std::move(arg));
      if (name == "sqrt") return Expression::sqrt(std::move(arg));
      if (name == "sin") {
        // sin(u) = cos(u - pi/2); keeps the tree closed under the unit set.
        return Expression::cos(
            Expression::sub(std::move(arg), Expression::constant(M_PI / 2)));
      }
      pos_ = start;
      fail("unknown function '" + name + "'");
    }
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return Expression::variable(static_cast<int>(i));
    }
    pos_ = start;
    fail("unknown identifier '" + name + "'");
  }

  const std::string& text_;
  std::span<const std::string> names_;
  std::size_t pos_ = 0;
};

}  // namespace

Expression parse_formula(const std::string& text,
                         std::span<const std::string> input_names) {
  return Parser(text, input_names).parse();
}

// ---------------------------------------------------------------------------
// Simplifier. One bottom-up rewrite pass per iteration:
//   * exact constant folding (skipped when the fold would leave the domain
//     or produce a non-finite value)
//   * sums flattened into (constant, coefficient * core term) lists with
//     structurally equal cores merged and zero coefficients dropped
//   * products flattened, constants pulled out, zero annihilates
//   * bounded expansion of square(sum), sum*sum and constant*sum
// Passes repeat until the tree stops changing, capped at 100.
// ---------------------------------------------------------------------------

namespace {

constexpr int kMaxPasses = 100;
constexpr std::size_t kMaxExpandTerms = 16;

struct SumTerm {
  double coeff;
  Expression core;
};

class SimplifyPass {
 public:
  Expression run(const Expression& e) {
    auto it = memo_.find(e.id());
    if (it != memo_.end()) return it->second;
    std::vector<Expression> kids;
    kids.reserve(e.children().size());
    for (const auto& c : e.children()) kids.push_back(run(c));
    Expression out = rewrite(e, std::move(kids));
    memo_.emplace(e.id(), out);
    return out;
  }

 private:
  std::unordered_map<const void*, Expression> memo_;

  static bool is_const(const Expression& e) {
    return e.kind() == Kind::Constant;
  }
  static bool is_sum(const Expression& e) {
    return e.kind() == Kind::Add || e.kind() == Kind::Sub;
  }

  // --- sum handling ---------------------------------------------------

  static void add_term(std::vector<SumTerm>& terms, double coeff,
                       const Expression& core) {
    if (coeff == 0.0) return;
    for (auto& t : terms) {
      if (t.core.equals(core)) {
        t.coeff += coeff;
        return;
      }
    }
    terms.push_back({coeff, core});
  }

  // Split a non-sum expression into constant coefficient and core factor.
  static void split_coeff(const Expression& e, double& coeff,
                          Expression& core) {
    coeff = 1.0;
    std::vector<Expression> factors;
    collect_factors(e, coeff, factors);
    if (factors.empty()) {
      core = Expression::constant(1.0);
      return;
    }
    core = factors[0];
    for (std::size_t i = 1; i < factors.size(); ++i) {
      core = Expression::mul(core, factors[i]);
    }
  }

  static void collect_factors(const Expression& e, double& coeff,
                              std::vector<Expression>& factors) {
    switch (e.kind()) {
      case Kind::Constant:
        coeff *= e.value();
        return;
      case Kind::Neg:
        coeff = -coeff;
        collect_factors(e.children()[0], coeff, factors);
        return;
      case Kind::Mul:
        collect_factors(e.children()[0], coeff, factors);
        collect_factors(e.children()[1], coeff, factors);
        return;
      default:
        factors.push_back(e);
        return;
    }
  }

  // Flatten an Add/Sub/Neg tree into constant + merged terms. Returns false
  // if any coefficient turns non-finite (identity fallback applies then).
  static bool flatten_sum(const Expression& e, double sign, double& constant,
                          std::vector<SumTerm>& terms) {
    switch (e.kind()) {
      case Kind::Add:
        return flatten_sum(e.children()[0], sign, constant, terms) &&
               flatten_sum(e.children()[1], sign, constant, terms);
      case Kind::Sub:
        return flatten_sum(e.children()[0], sign, constant, terms) &&
               flatten_sum(e.children()[1], -sign, constant, terms);
      case Kind::Neg:
        return flatten_sum(e.children()[0], -sign, constant, terms);
      case Kind::Constant:
        constant += sign * e.value();
        return std::isfinite(constant);
      default: {
        double coeff;
        Expression core;
        split_coeff(e, coeff, core);
        if (core.kind() == Kind::Constant) {
          constant += sign * coeff * core.value();
          return std::isfinite(constant);
        }
        if (!std::isfinite(coeff)) return false;
        add_term(terms, sign * coeff, core);
        return true;
      }
    }
  }

  static Expression term_expr(double coeff, const Expression& core) {
    if (coeff == 1.0) return core;
    if (coeff == -1.0) return Expression::neg(core);
    return Expression::mul(Expression::constant(coeff), core);
  }

  static Expression rebuild_sum(double constant,
                                const std::vector<SumTerm>& terms) {
    std::vector<SumTerm> live;
    for (const auto& t : terms) {
      if (t.coeff != 0.0 && std::isfinite(t.coeff)) live.push_back(t);
    }
    if (live.empty()) return Expression::constant(constant);
    Expression acc = term_expr(live[0].coeff, live[0].core);
    for (std::size_t i = 1; i < live.size(); ++i) {
      if (live[i].coeff < 0) {
        acc = Expression::sub(acc, term_expr(-live[i].coeff, live[i].core));
      } else {
        acc = Expression::add(acc, term_expr(live[i].coeff, live[i].core));
      }
    }
    if (constant != 0.0) {
      if (constant < 0) {
        acc = Expression::sub(acc, Expression::constant(-constant));
      } else {
        acc = Expression::add(acc, Expression::constant(constant));
      }
    }
    return acc;
  }

  static Expression simplify_sum(const Expression& e) {
    double constant = 0.0;
    std::vector<SumTerm> terms;
    if (!flatten_sum(e, 1.0, constant, terms)) return e;
    return rebuild_sum(constant, terms);
  }

  // --- product handling -------------------------------------------------

  static Expression simplify_product(const Expression& e) {
    double coeff = 1.0;
    std::vector<Expression> factors;
    collect_factors(e, coeff, factors);
    if (!std::isfinite(coeff)) return e;
    if (coeff == 0.0) return Expression::constant(0.0);

    // Distribute over sums when the expansion stays small.
    std::size_t n_terms = 1;
    bool has_sum = false;
    for (const auto& f : factors) {
      if (is_sum(f)) {
        has_sum = true;
        double c = 0.0;
        std::vector<SumTerm> ts;
        if (!flatten_sum(f, 1.0, c, ts)) {
          has_sum = false;
          break;
        }
        n_terms *= ts.size() + (c != 0.0 ? 1 : 0);
      }
    }
    if (has_sum && (factors.size() == 1 || n_terms <= kMaxExpandTerms)) {
      std::vector<SumTerm> acc = {{coeff, Expression::constant(1.0)}};
      for (const auto& f : factors) {
        std::vector<SumTerm> parts;
        if (is_sum(f)) {
          double c = 0.0;
          flatten_sum(f, 1.0, c, parts);
          if (c != 0.0) parts.push_back({c, Expression::constant(1.0)});
        } else {
          parts.push_back({1.0, f});
        }
        std::vector<SumTerm> next;
        for (const auto& a : acc) {
          for (const auto& p : parts) {
            Expression core =
                a.core.is_constant(1.0)
                    ? p.core
                    : (p.core.is_constant(1.0) ? a.core
                                               : Expression::mul(a.core, p.core));
            next.push_back({a.coeff * p.coeff, core});
          }
        }
        acc = std::move(next);
      }
      double constant = 0.0;
      std::vector<SumTerm> merged;
      for (const auto& t : acc) {
        if (t.core.is_constant(1.0)) {
          constant += t.coeff;
        } else {
          add_term(merged, t.coeff, t.core);
        }
      }
      if (!std::isfinite(constant)) return e;
      return rebuild_sum(constant, merged);
    }

    if (factors.empty()) return Expression::constant(coeff);
    Expression acc = factors[0];
    for (std::size_t i = 1; i < factors.size(); ++i) {
      acc = Expression::mul(acc, factors[i]);
    }
    return term_expr(coeff, acc);
  }

  // --- unary / div ------------------------------------------------------

  static std::optional<double> fold_unary(Kind k, double z) {
    double v;
    switch (k) {
      case Kind::Neg: v = -z; break;
      case Kind::Cos: v = std::cos(z); break;
      case Kind::Exp: v = std::exp(z); break;
      case Kind::Square: v = z * z; break;
      case Kind::Log:
        if (z <= 0.0) return std::nullopt;
        v = std::log(z);
        break;
      case Kind::Sqrt:
        if (z < 0.0) return std::nullopt;
        v = std::sqrt(z);
        break;
      default:
        return std::nullopt;
    }
    if (!std::isfinite(v)) return std::nullopt;
    return v;
  }

  static Expression expand_square(const Expression& arg) {
    double constant = 0.0;
    std::vector<SumTerm> terms;
    if (!flatten_sum(arg, 1.0, constant, terms)) {
      return Expression::square(arg);
    }
    const std::size_t t = terms.size() + (constant != 0.0 ? 1 : 0);
    if (t >= 2 && t * (t + 1) / 2 > kMaxExpandTerms) {
      return Expression::square(arg);
    }
    // (sum_i c_i a_i + k)^2 = sum c_i^2 a_i^2 + 2 sum_{i<j} c_i c_j a_i a_j
    //                         + 2k sum c_i a_i + k^2
    double out_const = constant * constant;
    std::vector<SumTerm> out;
    for (std::size_t i = 0; i < terms.size(); ++i) {
      add_term(out, terms[i].coeff * terms[i].coeff,
               Expression::square(terms[i].core));
      for (std::size_t j = i + 1; j < terms.size(); ++j) {
        add_term(out, 2.0 * terms[i].coeff * terms[j].coeff,
                 Expression::mul(terms[i].core, terms[j].core));
      }
      if (constant != 0.0) {
        add_term(out, 2.0 * constant * terms[i].coeff, terms[i].core);
      }
    }
    if (!std::isfinite(out_const)) return Expression::square(arg);
    return rebuild_sum(out_const, out);
  }

  Expression rewrite(const Expression& orig, std::vector<Expression> kids) {
    const Kind k = orig.kind();
    switch (k) {
      case Kind::Constant:
      case Kind::Variable:
        return orig;

      case Kind::Add:
      case Kind::Sub:
        return simplify_sum(
            Expression::make(k, {std::move(kids[0]), std::move(kids[1])}));

      case Kind::Neg: {
        if (is_const(kids[0]))
          return Expression::constant(-kids[0].value());
        if (kids[0].kind() == Kind::Neg) return kids[0].children()[0];
        return simplify_sum(Expression::neg(std::move(kids[0])));
      }

      case Kind::Mul:
        return simplify_product(
            Expression::mul(std::move(kids[0]), std::move(kids[1])));

      case Kind::Div: {
        Expression num = std::move(kids[0]);
        Expression den = std::move(kids[1]);
        if (num.is_constant(0.0)) return Expression::constant(0.0);
        if (is_const(den)) {
          const double d = den.value();
          if (d != 0.0 && std::isfinite(1.0 / d)) {
            if (is_const(num)) {
              const double v = num.value() / d;
              if (std::isfinite(v)) return Expression::constant(v);
            }
            if (d == 1.0) return num;
            return simplify_product(
                Expression::mul(Expression::constant(1.0 / d), std::move(num)));
          }
        }
        return Expression::div(std::move(num), std::move(den));
      }

      case Kind::Square: {
        if (is_const(kids[0])) {
          if (auto v = fold_unary(Kind::Square, kids[0].value()))
            return Expression::constant(*v);
          return Expression::square(std::move(kids[0]));
        }
        if (is_sum(kids[0]) || kids[0].kind() == Kind::Mul ||
            kids[0].kind() == Kind::Neg) {
          return expand_square(kids[0]);
        }
        return Expression::square(std::move(kids[0]));
      }

      case Kind::Cos:
      case Kind::Exp:
      case Kind::Log:
      case Kind::Sqrt: {
        if (is_const(kids[0])) {
          if (auto v = fold_unary(k, kids[0].value()))
            return Expression::constant(*v);
        }
        return Expression::make(k, {std::move(kids[0])});
      }
    }
    return orig;
  }
};

}  // namespace

Expression simplify(const Expression& e) {
  Expression cur = e;
  for (int pass = 0; pass < kMaxPasses; ++pass) {
    Expression next = SimplifyPass().run(cur);
    if (next.equals(cur)) break;
    cur = next;
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Formatting
// ---------------------------------------------------------------------------

std::string format_double(double v, int precision) {
  if (precision < 1) throw ConfigError("precision must be >= 1");
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v,
                           std::chars_format::general, precision);
  return std::string(buf, res.ptr);
}

std::string format_double_exact(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

// Precedence: sum = 1, product = 2, unary prefix = 3, atoms/calls = 4.
int precedence(Kind k) {
  switch (k) {
    case Kind::Add:
    case Kind::Sub:
      return 1;
    case Kind::Mul:
    case Kind::Div:
      return 2;
    case Kind::Neg:
      return 3;
    default:
      return 4;
  }
}

struct Formatter {
  int precision;
  std::span<const std::string> names;

  std::string var_name(int i) const {
    if (i < static_cast<int>(names.size())) return names[static_cast<std::size_t>(i)];
    return "x" + std::to_string(i + 1);
  }

  std::string number(double v) const {
    std::string s = format_double(v, precision);
    return s;
  }

  // True if the rendering of e starts with a minus sign.
  static bool renders_negative(const Expression& e) {
    if (e.kind() == Kind::Neg) return true;
    if (e.kind() == Kind::Constant) return std::signbit(e.value()) && e.value() != 0.0;
    if (e.kind() == Kind::Mul || e.kind() == Kind::Div)
      return renders_negative(e.children()[0]);
    return false;
  }

  std::string render(const Expression& e, int parent_prec) const {
    std::string s = render_raw(e);
    const int prec = precedence(e.kind());
    if (prec < parent_prec ||
        (parent_prec >= 2 && renders_negative(e) && prec <= 3)) {
      return "(" + s + ")";
    }
    return s;
  }

  std::string render_raw(const Expression& e) const {
    switch (e.kind()) {
      case Kind::Constant:
        return number(e.value());
      case Kind::Variable:
        return var_name(e.var_index());
      case Kind::Add:
      case Kind::Sub: {
        const auto& l = e.children()[0];
        const auto& r = e.children()[1];
        std::string left = render(l, 1);
        bool minus = e.kind() == Kind::Sub;
        Expression rhs = r;
        if (e.kind() == Kind::Add && renders_negative(r)) {
          // a + (-b) prints as a - b
          if (r.kind() == Kind::Neg) {
            rhs = r.children()[0];
            minus = true;
          } else if (r.kind() == Kind::Constant) {
            rhs = Expression::constant(-r.value());
            minus = true;
          } else if (r.kind() == Kind::Mul &&
                     r.children()[0].kind() == Kind::Constant) {
            rhs = Expression::mul(
                Expression::constant(-r.children()[0].value()),
                r.children()[1]);
            minus = true;
          }
        }
        return left + (minus ? " - " : " + ") + render(rhs, 2);
      }
      case Kind::Mul: {
        // First factor may carry its own sign; later factors get parens when
        // they would start with '-'.
        return render(e.children()[0], 2) + "*" + render(e.children()[1], 3);
      }
      case Kind::Div:
        return render(e.children()[0], 2) + "/" + render(e.children()[1], 3);
      case Kind::Neg:
        return "-" + render(e.children()[0], 3);
      case Kind::Cos:
        return "cos(" + render(e.children()[0], 0) + ")";
      case Kind::Exp:
        return "exp(" + render(e.children()[0], 0) + ")";
      case Kind::Log:
        return "log(" + render(e.children()[0], 0) + ")";
      case Kind::Sqrt:
        return "sqrt(" + render(e.children()[0], 0) + ")";
      case Kind::Square: {
        const auto& c = e.children()[0];
        if (precedence(c.kind()) == 4 && !renders_negative(c)) {
          return render_raw(c) + "^2";
        }
        return "(" + render_raw(c) + ")^2";
      }
    }
    return "?";
  }
};

}  // namespace

std::string format_expr(const Expression& e, int precision,
                        std::span<const std::string> names) {
  if (precision < 1) throw ConfigError("format precision must be >= 1");
  Formatter f{precision, names};
  return f.render_raw(e);
}

// ---------------------------------------------------------------------------
// Complexity factors
// ---------------------------------------------------------------------------

ComplexityFactors ComplexityFactors::plain() {
  ComplexityFactors f;
  for (UnitKind k : kAllUnitKinds) f.cost[k] = 1.0;
  return f;
}

ComplexityFactors ComplexityFactors::motor() {
  ComplexityFactors f;
  f.cost[UnitKind::AddSub] = 1.0;
  f.cost[UnitKind::Mul] = 2.0;
  f.cost[UnitKind::Div] = 5.0;
  f.cost[UnitKind::Square] = 2.0;
  f.cost[UnitKind::Log] = 5.0;
  f.cost[UnitKind::Sqrt] = 3.0;
  f.cost[UnitKind::Exp] = 5.0;
  f.cost[UnitKind::Cos] = 10.0;
  return f;
}

double ComplexityFactors::at(UnitKind k) const {
  auto it = cost.find(k);
  if (it == cost.end()) {
    throw ConfigError(std::string("no complexity factor for unit kind '") +
                      unit_name(k) + "'");
  }
  return it->second;
}

void ComplexityFactors::validate() const {
  for (const auto& [k, c] : cost) {
    if (!(c > 0.0)) {
      throw ConfigError(std::string("complexity factor for '") + unit_name(k) +
                        "' must be positive");
    }
  }
}

nlohmann::json ComplexityFactors::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, c] : cost) j[unit_name(k)] = c;
  return j;
}

ComplexityFactors ComplexityFactors::from_json(const nlohmann::json& j) {
  // Unlisted kinds default to cost 1 so that partial tables (e.g. only cos)
  // follow the usual "others stay plain" convention.
  ComplexityFactors f = ComplexityFactors::plain();
  for (auto it = j.begin(); it != j.end(); ++it) {
    f.cost[unit_from_name(it.key())] = it.value().get<double>();
  }
  f.validate();
  return f;
}

double complexity_score(const std::map<UnitKind, double>& counts,
                        const ComplexityFactors& factors) {
  double total = 0.0;
  for (const auto& [kind, count] : counts) {
    if (count < 0) throw ConfigError("unit counts must be non-negative");
    if (count == 0) continue;
    total += factors.at(kind) * count;
  }
  return total;
}

}  // namespace ieql
