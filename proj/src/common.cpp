#include "ieql/common.hpp"

namespace ieql {

const char* unit_name(UnitKind k) {
  switch (k) {
    case UnitKind::AddSub: return "+/-";
    case UnitKind::Mul: return "*";
    case UnitKind::Div: return "/";
    case UnitKind::Square: return "x^2";
    case UnitKind::Log: return "log";
    case UnitKind::Sqrt: return "sqrt";
    case UnitKind::Exp: return "exp";
    case UnitKind::Cos: return "cos";
  }
  return "?";
}

UnitKind unit_from_name(const std::string& name) {
  if (name == "+/-" || name == "add" || name == "add_sub") return UnitKind::AddSub;
  if (name == "*" || name == "mul") return UnitKind::Mul;
  if (name == "/" || name == "div") return UnitKind::Div;
  if (name == "x^2" || name == "square" || name == "sq") return UnitKind::Square;
  if (name == "log") return UnitKind::Log;
  if (name == "sqrt") return UnitKind::Sqrt;
  if (name == "exp") return UnitKind::Exp;
  if (name == "cos") return UnitKind::Cos;
  throw ConfigError("unknown unit kind: '" + name + "'");
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double stable_sigmoid(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace ieql
