#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace ieql {

// ---------------------------------------------------------------------------
// Errors. Exit-code mapping for the CLI: ConfigError -> 1, DataError -> 2,
// NumericError -> 3.
// ---------------------------------------------------------------------------

struct ParseError : std::runtime_error {
  std::size_t position;
  ParseError(const std::string& msg, std::size_t pos)
      : std::runtime_error(msg), position(pos) {}
};

struct EvalDomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Atomic unit kinds. AddSub tags plain affine weights (output layer); the
// rest are the hidden-layer unit types.
// ---------------------------------------------------------------------------

enum class UnitKind { AddSub, Mul, Div, Square, Log, Sqrt, Exp, Cos };

inline constexpr UnitKind kAllUnitKinds[] = {
    UnitKind::AddSub, UnitKind::Mul,  UnitKind::Div, UnitKind::Square,
    UnitKind::Log,    UnitKind::Sqrt, UnitKind::Exp, UnitKind::Cos};

inline bool unit_is_unary(UnitKind k) {
  switch (k) {
    case UnitKind::Square:
    case UnitKind::Log:
    case UnitKind::Sqrt:
    case UnitKind::Exp:
    case UnitKind::Cos:
      return true;
    default:
      return false;
  }
}

inline bool unit_is_binary(UnitKind k) {
  return k == UnitKind::Mul || k == UnitKind::Div;
}

// Units whose exact domain is half-bounded with a singularity at the boundary.
// Div counts because its denominator uses the positive reciprocal branch.
inline bool unit_is_singular(UnitKind k) {
  return k == UnitKind::Log || k == UnitKind::Sqrt || k == UnitKind::Div;
}

const char* unit_name(UnitKind k);
UnitKind unit_from_name(const std::string& name);

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 is bit-identical across platforms; the
// distribution transforms are hand-rolled because the std ones are not.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform on the open interval (0,1); never returns an endpoint.
  double u01() {
    return (static_cast<double>(eng_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  double normal(double mean, double stddev) {
    const double u1 = u01();
    const double u2 = u01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  // Index in [0, n); modulo bias is negligible for our n.
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(eng_() % n);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[index(i)]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

std::uint64_t splitmix64(std::uint64_t x);

// Independent stream seed for worker `salt` under a master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t salt) {
  return splitmix64(master ^ splitmix64(salt + 0x9E3779B97F4A7C15ULL));
}

double stable_sigmoid(double x);

inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace ieql
