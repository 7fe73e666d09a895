#include "ieql/selection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace ieql {

const char* criterion_name(Criterion c) {
  switch (c) {
    case Criterion::Vint: return "vint";
    case Criterion::VintS: return "vint-s";
    case Criterion::VintEx: return "vint-ex";
  }
  return "?";
}

Criterion criterion_from_name(const std::string& name) {
  if (name == "vint") return Criterion::Vint;
  if (name == "vint-s" || name == "vints") return Criterion::VintS;
  if (name == "vint-ex" || name == "vintex") return Criterion::VintEx;
  throw ConfigError("unknown selection criterion '" + name + "'");
}

void compute_complexity(std::vector<Candidate>& candidates,
                        const ComplexityFactors& factors) {
  for (auto& c : candidates)
    c.complexity = complexity_score(c.weight_counts, factors);
}

namespace {

template <class Get, class Set>
void normalize_one(std::vector<Candidate>& cs, NormalizeMode mode, Get get,
                   Set set) {
  std::vector<double> vals;
  for (const auto& c : cs) {
    if (auto v = get(c)) vals.push_back(*v);
  }
  if (vals.empty()) return;
  if (mode == NormalizeMode::MinMax) {
    const double lo = *std::min_element(vals.begin(), vals.end());
    const double hi = *std::max_element(vals.begin(), vals.end());
    for (auto& c : cs) {
      if (auto v = get(c)) set(c, hi > lo ? (*v - lo) / (hi - lo) : 0.0);
    }
  } else {
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(vals.size());
    const double sd = std::sqrt(var);
    for (auto& c : cs) {
      if (auto v = get(c)) set(c, sd > 0 ? (*v - mean) / sd : 0.0);
    }
  }
}

}  // namespace

void normalize_metrics(std::vector<Candidate>& candidates, NormalizeMode mode) {
  if (candidates.empty())
    throw ConfigError("cannot normalize an empty candidate set");
  using OD = std::optional<double>;
  normalize_one(
      candidates, mode, [](const Candidate& c) -> OD { return c.nu_int; },
      [](Candidate& c, double v) { c.nt_int = v; });
  normalize_one(
      candidates, mode, [](const Candidate& c) -> OD { return c.complexity; },
      [](Candidate& c, double v) { c.nt_s = v; });
  normalize_one(
      candidates, mode, [](const Candidate& c) -> OD { return c.nu_ex; },
      [](Candidate& c, double v) { c.nt_ex = v; });
}

double selection_score(const Candidate& c, Criterion crit) {
  switch (crit) {
    case Criterion::Vint:
      return c.nt_int * c.nt_int;
    case Criterion::VintS:
      return c.nt_int * c.nt_int + c.nt_s * c.nt_s;
    case Criterion::VintEx:
      return c.nt_int * c.nt_int + c.nt_ex * c.nt_ex;
  }
  return 0.0;
}

const Candidate& select(const std::vector<Candidate>& candidates,
                        Criterion crit) {
  if (candidates.empty()) throw ConfigError("cannot select from an empty set");
  if (crit == Criterion::VintEx) {
    for (const auto& c : candidates) {
      if (!c.nu_ex) {
        throw ConfigError(
            "vint-ex requires an extrapolation error on every candidate");
      }
    }
  }
  const Candidate* best = nullptr;
  double best_score = std::numeric_limits<double>::infinity();
  for (const auto& c : candidates) {
    const double score = selection_score(c, crit);
    if (best == nullptr || score < best_score ||
        (score == best_score &&
         (c.active_params < best->active_params ||
          (c.active_params == best->active_params &&
           (c.lambda < best->lambda ||
            (c.lambda == best->lambda && c.index < best->index)))))) {
      best = &c;
      best_score = score;
    }
  }
  return *best;
}

std::vector<Candidate> pareto_front(const std::vector<Candidate>& candidates) {
  std::vector<Candidate> front;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    bool keep = true;
    for (std::size_t j = 0; j < candidates.size() && keep; ++j) {
      if (j == i) continue;
      const auto& o = candidates[j];
      const bool leq = o.complexity <= c.complexity && o.nu_int <= c.nu_int;
      const bool strict = o.complexity < c.complexity || o.nu_int < c.nu_int;
      if (leq && strict) keep = false;
      // identical metrics: keep only the first in provenance order
      if (j < i && o.complexity == c.complexity && o.nu_int == c.nu_int)
        keep = false;
    }
    if (keep) front.push_back(c);
  }
  std::stable_sort(front.begin(), front.end(),
                   [](const Candidate& a, const Candidate& b) {
                     return a.complexity < b.complexity;
                   });
  return front;
}

nlohmann::json candidate_to_json(const Candidate& c) {
  nlohmann::json j;
  j["index"] = c.index;
  j["lambda"] = c.lambda;
  j["seed"] = c.seed;
  j["expr"] = c.expr.to_json();
  j["expr_str"] = c.expr_str;
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [k, v] : c.weight_counts) counts[unit_name(k)] = v;
  j["weight_counts"] = counts;
  j["active_params"] = c.active_params;
  j["nu_int"] = c.nu_int;
  if (c.nu_ex) j["nu_ex"] = *c.nu_ex;
  return j;
}

Candidate candidate_from_json(const nlohmann::json& j) {
  Candidate c;
  c.index = j.at("index").get<int>();
  c.lambda = j.at("lambda").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.expr = Expression::from_json(j.at("expr"));
  c.expr_str = j.at("expr_str").get<std::string>();
  for (auto it = j.at("weight_counts").begin(); it != j.at("weight_counts").end(); ++it)
    c.weight_counts[unit_from_name(it.key())] = it.value().get<double>();
  c.active_params = j.at("active_params").get<long>();
  c.nu_int = j.at("nu_int").get<double>();
  if (j.contains("nu_ex")) c.nu_ex = j.at("nu_ex").get<double>();
  return c;
}

void write_pareto_csv(const std::vector<Candidate>& front,
                      const std::string& path,
                      const std::string& manifest_hash) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write pareto csv: " + path);
  if (!manifest_hash.empty()) out << "# manifest_hash=" << manifest_hash << "\n";
  out << "complexity,val_rmse,active_params,lambda,expression\n";
  for (const auto& c : front) {
    out << format_double_exact(c.complexity) << ','
        << format_double_exact(c.nu_int) << ',' << c.active_params << ','
        << format_double_exact(c.lambda) << ",\"" << format_expr(c.expr, 6)
        << "\"\n";
  }
}

}  // namespace ieql
