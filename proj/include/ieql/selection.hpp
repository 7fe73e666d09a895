#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ieql/expr.hpp"
#include "json.hpp"

namespace ieql {

/// One trained equation: the unit of model selection.
struct Candidate {
  Expression expr;                           // simplified extraction
  std::string expr_str;                      // full-precision rendering
  std::map<UnitKind, double> weight_counts;  // surviving weights per kind
  long active_params = 0;
  double nu_int = 0.0;                 // validation RMSE
  std::optional<double> nu_ex;         // extrapolation RMSE, if points exist
  double lambda = 0.0;                 // provenance
  std::uint64_t seed = 0;
  int index = 0;

  double complexity = 0.0;  // filled by compute_complexity
  double nt_int = 0.0, nt_ex = 0.0, nt_s = 0.0;  // filled by normalize_metrics
};

enum class Criterion { Vint, VintS, VintEx };
const char* criterion_name(Criterion c);
Criterion criterion_from_name(const std::string& name);

enum class NormalizeMode { MinMax, ZScore };

/// Fill Candidate::complexity = sum_u c_u * surviving weights of kind u.
void compute_complexity(std::vector<Candidate>& candidates,
                        const ComplexityFactors& factors);

/// Fill the normalized metric fields. Min-max per metric over the candidate
/// set; a degenerate metric (max == min) normalizes to 0 for everyone.
/// ZScore is the secondary mode, off by default.
void normalize_metrics(std::vector<Candidate>& candidates,
                       NormalizeMode mode = NormalizeMode::MinMax);

double selection_score(const Candidate& c, Criterion crit);

/// Argmin of the requested criterion over normalized candidates. Ties break
/// on lower active-parameter count, then lower lambda, then lower index.
const Candidate& select(const std::vector<Candidate>& candidates,
                        Criterion crit);

/// Non-dominated candidates in (complexity, nu_int), sorted by complexity.
/// Exact duplicates keep their first representative.
std::vector<Candidate> pareto_front(const std::vector<Candidate>& candidates);

nlohmann::json candidate_to_json(const Candidate& c);
Candidate candidate_from_json(const nlohmann::json& j);

void write_pareto_csv(const std::vector<Candidate>& front,
                      const std::string& path,
                      const std::string& manifest_hash = "");

}  // namespace ieql
