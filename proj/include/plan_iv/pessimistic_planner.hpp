#pragma once

#include "plan_iv/aggregated_mdp.hpp"
#include "plan_iv/iv_estimation.hpp"

#include "json.hpp"

#include <limits>
#include <string>
#include <vector>

namespace plan_iv {

/// A point of the discretized confidence region. Provenance is `center`,
/// `axis_extreme(h, target, axis, sign)` or `random_boundary(seed)`.
struct ModelCandidate {
  AggregatedModel model;
  std::string provenance;
};

/// θ̂ for every stage and target. Stages fitted without transition targets get Θ_G = 0.
AggregatedModel center_model(const std::vector<StageFits>& fits, Index state_dim);

/// Center, then for every (stage, target) the two boundary points along each eigenvector
/// of A with nonzero eigenvalue, then `n_random` joint boundary draws. A rank-deficient A
/// contributes only its range axes.
std::vector<ModelCandidate> enumerate_candidates(const std::vector<StageFits>& fits,
                                                 Index state_dim, std::size_t n_random,
                                                 std::uint64_t seed);

/// True when every component of the candidate lies in its ellipsoid.
bool candidate_in_region(const ModelCandidate& candidate, const std::vector<StageFits>& fits,
                         double slack = 1e-8);

/// A finite policy class, each member evaluated under its own context. Most applications
/// share one context; the two-phase bandit uses one per second-phase rule.
struct PlanningProblem {
  std::vector<PlanningContext> contexts;
  std::vector<MarkovPolicy> policies;
  std::vector<std::size_t> context_of;
  std::vector<std::string> labels;

  static PlanningProblem single(PlanningContext ctx, std::vector<MarkovPolicy> policies);
  std::size_t size() const { return policies.size(); }
  const PlanningContext& context(std::size_t k) const { return contexts.at(context_of.at(k)); }
  void validate() const;
};

double evaluate_member(const PlanningProblem& problem, std::size_t k,
                       const AggregatedModel& model, const EvalConfig& cfg);
/// Affine value map θ_r ↦ J for H = 1 members.
LinearValue member_value_h1(const PlanningProblem& problem, std::size_t k);

SearchResult optimal_policy_search(const PlanningProblem& problem, const AggregatedModel& model,
                                   const EvalConfig& cfg);
SubOptimality suboptimality(const PlanningProblem& problem, const AggregatedModel& true_model,
                            std::size_t chosen, const EvalConfig& cfg);

struct PessimisticValue {
  double value = 0.0;
  std::size_t argmin = 0;
};

PessimisticValue pessimistic_value(const PlanningContext& ctx, const MarkovPolicy& policy,
                                   const std::vector<ModelCandidate>& candidates,
                                   const EvalConfig& cfg);

struct PlanResult {
  std::size_t policy_index = 0;
  std::string policy_label;
  nlohmann::json policy;  // grid/table form of π̂
  double value = 0.0;  // Ĵ(π̂)
  std::size_t argmin_candidate = 0;
  std::vector<double> values;                    // Ĵ(π) per policy
  std::vector<std::size_t> argmins;              // minimizing candidate per policy
  std::vector<std::vector<double>> value_matrix;  // [policy][candidate]
  std::vector<std::string> candidates;           // provenance tags
  std::vector<bool> unidentified;                // per policy, exact-LCB mode only
  std::string mode;                              // mc | exact_h1 | lcb_h1
  EvalConfig eval;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

PlanResult plan(const PlanningProblem& problem, const std::vector<ModelCandidate>& candidates,
                const EvalConfig& cfg, std::uint64_t seed = 0);

struct LcbValue {
  double value = 0.0;
  bool unidentified_direction = false;
};

/// Exact min of ⟨μ, θ⟩ + offset over the ellipsoid: θ̂ᵀμ + offset − c·√(μᵀA⁺μ), or −∞ with the
/// flag set when μ leaves range(A) and c > 0.
LcbValue lcb(const ConfidenceEllipsoid& ellipsoid, const LinearValue& value);

struct LcbPlan {
  std::size_t index = 0;
  std::vector<LcbValue> values;
};

/// H = 1: per-action LCB of the marginal reward, argmax with lowest-index ties.
LcbPlan plan_lcb_h1(const PlanningContext& ctx, const ConfidenceEllipsoid& reward_ellipsoid,
                    const std::vector<Vec>& action_grid);

/// H = 1 exact pessimistic planning over an arbitrary finite policy class.
PlanResult plan_lcb_policies(const PlanningProblem& problem,
                             const ConfidenceEllipsoid& reward_ellipsoid);

}  // namespace plan_iv
