#pragma once

#include "plan_iv/model.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace plan_iv {

/// Markov policy stored as a table over a finite state grid; off-grid states use the
/// nearest grid point (lowest index on ties).
class MarkovPolicy {
 public:
  using Table = std::vector<std::vector<std::vector<double>>>;  // [h][grid point][action]

  MarkovPolicy(std::vector<Vec> grid, Table table);

  /// Always plays `action`.
  static MarkovPolicy constant(int horizon, Index state_dim, std::size_t n_actions,
                               std::size_t action);
  /// choice[h][g] is the action played at grid point g in stage h.
  static MarkovPolicy deterministic(std::vector<Vec> grid,
                                    const std::vector<std::vector<std::size_t>>& choice,
                                    std::size_t n_actions);

  const std::vector<double>& probabilities(int h, const Vec& s) const;
  std::size_t nearest(const Vec& s) const;

  int horizon() const { return static_cast<int>(table_.size()); }
  std::size_t n_actions() const { return table_.front().front().size(); }
  const std::vector<Vec>& grid() const { return grid_; }
  const Table& table() const { return table_; }

  nlohmann::json to_json() const;
  static MarkovPolicy from_json(const nlohmann::json& j);

 private:
  std::vector<Vec> grid_;
  Table table_;
};

/// Every deterministic grid policy: n_actions^(H·|grid|) of them, enumerated with the first
/// (stage, grid point) cell varying slowest.
std::vector<MarkovPolicy> enumerate_deterministic_policies(const std::vector<Vec>& grid,
                                                           int horizon, std::size_t n_actions,
                                                           std::size_t max_count = 1u << 16);

struct ValueEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t n_rollouts = 0;
};

struct ScalarEstimate {
  double value = 0.0;
  double standard_error = 0.0;
};

struct EvalConfig {
  std::size_t n_rollouts = 4000;
  std::uint64_t seed = 0;
  bool crn = true;
  bool exact_h1 = false;

  static EvalConfig from_json(const nlohmann::json& j);
  static EvalConfig from_json(const nlohmann::json& j, const EvalConfig& base);
  nlohmann::json to_json() const;
};

/// J(θ) = ⟨feature, θ_r⟩ + offset: the H = 1 value of a fixed policy is affine in θ_r.
struct LinearValue {
  Vec feature;
  double offset = 0.0;

  double at(const Vec& theta_r) const { return feature.dot(theta_r) + offset; }
};

/// E[φ_x(s,a,o)] and E[f_1h] over the stage population and channel. Uses the context's
/// closed form when present, else enumerates a finite population through an enumerable
/// channel.
LinearValue mean_feature(const PlanningContext& ctx, int h, const Vec& s, const Vec& a);

std::optional<double> marginal_reward_exact(const PlanningContext& ctx,
                                            const AggregatedModel& model, int h, const Vec& s,
                                            const Vec& a);
ScalarEstimate marginal_reward_mc(const PlanningContext& ctx, const AggregatedModel& model, int h,
                                  const Vec& s, const Vec& a, std::size_t n_mc, Rng& rng);
/// R̄_h(s,a): exact weighted sum when the population is finite and the channel enumerable,
/// Monte Carlo otherwise.
ScalarEstimate marginal_reward(const PlanningContext& ctx, const AggregatedModel& model, int h,
                               const Vec& s, const Vec& a, std::size_t n_mc, Rng& rng);

/// One draw from the Gaussian mixture P̄_h(·|s,a).
Vec sample_next_state(const PlanningContext& ctx, const AggregatedModel& model, int h,
                      const Vec& s, const Vec& a, Rng& rng);

/// Rollout t uses substream (seed, t); passing the same seed for two models couples them.
ValueEstimate evaluate_policy_mc(const PlanningContext& ctx, const AggregatedModel& model,
                                 const MarkovPolicy& policy, std::size_t n_rollouts,
                                 std::uint64_t seed);

/// E_{s∼ρ0} Σ_a π(a|s) [μ(s,a), E f_1]; needs H = 1 and a finitely supported ρ0.
LinearValue policy_value_h1(const PlanningContext& ctx, const MarkovPolicy& policy);
double evaluate_policy_exact_h1(const PlanningContext& ctx, const AggregatedModel& model,
                                const MarkovPolicy& policy);

/// Exact H = 1 value or coupled Monte Carlo mean, per `cfg`. `stream` picks the seed when
/// common random numbers are off.
double evaluate_policy(const PlanningContext& ctx, const AggregatedModel& model,
                       const MarkovPolicy& policy, const EvalConfig& cfg, std::uint64_t stream = 0);

struct SearchResult {
  std::size_t index = 0;
  double value = 0.0;
  std::vector<double> values;
};

SearchResult optimal_policy_search(const PlanningContext& ctx, const AggregatedModel& model,
                                   const std::vector<MarkovPolicy>& policy_class,
                                   const EvalConfig& cfg);

struct SubOptimality {
  double raw = 0.0;
  double reported = 0.0;  // max(0, raw)
  double j_star = 0.0;
  double j_policy = 0.0;
  std::size_t optimal_index = 0;
};

SubOptimality suboptimality(const PlanningContext& ctx, const AggregatedModel& true_model,
                            const MarkovPolicy& policy,
                            const std::vector<MarkovPolicy>& policy_class, const EvalConfig& cfg);

}  // namespace plan_iv
