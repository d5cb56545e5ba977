#pragma once

// Generative pieces shared by the data-collection environment and the planner's
// marginalized model: agent populations, best-response rules, observation channels,
// feature maps and the per-stage linear parameters.

#include "plan_iv/core.hpp"

#include <functional>
#include <optional>
#include <string_view>
#include <vector>

namespace plan_iv {

struct WeightedPoint {
  Vec value;
  double weight = 0.0;
};

/// A distribution over ℝ^dim that is either finitely supported (enumerable, used by
/// the exact evaluators) or only samplable.
class Distribution {
 public:
  using Sampler = std::function<Vec(Rng&)>;

  static Distribution finite(std::vector<WeightedPoint> support);
  static Distribution point_mass(Vec value);
  static Distribution sampled(Index dim, Sampler sampler);
  static Distribution standard_normal(Index dim);

  /// Exactly one categorical draw for finite support; otherwise whatever the sampler uses.
  Vec sample(Rng& rng) const;

  bool finite_support() const { return !support_.empty(); }
  const std::vector<WeightedPoint>& support() const { return support_; }
  Index dim() const { return dim_; }

 private:
  Index dim_ = 0;
  std::vector<WeightedPoint> support_;
  std::vector<double> weights_;
  Sampler sampler_;
};

/// Independent product: draws x ~ first, y ~ second and returns [x; y].
Distribution product(const Distribution& first, const Distribution& second);

enum class AgentMode { closed_form_linear, finite_argmax };

AgentMode parse_agent_mode(std::string_view name);
std::string_view to_string(AgentMode mode);

using AgentUtility =
    std::function<double(const Vec& s, const Vec& a, const Vec& type, const Vec& b)>;

/// Myopic best response of an agent with private type `type` to the principal's action.
struct AgentModel {
  AgentMode mode = AgentMode::closed_form_linear;
  /// closed_form_linear: W read from the type; the response is Wᵀa.
  std::function<Mat(const Vec& type)> effort_matrix;
  /// finite_argmax: candidates are scored by `utility`, lowest index wins ties.
  std::vector<Vec> candidates;
  AgentUtility utility;

  static AgentModel closed_form_linear(std::function<Mat(const Vec&)> effort_matrix);
  static AgentModel finite_argmax(std::vector<Vec> candidates, AgentUtility utility);

  Vec respond(const Vec& s, const Vec& a, const Vec& type) const;
};

/// F_h: distribution of the observation given (s, a, type, b).
class ObservationChannel {
 public:
  using MeanFn = std::function<Vec(const Vec& s, const Vec& a, const Vec& type, const Vec& b)>;
  using OutcomesFn = std::function<std::vector<WeightedPoint>(
      const Vec& s, const Vec& a, const Vec& type, const Vec& b)>;

  /// o = mean(s,a,i,b) + noise_scale·ξ, ξ ~ N(0, I) independent of the type.
  static ObservationChannel additive_gaussian(Index dim, MeanFn mean, double noise_scale);
  static ObservationChannel deterministic(Index dim, MeanFn mean) {
    return additive_gaussian(dim, std::move(mean), 0.0);
  }
  /// Finitely many outcomes per (s,a,i,b); one categorical draw per call.
  static ObservationChannel finite(Index dim, OutcomesFn outcomes);

  Vec sample(const Vec& s, const Vec& a, const Vec& type, const Vec& b, Rng& rng) const;

  /// True when `outcomes` enumerates the channel exactly.
  bool enumerable() const { return static_cast<bool>(outcomes_) || noise_scale_ == 0.0; }
  std::vector<WeightedPoint> outcomes(const Vec& s, const Vec& a, const Vec& type,
                                      const Vec& b) const;

  Index dim() const { return dim_; }
  double noise_scale() const { return noise_scale_; }

  /// Same channel, reading the agent type through `type_map` first.
  ObservationChannel remap_type(std::function<Vec(const Vec&)> type_map) const;

 private:
  Index dim_ = 0;
  MeanFn mean_;
  OutcomesFn outcomes_;
  double noise_scale_ = 0.0;
};

/// φ_x(s,a,o) ∈ ℝ^{n_x} (covariate) and ψ_z(s,a) ∈ ℝ^{n_z} (instrument).
struct FeatureMaps {
  Index n_x = 0;
  Index n_z = 0;
  std::function<Vec(const Vec& s, const Vec& a, const Vec& o)> phi_x;
  std::function<Vec(const Vec& s, const Vec& a)> psi_z;
};

/// Population inputs of one stage, known to the principal at planning time.
struct StageDynamics {
  Distribution population;
  AgentModel agent;
  ObservationChannel channel;
  std::function<double(const Vec& type)> reward_confounder;  // f_1h
  std::function<Vec(const Vec& type)> state_confounder;      // f_2h
};

struct PlanningContext {
  int horizon = 1;
  Index state_dim = 1;
  std::vector<Vec> action_set;
  FeatureMaps features;
  std::vector<StageDynamics> stages;
  double sigma = 0.0;
  Distribution initial_state;
  /// Optional closed form of E[φ_x(s,a,o)] over the population and channel.
  std::function<Vec(int h, const Vec& s, const Vec& a)> mean_feature;

  /// Cheap structural checks (dimensions, σ ≥ 0, nonempty action set).
  void validate() const;
  const StageDynamics& stage(int h) const;
};

/// θ_r,h and Θ_G,h: R_h(x) = ⟨φ_x, θ_r,h⟩, G_h(x) = Θ_G,h φ_x.
struct StageParams {
  Vec theta_r;
  Mat theta_g;
};

/// A candidate marginalized model: the linear parameters of every stage. The population
/// inputs come from the PlanningContext it is evaluated against.
struct AggregatedModel {
  std::vector<StageParams> stages;

  void validate(const PlanningContext& ctx) const;
};

/// Full generative description used for data collection.
struct StrategicMdpSpec {
  PlanningContext env;
  AggregatedModel truth;
  double eps_scale = 0.0;

  int horizon() const { return env.horizon; }
  void validate() const;
};

struct ConfounderMeanReport {
  /// max over stages and coordinates of |mean| / (std/√n); ≤ 5 passes the mean-zero contract.
  double max_z_score = 0.0;
  bool passed = false;
};

ConfounderMeanReport verify_confounder_mean_zero(const PlanningContext& ctx, std::size_t n_draws,
                                                 std::uint64_t seed);

/// Replaces every stage's population by the product population × independent copy, with
/// f_1h and f_2h reading the copy. Keeps the marginal law of every variable while removing
/// the correlation between the confounders and the observation.
PlanningContext decouple_confounders(const PlanningContext& ctx);

}  // namespace plan_iv
