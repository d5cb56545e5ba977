#pragma once

#include "plan_iv/model.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace plan_iv {

/// What the principal records: (s_h, a_h, o_h, r_h) per stage plus the terminal state.
/// Deliberately has no field for the private type or the agent's action.
struct ObservableTrajectory {
  std::vector<Vec> states;  // H + 1
  std::vector<std::size_t> action_indices;
  std::vector<Vec> actions;
  std::vector<Vec> observations;
  std::vector<double> rewards;

  int horizon() const { return static_cast<int>(rewards.size()); }
};

/// Diagnostics that only simulation and evaluation code may read.
struct HiddenRecord {
  std::vector<Vec> types;
  std::vector<Vec> agent_actions;
};

struct Trajectory {
  ObservableTrajectory obs;
  HiddenRecord hidden;
};

/// The estimator-facing view of a dataset.
struct ObservableDataset {
  std::vector<ObservableTrajectory> trajectories;

  std::size_t size() const { return trajectories.size(); }
  int horizon() const;
  Index state_dim() const;
};

struct OfflineDataset {
  std::vector<Trajectory> trajectories;
  std::string behavior_policy_tag;
  std::uint64_t seed = 0;

  std::size_t size() const { return trajectories.size(); }
  int horizon() const;
  ObservableDataset observable() const;
  /// Checks K ≥ 1, equal horizons and per-stage array lengths.
  void validate() const;
};

/// Behavior policy on the flat-encoded history (see encode_history).
class BehaviorPolicy {
 public:
  using Fn = std::function<std::vector<double>(int h, const Vec& history)>;

  BehaviorPolicy(std::string tag, std::size_t n_actions, Fn fn);

  static BehaviorPolicy uniform(std::size_t n_actions);
  /// Same action distribution at every stage, regardless of history.
  static BehaviorPolicy stationary(std::vector<double> probs, std::string tag = "stationary");

  /// Validated probability vector (nonnegative, sums to 1 within 1e-12).
  std::vector<double> probabilities(int h, const Vec& history) const;
  const std::string& tag() const { return tag_; }
  std::size_t n_actions() const { return n_actions_; }

 private:
  std::string tag_;
  std::size_t n_actions_;
  Fn fn_;
};

/// [s_1, a_1, o_1, ..., s_{h-1}, a_{h-1}, o_{h-1}, 0 ... 0, s_h]: past (state, action index,
/// observation) triples, zero padded to a fixed length H·(d1 + 1 + d_o) + d1.
Vec encode_history(const ObservableTrajectory& partial, int h, int horizon, Index state_dim,
                   Index obs_dim);

struct StepOutcome {
  Vec observation;
  double reward = 0.0;
  Vec next_state;
  Vec type;
  Vec agent_action;
};

Vec best_response(const StrategicMdpSpec& spec, int h, const Vec& s, const Vec& a,
                  const Vec& type);

/// One stage of the strategic MDP. Draw order is fixed: type, channel noise, ε, η.
StepOutcome step(const StrategicMdpSpec& spec, int h, const Vec& s, const Vec& a, Rng& rng);

/// K trajectories; trajectory k uses the substream (seed, k) so the result does not depend
/// on scheduling.
OfflineDataset collect_dataset(const StrategicMdpSpec& spec, const BehaviorPolicy& policy,
                               std::size_t n_trajectories, std::uint64_t seed);

/// JSON recipe for the generic confounded linear environment.
struct EnvRecipe {
  int horizon = 1;
  Index state_dim = 1;
  std::vector<Vec> action_set;
  std::string feature_map = "linear";  // linear | linear_intercept | calibration_1d
  double confounding_kappa = 1.0;
  double sigma = 0.1;
  double eps_scale = 0.1;
  double channel_noise = 0.0;
  std::uint64_t param_seed = 0;

  static EnvRecipe from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  /// z ∈ {−1, +1}, u ~ N(0,1), o = z + u, g = u, θ* = 1.
  static EnvRecipe calibration_1d();
};

StrategicMdpSpec make_confounded_linear_env(const EnvRecipe& recipe);

}  // namespace plan_iv
