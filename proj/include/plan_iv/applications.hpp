#pragma once

#include "plan_iv/pessimistic_planner.hpp"
#include "plan_iv/smdp_env.hpp"

#include "json.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace plan_iv {

/// Application name, its knobs and the sweep it is run over. `params` holds the
/// app-specific settings; builders fill in defaults for anything missing.
struct AppRecipe {
  std::string name;
  nlohmann::json params = nlohmann::json::object();
  std::vector<std::size_t> k_sweep{250, 500, 1000, 2000, 4000};
  std::size_t n_seeds = 1;
  std::uint64_t master_seed = 0;

  static AppRecipe from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  /// Name recognized and K-sweep strictly increasing.
  void validate() const;
};

/// Everything one application needs: the data-collection environment, the behavior policy
/// and the planner's side (known population inputs plus the policy class).
struct AppInstance {
  std::string name;
  StrategicMdpSpec spec;
  BehaviorPolicy behavior;
  PlanningProblem problem;
  /// Action grid for per-action LCB planning (H = 1 apps with one context).
  std::vector<Vec> action_grid;
  nlohmann::json params;  // recipe knobs after defaults

  const FeatureMaps& features() const { return spec.env.features; }
  int horizon() const { return spec.env.horizon; }
};

/// Strategic regression: type i = (z, W) with z = m0 + u, b = Wᵀa, o = z + Wb,
/// r = ⟨o, θ*⟩ + κ·⟨γ, u⟩ + ε. x = o, z = a, actions on the unit circle.
AppInstance build_strategic_regression(const nlohmann::json& params);

/// Two-phase bandit: announce a1, observe o, then pick a2 by a rule on o. The second phase
/// lives in the channel output (o, a2); x = (1[a2=1], o·1[a2=0], o·1[a2=1]), z = one-hot(a1).
AppInstance build_strategic_bandit(const nlohmann::json& params);

/// Recommendation with noncompliant agents: o = b, x = (1, s, b), z = (1, s, a).
AppInstance build_noncompliant_rec(const nlohmann::json& params);

using AppBuilder = std::function<AppInstance(const nlohmann::json&)>;
const std::map<std::string, AppBuilder>& app_registry();
AppInstance build_app(const std::string& name, const nlohmann::json& params);

/// Same application with every confounder replaced by an independent copy of the type.
AppInstance unconfounded_twin(const AppInstance& app);

enum class PlannerMode { lcb_h1, exact_h1, mc };

PlannerMode parse_planner_mode(std::string_view name);
std::string_view to_string(PlannerMode mode);

struct PipelineSettings {
  FitOptions fit;
  PlannerMode planner = PlannerMode::lcb_h1;
  std::size_t n_random_candidates = 0;
  EvalConfig eval;
  /// Calibrate c0 on the unconfounded twin before fitting (ignored when c0 is pinned).
  bool calibrate = true;
  std::size_t calibration_reps = 100;

  /// Keys absent from `j` keep their value in `base`.
  static PipelineSettings from_json(const nlohmann::json& j);
  static PipelineSettings from_json(const nlohmann::json& j, const PipelineSettings& base);
  nlohmann::json to_json() const;
};

/// Default planner for the app: exact LCB for H = 1, Monte Carlo otherwise.
PipelineSettings default_settings(const AppInstance& app);

struct C0Calibration {
  Calibration reward;
  std::optional<Calibration> transition;
};

/// One c0 per target family from `reps` unconfounded replications at sample size K.
C0Calibration calibrate_app(const AppInstance& app, std::size_t K, const PipelineSettings& s,
                            std::size_t reps, std::uint64_t seed);

struct EstimatorMetrics {
  Estimator estimator = Estimator::iv;
  double pmse = 0.0;
  double param_err = 0.0;
  double subopt = 0.0;
  double subopt_raw = 0.0;
  bool coverage_hit = false;
  bool pessimism_hit = false;
  double j_hat = 0.0;
  double j_star = 0.0;
  std::vector<StageFits> fits;
  PlanResult plan;
};

struct RunResult {
  std::size_t K = 0;
  std::uint64_t seed = 0;
  double c0_reward = 0.0;
  double c0_transition = 0.0;
  std::vector<EstimatorMetrics> estimators;  // iv, then ols
};

/// collect → fit (IV and OLS on the same data) → plan → score against the true model.
/// Only the scoring step reads the true parameters.
RunResult run_pipeline(const AppInstance& app, std::size_t K, std::uint64_t seed,
                       const PipelineSettings& settings);

/// Plans on already fitted confidence sets.
PlanResult plan_with_fits(const AppInstance& app, const std::vector<StageFits>& fits,
                          const PipelineSettings& settings, std::uint64_t seed);

/// Mean over fitted components of projected_mse against the truth; designs use the real
/// instruments for both estimators.
double pmse_against_truth(const AppInstance& app, const ObservableDataset& data,
                          const std::vector<StageFits>& fits);
/// √(Σ over components ‖θ̂ − θ*‖²).
double param_error(const AppInstance& app, const std::vector<StageFits>& fits);
/// ‖Θ̂_G − Θ*_G‖_F summed in squares over stages.
double transition_error(const AppInstance& app, const std::vector<StageFits>& fits);
bool truth_covered(const AppInstance& app, const std::vector<StageFits>& fits);

}  // namespace plan_iv
