#include "plan_iv/applications.hpp"

#include "plan_iv/parallel.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>

namespace plan_iv {

namespace {

Vec to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size()));
}

Vec scalar(double x) { return Vec::Constant(1, x); }

template <class T>
T param(const nlohmann::json& p, const char* key, T fallback) {
  try {
    return p.contains(key) ? p.at(key).get<T>() : fallback;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("bad value for '{}': {}", key, e.what()));
  }
}

std::vector<Vec> vec_list(const nlohmann::json& j) {
  std::vector<Vec> out;
  for (const auto& row : j) {
    if (row.is_number()) out.push_back(scalar(row.get<double>()));
    else out.push_back(to_vec(row.get<std::vector<double>>()));
  }
  return out;
}

nlohmann::json vec_list_json(const std::vector<Vec>& vs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& v : vs) out.push_back(std::vector<double>(v.begin(), v.end()));
  return out;
}

std::size_t nearest_index(const std::vector<Vec>& grid, const Vec& a) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < grid.size(); ++k) {
    if ((grid[k] - a).squaredNorm() < (grid[best] - a).squaredNorm()) best = k;
  }
  return best;
}

std::vector<MarkovPolicy> constant_policies(std::size_t n_actions) {
  std::vector<MarkovPolicy> out;
  for (std::size_t a = 0; a < n_actions; ++a) out.push_back(MarkovPolicy::constant(1, 1, n_actions, a));
  return out;
}

}  // namespace

AppRecipe AppRecipe::from_json(const nlohmann::json& j) {
  AppRecipe r;
  try {
    r.name = j.at("name").get<std::string>();
    if (j.contains("params")) r.params = j.at("params");
    if (j.contains("k_sweep")) r.k_sweep = j.at("k_sweep").get<std::vector<std::size_t>>();
    r.n_seeds = j.value("n_seeds", r.n_seeds);
    r.master_seed = j.value("master_seed", r.master_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad app recipe: ") + e.what());
  }
  r.validate();
  return r;
}

nlohmann::json AppRecipe::to_json() const {
  return {{"name", name},
          {"params", params},
          {"k_sweep", k_sweep},
          {"n_seeds", n_seeds},
          {"master_seed", master_seed}};
}

void AppRecipe::validate() const {
  if (!app_registry().contains(name)) throw ConfigError("unknown application: " + name);
  if (k_sweep.empty()) throw ConfigError("k_sweep must be nonempty");
  for (std::size_t k = 0; k < k_sweep.size(); ++k) {
    if (k_sweep[k] < 1) throw ConfigError("K must be positive");
    if (k > 0 && k_sweep[k] <= k_sweep[k - 1]) {
      throw ConfigError("k_sweep must be strictly increasing");
    }
  }
  if (n_seeds < 1) throw ConfigError("n_seeds must be at least 1");
}

AppInstance build_strategic_regression(const nlohmann::json& params) {
  const auto d = param<Index>(params, "dim", 2);
  if (d < 1) throw ConfigError("dim must be positive");
  std::vector<Vec> actions;
  if (params.contains("actions")) {
    actions = vec_list(params.at("actions"));
  } else if (d == 1) {
    actions = {scalar(-1.0), scalar(1.0)};
  } else if (d == 2) {
    const auto n = param<std::size_t>(params, "n_angles", 720);
    if (n < 1) throw ConfigError("n_angles must be positive");
    for (std::size_t k = 0; k < n; ++k) {
      const double t = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      Vec a(2);
      a << std::cos(t), std::sin(t);
      actions.push_back(a);
    }
  } else {
    throw ConfigError("dim > 2 needs an explicit 'actions' grid");
  }
  for (const auto& a : actions) {
    if (a.size() != d) throw ConfigError("dimension mismatch between actions and dim");
  }
  const Vec m0 = to_vec(param<std::vector<double>>(params, "m0", std::vector<double>(d, 0.0)));
  const Vec gamma =
      to_vec(param<std::vector<double>>(params, "gamma", std::vector<double>(d, 1.0)));
  std::vector<double> theta_default(d, 1.0);
  if (d == 2) theta_default = {1.0, 0.5};
  const Vec theta = to_vec(param<std::vector<double>>(params, "theta", theta_default));
  const auto w0_name = param<std::string>(params, "w0", "identity");
  const double w_noise = param<double>(params, "w_noise", d == 1 ? 0.0 : 0.3);
  const double kappa = param<double>(params, "kappa", 1.0);
  const double eps = param<double>(params, "eps", d == 1 ? 0.0 : 0.5);
  if (m0.size() != d || gamma.size() != d || theta.size() != d) {
    throw ConfigError("dimension mismatch in m0, gamma or theta");
  }
  Mat w0;
  if (w0_name == "identity") w0 = Mat::Identity(d, d);
  else if (w0_name == "zero") w0 = Mat::Zero(d, d);
  else throw ConfigError("w0 must be 'identity' or 'zero'");
  if (w_noise < 0.0 || eps < 0.0) throw ConfigError("noise scales must be nonnegative");

  // type = [z; vec(W)]
  auto population = Distribution::sampled(d + d * d, [d, m0, w0, w_noise](Rng& rng) {
    Vec t(d + d * d);
    t.head(d) = m0 + rng.normal_vec(d);
    Mat w = w0;
    if (w_noise > 0.0) w += w_noise * Eigen::Map<const Mat>(rng.normal_vec(d * d).data(), d, d);
    t.tail(d * d) = Eigen::Map<const Vec>(w.data(), d * d);
    return t;
  });
  auto effort = [d](const Vec& t) -> Mat { return Eigen::Map<const Mat>(t.data() + d, d, d); };
  auto channel = ObservationChannel::deterministic(
      d, [d](const Vec&, const Vec&, const Vec& t, const Vec& b) -> Vec {
        return t.head(d) + Eigen::Map<const Mat>(t.data() + d, d, d) * b;
      });

  FeatureMaps fm;
  fm.n_x = d;
  fm.n_z = d;
  fm.phi_x = [](const Vec&, const Vec&, const Vec& o) -> Vec { return o; };
  fm.psi_z = [](const Vec&, const Vec& a) -> Vec { return a; };

  StrategicMdpSpec spec;
  auto& env = spec.env;
  env.horizon = 1;
  env.state_dim = 1;
  env.action_set = actions;
  env.features = fm;
  env.sigma = 0.0;
  env.initial_state = Distribution::point_mass(Vec::Zero(1));
  env.stages.push_back(StageDynamics{
      population, AgentModel::closed_form_linear(effort), channel,
      [kappa, gamma, m0, d](const Vec& t) { return kappa * gamma.dot(t.head(d) - m0); },
      [](const Vec&) -> Vec { return Vec::Zero(1); }});
  const Mat mean_response =
      w0 * w0.transpose() + w_noise * w_noise * static_cast<double>(d) * Mat::Identity(d, d);
  env.mean_feature = [m0, mean_response](int, const Vec&, const Vec& a) -> Vec {
    return m0 + mean_response * a;
  };
  spec.eps_scale = eps;
  spec.truth.stages.push_back(StageParams{theta, Mat::Zero(1, d)});
  spec.validate();

  nlohmann::json resolved = {{"dim", d},
                             {"actions", vec_list_json(actions)},
                             {"m0", std::vector<double>(m0.begin(), m0.end())},
                             {"gamma", std::vector<double>(gamma.begin(), gamma.end())},
                             {"theta", std::vector<double>(theta.begin(), theta.end())},
                             {"w0", w0_name},
                             {"w_noise", w_noise},
                             {"kappa", kappa},
                             {"eps", eps}};
  PlanningProblem problem = PlanningProblem::single(env, constant_policies(actions.size()));
  for (std::size_t k = 0; k < actions.size(); ++k) {
    problem.labels[k] = fmt::format("a[{}]", k);
  }
  return AppInstance{"strategic_regression", std::move(spec),
                     BehaviorPolicy::uniform(actions.size()), std::move(problem), actions,
                     std::move(resolved)};
}

AppInstance build_strategic_bandit(const nlohmann::json& params) {
  const auto a1 = param<std::vector<double>>(params, "a1", {-1.0, 0.0, 1.0});
  const auto p_a2 = param<std::vector<double>>(params, "p_a2", {0.2, 0.5, 0.8});
  const auto b_grid =
      param<std::vector<double>>(params, "b_candidates", {-1.0, -0.5, 0.0, 0.5, 1.0});
  const auto types = param<std::vector<std::vector<double>>>(
      params, "types", {{-1.0, 0.5}, {-1.0, 1.5}, {1.0, 0.5}, {1.0, 1.5}});
  auto type_w = param<std::vector<double>>(params, "type_weights",
                                           std::vector<double>(types.size(), 1.0 / types.size()));
  const double kappa = param<double>(params, "kappa", 1.0);
  const double eps = param<double>(params, "eps", 0.3);
  const Vec theta = to_vec(param<std::vector<double>>(params, "theta", {0.6, -0.2, -0.4}));
  const auto rules =
      param<std::vector<std::string>>(params, "rules", {"zero", "one", "threshold"});
  const double threshold = param<double>(params, "threshold", 0.0);

  if (a1.empty() || b_grid.empty() || types.empty() || rules.empty()) {
    throw ConfigError("bandit grids must be nonempty");
  }
  if (p_a2.size() != a1.size()) throw ConfigError("p_a2 needs one entry per a1 value");
  if (type_w.size() != types.size()) throw ConfigError("type_weights/types size mismatch");
  if (theta.size() != 3) throw ConfigError("bandit theta has three entries");
  for (double p : p_a2) {
    if (p < 0.0 || p > 1.0) throw ConfigError("p_a2 entries must lie in [0, 1]");
  }
  std::vector<WeightedPoint> support;
  for (std::size_t k = 0; k < types.size(); ++k) {
    if (types[k].size() != 2) throw ConfigError("bandit types are (z, w) pairs");
    support.push_back({to_vec(types[k]), type_w[k]});
  }
  const auto population = Distribution::finite(support);

  std::vector<Vec> actions;
  for (double v : a1) actions.push_back(scalar(v));
  std::vector<Vec> candidates;
  for (double v : b_grid) candidates.push_back(scalar(v));
  const auto agent = AgentModel::finite_argmax(
      candidates, [](const Vec&, const Vec& a, const Vec& t, const Vec& b) {
        return t[1] * a[0] * b[0] - 0.5 * b[0] * b[0];
      });

  FeatureMaps fm;
  fm.n_x = 3;
  fm.n_z = static_cast<Index>(actions.size());
  fm.phi_x = [](const Vec&, const Vec&, const Vec& o) -> Vec {
    const double a2 = o[1];
    Vec x(3);
    x << a2, o[0] * (1.0 - a2), o[0] * a2;
    return x;
  };
  fm.psi_z = [actions](const Vec&, const Vec& a) -> Vec {
    Vec z = Vec::Zero(static_cast<Index>(actions.size()));
    z[static_cast<Index>(nearest_index(actions, a))] = 1.0;
    return z;
  };

  auto observed = [](const Vec& t, const Vec& b) { return t[0] + b[0]; };
  // Offline data: a2 drawn by the behavior policy with a probability that depends on a1 only.
  auto data_channel = ObservationChannel::finite(
      2, [actions, p_a2, observed](const Vec&, const Vec& a, const Vec& t, const Vec& b) {
        const double p = p_a2[nearest_index(actions, a)];
        const double o = observed(t, b);
        Vec one(2), zero(2);
        one << o, 1.0;
        zero << o, 0.0;
        return std::vector<WeightedPoint>{{one, p}, {zero, 1.0 - p}};
      });
  auto f1 = [kappa](const Vec& t) { return kappa * t[0]; };
  auto f2 = [](const Vec&) -> Vec { return Vec::Zero(1); };

  PlanningContext base;
  base.horizon = 1;
  base.state_dim = 1;
  base.action_set = actions;
  base.features = fm;
  base.sigma = 0.0;
  base.initial_state = Distribution::point_mass(Vec::Zero(1));

  StrategicMdpSpec spec;
  spec.env = base;
  spec.env.stages.push_back(StageDynamics{population, agent, data_channel, f1, f2});
  spec.eps_scale = eps;
  spec.truth.stages.push_back(StageParams{theta, Mat::Zero(1, 3)});
  spec.validate();

  PlanningProblem problem;
  for (const auto& rule : rules) {
    std::function<double(double)> a2_of;
    if (rule == "zero") a2_of = [](double) { return 0.0; };
    else if (rule == "one") a2_of = [](double) { return 1.0; };
    else if (rule == "threshold") a2_of = [threshold](double o) { return o >= threshold ? 1.0 : 0.0; };
    else throw ConfigError("unknown a2 rule: " + rule);
    PlanningContext ctx = base;
    ctx.stages.push_back(StageDynamics{
        population, agent,
        ObservationChannel::deterministic(
            2,
            [a2_of, observed](const Vec&, const Vec&, const Vec& t, const Vec& b) -> Vec {
              Vec o(2);
              o << observed(t, b), a2_of(observed(t, b));
              return o;
            }),
        f1, f2});
    problem.contexts.push_back(std::move(ctx));
  }
  for (std::size_t a = 0; a < actions.size(); ++a) {
    for (std::size_t r = 0; r < rules.size(); ++r) {
      problem.policies.push_back(MarkovPolicy::constant(1, 1, actions.size(), a));
      problem.context_of.push_back(r);
      problem.labels.push_back(fmt::format("a1={},rule={}", a1[a], rules[r]));
    }
  }
  problem.validate();

  nlohmann::json resolved = {{"a1", a1},       {"p_a2", p_a2},
                             {"b_candidates", b_grid},
                             {"types", types}, {"type_weights", type_w},
                             {"kappa", kappa}, {"eps", eps},
                             {"theta", std::vector<double>(theta.begin(), theta.end())},
                             {"rules", rules}, {"threshold", threshold}};
  return AppInstance{"strategic_bandit", std::move(spec), BehaviorPolicy::uniform(actions.size()),
                     std::move(problem), actions, std::move(resolved)};
}

AppInstance build_noncompliant_rec(const nlohmann::json& params) {
  const int horizon = param<int>(params, "horizon", 2);
  const auto types = param<std::vector<double>>(params, "types", {-1.5, -0.4, 0.4, 1.5});
  const double beta = param<double>(params, "beta", 1.0);
  const double kappa = param<double>(params, "kappa", 1.0);
  const double sigma = param<double>(params, "sigma", 0.3);
  const double eps = param<double>(params, "eps", 0.3);
  const Vec theta_r = to_vec(param<std::vector<double>>(params, "theta_r", {0.1, 0.3, 0.5}));
  const Vec theta_g = to_vec(param<std::vector<double>>(params, "theta_g", {0.0, 0.6, 0.7}));
  const auto grid = param<std::vector<double>>(params, "state_grid", {-1.0, 1.0});
  const auto behavior = param<std::vector<double>>(params, "behavior", {0.5, 0.5});
  if (horizon < 1) throw ConfigError("horizon must be positive");
  if (types.empty() || grid.empty()) throw ConfigError("types and state_grid must be nonempty");
  if (theta_r.size() != 3 || theta_g.size() != 3) {
    throw ConfigError("theta_r and theta_g have three entries (1, s, b)");
  }
  if (behavior.size() != 2) throw ConfigError("behavior gives probabilities of a = 0, 1");

  std::vector<WeightedPoint> support;
  for (double u : types) support.push_back({scalar(u), 1.0 / static_cast<double>(types.size())});
  const std::vector<Vec> actions{scalar(0.0), scalar(1.0)};
  const auto agent = AgentModel::finite_argmax(
      actions, [beta](const Vec&, const Vec& a, const Vec& t, const Vec& b) {
        return beta * (b[0] == a[0] ? 1.0 : 0.0) + t[0] * (2.0 * b[0] - 1.0);
      });
  const auto channel = ObservationChannel::deterministic(
      1, [](const Vec&, const Vec&, const Vec&, const Vec& b) -> Vec { return b; });

  FeatureMaps fm;
  fm.n_x = 3;
  fm.n_z = 3;
  fm.phi_x = [](const Vec& s, const Vec&, const Vec& o) -> Vec {
    Vec x(3);
    x << 1.0, s[0], o[0];
    return x;
  };
  fm.psi_z = [](const Vec& s, const Vec& a) -> Vec {
    Vec z(3);
    z << 1.0, s[0], a[0];
    return z;
  };

  StrategicMdpSpec spec;
  auto& env = spec.env;
  env.horizon = horizon;
  env.state_dim = 1;
  env.action_set = actions;
  env.features = fm;
  env.sigma = sigma;
  env.initial_state = Distribution::standard_normal(1);
  for (int h = 0; h < horizon; ++h) {
    env.stages.push_back(StageDynamics{Distribution::finite(support), agent, channel,
                                       [kappa](const Vec& t) { return kappa * t[0]; },
                                       [kappa](const Vec& t) -> Vec { return kappa * t; }});
    spec.truth.stages.push_back(StageParams{theta_r, theta_g.transpose()});
  }
  spec.eps_scale = eps;
  spec.validate();

  std::vector<Vec> state_grid;
  for (double g : grid) state_grid.push_back(scalar(g));
  PlanningProblem problem = PlanningProblem::single(
      env, enumerate_deterministic_policies(state_grid, horizon, actions.size()));

  nlohmann::json resolved = {{"horizon", horizon}, {"types", types},   {"beta", beta},
                             {"kappa", kappa},     {"sigma", sigma},   {"eps", eps},
                             {"theta_r", std::vector<double>(theta_r.begin(), theta_r.end())},
                             {"theta_g", std::vector<double>(theta_g.begin(), theta_g.end())},
                             {"state_grid", grid}, {"behavior", behavior}};
  return AppInstance{"noncompliant_rec", std::move(spec),
                     BehaviorPolicy::stationary(behavior, "stationary"), std::move(problem),
                     actions, std::move(resolved)};
}

const std::map<std::string, AppBuilder>& app_registry() {
  static const std::map<std::string, AppBuilder> registry{
      {"strategic_regression", build_strategic_regression},
      {"strategic_bandit", build_strategic_bandit},
      {"noncompliant_rec", build_noncompliant_rec}};
  return registry;
}

AppInstance build_app(const std::string& name, const nlohmann::json& params) {
  const auto& reg = app_registry();
  auto it = reg.find(name);
  if (it == reg.end()) throw ConfigError("unknown application: " + name);
  return it->second(params.is_null() ? nlohmann::json::object() : params);
}

AppInstance unconfounded_twin(const AppInstance& app) {
  AppInstance twin = app;
  twin.spec.env = decouple_confounders(app.spec.env);
  for (auto& ctx : twin.problem.contexts) ctx = decouple_confounders(ctx);
  return twin;
}

PlannerMode parse_planner_mode(std::string_view name) {
  if (name == "lcb_h1") return PlannerMode::lcb_h1;
  if (name == "exact_h1") return PlannerMode::exact_h1;
  if (name == "mc") return PlannerMode::mc;
  throw ConfigError("unknown planner_mode: " + std::string(name));
}

std::string_view to_string(PlannerMode mode) {
  switch (mode) {
    case PlannerMode::lcb_h1: return "lcb_h1";
    case PlannerMode::exact_h1: return "exact_h1";
    case PlannerMode::mc: return "mc";
  }
  return "mc";
}

PipelineSettings PipelineSettings::from_json(const nlohmann::json& j) {
  return from_json(j, PipelineSettings{});
}

PipelineSettings PipelineSettings::from_json(const nlohmann::json& j,
                                             const PipelineSettings& base) {
  PipelineSettings s = base;
  try {
    s.fit = FitOptions::from_json(j, s.fit);
    if (j.contains("planner_mode")) {
      s.planner = parse_planner_mode(j.at("planner_mode").get<std::string>());
    }
    s.n_random_candidates = j.value("n_random_candidates", s.n_random_candidates);
    if (j.contains("eval")) s.eval = EvalConfig::from_json(j.at("eval"), s.eval);
    const bool pinned = j.contains("threshold") && j.at("threshold").contains("c0");
    s.calibrate = j.value("calibrate", pinned ? false : s.calibrate);
    s.calibration_reps = j.value("calibration_reps", s.calibration_reps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad pipeline settings: ") + e.what());
  }
  if (s.calibration_reps < 1) throw ConfigError("calibration_reps must be positive");
  return s;
}

nlohmann::json PipelineSettings::to_json() const {
  nlohmann::json th = fit.threshold.to_json();
  th["c0_transition"] = fit.c0_transition > 0.0 ? fit.c0_transition : fit.threshold.c0;
  return {{"estimator", to_string(fit.estimator)},
          {"lambda", fit.lambda < 0.0 ? nlohmann::json(nullptr) : nlohmann::json(fit.lambda)},
          {"threshold", th},
          {"planner_mode", to_string(planner)},
          {"n_random_candidates", n_random_candidates},
          {"eval", eval.to_json()},
          {"calibrate", calibrate},
          {"calibration_reps", calibration_reps}};
}

PipelineSettings default_settings(const AppInstance& app) {
  PipelineSettings s;
  s.fit.threshold.sigma = app.spec.env.sigma;
  s.fit.reward_only = app.horizon() == 1;
  if (app.horizon() == 1) {
    s.planner = PlannerMode::lcb_h1;
    s.eval.exact_h1 = true;
  } else {
    s.planner = PlannerMode::mc;
    s.eval.exact_h1 = false;
    s.eval.n_rollouts = 2000;
  }
  return s;
}

namespace {

template <class Fn>
void for_each_fitted(const std::vector<StageFits>& fits, Fn&& fn) {
  for (std::size_t h = 0; h < fits.size(); ++h) {
    fn(h, fits[h].reward);
    for (const auto& t : fits[h].transition) fn(h, t);
  }
}

Vec true_component(const AppInstance& app, std::size_t h, const TargetFit& tf) {
  const auto& st = app.spec.truth.stages.at(h);
  if (tf.fit.target.kind == TargetKind::reward) return st.theta_r;
  return st.theta_g.row(tf.fit.target.coord).transpose();
}

FitOptions options_for(const AppInstance& app, const PipelineSettings& s, Estimator e) {
  FitOptions o = s.fit;
  o.estimator = e;
  if (app.horizon() == 1) o.reward_only = true;
  return o;
}

}  // namespace

C0Calibration calibrate_app(const AppInstance& app, std::size_t K, const PipelineSettings& s,
                            std::size_t reps, std::uint64_t seed) {
  if (reps < 1) throw ConfigError("calibration needs at least one replication");
  const AppInstance twin = unconfounded_twin(app);
  FitOptions o = options_for(app, s, Estimator::iv);
  o.threshold.c0 = 1.0;
  o.c0_transition = 1.0;
  std::vector<double> need_r(reps, 0.0);
  std::vector<double> need_t(reps, 0.0);
  parallel_for(reps, [&](std::size_t r) {
    const OfflineDataset data =
        collect_dataset(twin.spec, twin.behavior, K, substream_seed(seed, r));
    const auto fits = fit_all(data.observable(), twin.features(), o);
    for_each_fitted(fits, [&](std::size_t h, const TargetFit& tf) {
      const double need = required_c0(tf.fit, true_component(twin, h, tf), tf.c);
      auto& slot = tf.fit.target.kind == TargetKind::reward ? need_r[r] : need_t[r];
      slot = std::max(slot, need);
    });
  });
  C0Calibration out;
  out.reward = calibrate_c0(need_r, s.fit.threshold.delta);
  if (!o.reward_only) out.transition = calibrate_c0(need_t, s.fit.threshold.delta);
  return out;
}

double pmse_against_truth(const AppInstance& app, const ObservableDataset& data,
                          const std::vector<StageFits>& fits) {
  double total = 0.0;
  std::size_t n = 0;
  for_each_fitted(fits, [&](std::size_t h, const TargetFit& tf) {
    const StageDesign d = build_design(data, app.features(), static_cast<int>(h), tf.fit.target);
    total += projected_mse(d, tf.fit.theta_hat, true_component(app, h, tf));
    ++n;
  });
  return total / static_cast<double>(n);
}

double param_error(const AppInstance& app, const std::vector<StageFits>& fits) {
  double sq = 0.0;
  for_each_fitted(fits, [&](std::size_t h, const TargetFit& tf) {
    sq += (tf.fit.theta_hat - true_component(app, h, tf)).squaredNorm();
  });
  return std::sqrt(sq);
}

double transition_error(const AppInstance& app, const std::vector<StageFits>& fits) {
  double sq = 0.0;
  for_each_fitted(fits, [&](std::size_t h, const TargetFit& tf) {
    if (tf.fit.target.kind == TargetKind::transition) {
      sq += (tf.fit.theta_hat - true_component(app, h, tf)).squaredNorm();
    }
  });
  return std::sqrt(sq);
}

bool truth_covered(const AppInstance& app, const std::vector<StageFits>& fits) {
  bool ok = true;
  for_each_fitted(fits, [&](std::size_t h, const TargetFit& tf) {
    ok = ok && tf.ellipsoid.contains(true_component(app, h, tf));
  });
  return ok;
}

PlanResult plan_with_fits(const AppInstance& app, const std::vector<StageFits>& fits,
                          const PipelineSettings& settings, std::uint64_t seed) {
  if (settings.planner == PlannerMode::lcb_h1) {
    if (app.horizon() != 1) throw ConfigError("planner_mode lcb_h1 requires horizon 1");
    PlanResult r = plan_lcb_policies(app.problem, fits.front().reward.ellipsoid);
    r.seed = seed;
    return r;
  }
  EvalConfig cfg = settings.eval;
  cfg.exact_h1 = settings.planner == PlannerMode::exact_h1;
  const auto candidates =
      enumerate_candidates(fits, app.spec.env.state_dim, settings.n_random_candidates, seed);
  return plan(app.problem, candidates, cfg, seed);
}

RunResult run_pipeline(const AppInstance& app, std::size_t K, std::uint64_t seed,
                       const PipelineSettings& settings) {
  RunResult out;
  out.K = K;
  out.seed = seed;
  out.c0_reward = settings.fit.threshold.c0;
  out.c0_transition =
      settings.fit.c0_transition > 0.0 ? settings.fit.c0_transition : settings.fit.threshold.c0;

  const OfflineDataset data = collect_dataset(app.spec, app.behavior, K, substream_seed(seed, 0));
  const ObservableDataset obs = data.observable();

  // Scoring against the true model: the only place the truth is read.
  EvalConfig truth_cfg = settings.eval;
  truth_cfg.exact_h1 = app.horizon() == 1 || settings.eval.exact_h1;
  const SearchResult truth = optimal_policy_search(app.problem, app.spec.truth, truth_cfg);

  for (Estimator e : {Estimator::iv, Estimator::ols}) {
    EstimatorMetrics m;
    m.estimator = e;
    m.fits = fit_all(obs, app.features(), options_for(app, settings, e));
    m.plan = plan_with_fits(app, m.fits, settings, substream_seed(seed, 1));
    m.pmse = pmse_against_truth(app, obs, m.fits);
    m.param_err = param_error(app, m.fits);
    m.coverage_hit = truth_covered(app, m.fits);
    m.j_star = truth.value;
    m.j_hat = m.plan.value;
    m.subopt_raw = truth.value - truth.values[m.plan.policy_index];
    m.subopt = std::max(0.0, m.subopt_raw);
    m.pessimism_hit = true;
    for (std::size_t k = 0; k < truth.values.size(); ++k) {
      const double tol = 1e-9 * std::max(1.0, std::abs(truth.values[k]));
      if (m.plan.values[k] > truth.values[k] + tol) m.pessimism_hit = false;
    }
    out.estimators.push_back(std::move(m));
  }
  return out;
}

}  // namespace plan_iv
