#include "plan_iv/smdp_env.hpp"

#include "plan_iv/parallel.hpp"

#include <cmath>

namespace plan_iv {

int ObservableDataset::horizon() const {
  return trajectories.empty() ? 0 : trajectories.front().horizon();
}

Index ObservableDataset::state_dim() const {
  return trajectories.empty() ? 0 : trajectories.front().states.front().size();
}

int OfflineDataset::horizon() const {
  return trajectories.empty() ? 0 : trajectories.front().obs.horizon();
}

ObservableDataset OfflineDataset::observable() const {
  ObservableDataset out;
  out.trajectories.reserve(trajectories.size());
  for (const auto& t : trajectories) out.trajectories.push_back(t.obs);
  return out;
}

void OfflineDataset::validate() const {
  if (trajectories.empty()) throw ConfigError("dataset has no trajectories");
  const int h = horizon();
  for (const auto& t : trajectories) {
    const auto n = static_cast<std::size_t>(h);
    const auto& o = t.obs;
    if (o.rewards.size() != n || o.actions.size() != n || o.action_indices.size() != n ||
        o.observations.size() != n || o.states.size() != n + 1 || t.hidden.types.size() != n ||
        t.hidden.agent_actions.size() != n) {
      throw ConfigError("trajectory arrays do not match the common horizon");
    }
  }
}

BehaviorPolicy::BehaviorPolicy(std::string tag, std::size_t n_actions, Fn fn)
    : tag_(std::move(tag)), n_actions_(n_actions), fn_(std::move(fn)) {
  if (n_actions_ == 0) throw ConfigError("behavior policy over an empty action set");
}

BehaviorPolicy BehaviorPolicy::uniform(std::size_t n_actions) {
  return BehaviorPolicy("uniform", n_actions, [n_actions](int, const Vec&) {
    return std::vector<double>(n_actions, 1.0 / static_cast<double>(n_actions));
  });
}

BehaviorPolicy BehaviorPolicy::stationary(std::vector<double> probs, std::string tag) {
  const std::size_t n = probs.size();
  return BehaviorPolicy(std::move(tag), n, [p = std::move(probs)](int, const Vec&) { return p; });
}

std::vector<double> BehaviorPolicy::probabilities(int h, const Vec& history) const {
  auto p = fn_(h, history);
  if (p.size() != n_actions_) throw ConfigError("behavior policy returned the wrong arity");
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw ConfigError("behavior policy returned a negative probability");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("behavior probabilities must sum to 1");
  return p;
}

Vec encode_history(const ObservableTrajectory& partial, int h, int horizon, Index state_dim,
                   Index obs_dim) {
  const Index block = state_dim + 1 + obs_dim;
  Vec out = Vec::Zero(horizon * block + state_dim);
  for (int t = 0; t < h; ++t) {
    const auto ut = static_cast<std::size_t>(t);
    out.segment(t * block, state_dim) = partial.states[ut];
    out[t * block + state_dim] = static_cast<double>(partial.action_indices[ut]);
    out.segment(t * block + state_dim + 1, obs_dim) = partial.observations[ut];
  }
  out.tail(state_dim) = partial.states[static_cast<std::size_t>(h)];
  return out;
}

Vec best_response(const StrategicMdpSpec& spec, int h, const Vec& s, const Vec& a,
                  const Vec& type) {
  return spec.env.stage(h).agent.respond(s, a, type);
}

StepOutcome step(const StrategicMdpSpec& spec, int h, const Vec& s, const Vec& a, Rng& rng) {
  const auto& st = spec.env.stage(h);
  const auto& params = spec.truth.stages[static_cast<std::size_t>(h)];
  StepOutcome out;
  out.type = st.population.sample(rng);
  out.agent_action = st.agent.respond(s, a, out.type);
  out.observation = st.channel.sample(s, a, out.type, out.agent_action, rng);
  const double eps = rng.normal();
  const Vec eta = rng.normal_vec(spec.env.state_dim);
  const Vec x = spec.env.features.phi_x(s, a, out.observation);
  out.reward = x.dot(params.theta_r) + st.reward_confounder(out.type) + spec.eps_scale * eps;
  out.next_state = params.theta_g * x + st.state_confounder(out.type) + spec.env.sigma * eta;
  return out;
}

OfflineDataset collect_dataset(const StrategicMdpSpec& spec, const BehaviorPolicy& policy,
                               std::size_t n_trajectories, std::uint64_t seed) {
  if (n_trajectories < 1) throw ConfigError("need at least one trajectory");
  spec.validate();
  if (policy.n_actions() != spec.env.action_set.size()) {
    throw ConfigError("behavior policy arity differs from the action set");
  }
  const int horizon = spec.horizon();
  const Index d1 = spec.env.state_dim;
  Index d_o = spec.env.stages.front().channel.dim();

  OfflineDataset data;
  data.behavior_policy_tag = policy.tag();
  data.seed = seed;
  data.trajectories.resize(n_trajectories);
  parallel_for(n_trajectories, [&](std::size_t k) {
    Rng rng = Rng::substream(seed, k);
    Trajectory traj;
    traj.obs.states.push_back(spec.env.initial_state.sample(rng));
    for (int h = 0; h < horizon; ++h) {
      const Vec& s = traj.obs.states.back();
      const Vec history = encode_history(traj.obs, h, horizon, d1, d_o);
      const auto probs = policy.probabilities(h, history);
      const std::size_t idx = rng.categorical(probs);
      const Vec& a = spec.env.action_set[idx];
      StepOutcome out = step(spec, h, s, a, rng);
      traj.obs.action_indices.push_back(idx);
      traj.obs.actions.push_back(a);
      traj.obs.observations.push_back(std::move(out.observation));
      traj.obs.rewards.push_back(out.reward);
      traj.obs.states.push_back(std::move(out.next_state));
      traj.hidden.types.push_back(std::move(out.type));
      traj.hidden.agent_actions.push_back(std::move(out.agent_action));
    }
    data.trajectories[k] = std::move(traj);
  });
  return data;
}

namespace {

std::vector<Vec> parse_vectors(const nlohmann::json& j, const char* key) {
  if (!j.is_array()) throw ConfigError(std::string(key) + " must be a list of vectors");
  std::vector<Vec> out;
  for (const auto& row : j) {
    if (row.is_number()) {
      out.push_back(Vec::Constant(1, row.get<double>()));
      continue;
    }
    std::vector<double> v = row.get<std::vector<double>>();
    out.push_back(Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size())));
  }
  return out;
}

Mat random_orthonormal(Index n, Rng& rng) {
  Mat g(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(g);
  return qr.householderQ() * Mat::Identity(n, n);
}

}  // namespace

EnvRecipe EnvRecipe::from_json(const nlohmann::json& j) {
  try {
    EnvRecipe r;
    r.horizon = j.value("horizon", r.horizon);
    r.state_dim = j.value("state_dim", static_cast<int>(r.state_dim));
    if (!j.contains("action_set")) throw ConfigError("environment recipe needs action_set");
    r.action_set = parse_vectors(j.at("action_set"), "action_set");
    r.feature_map = j.value("feature_map", r.feature_map);
    r.confounding_kappa = j.value("confounding_kappa", r.confounding_kappa);
    r.sigma = j.value("sigma", r.sigma);
    r.eps_scale = j.value("eps_scale", r.eps_scale);
    r.channel_noise = j.value("channel_noise", r.channel_noise);
    r.param_seed = j.value("param_seed", r.param_seed);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad environment recipe: ") + e.what());
  }
}

nlohmann::json EnvRecipe::to_json() const {
  nlohmann::json actions = nlohmann::json::array();
  for (const auto& a : action_set) actions.push_back(std::vector<double>(a.begin(), a.end()));
  return {{"horizon", horizon},
          {"state_dim", state_dim},
          {"action_set", actions},
          {"feature_map", feature_map},
          {"confounding_kappa", confounding_kappa},
          {"sigma", sigma},
          {"eps_scale", eps_scale},
          {"channel_noise", channel_noise},
          {"param_seed", param_seed}};
}

EnvRecipe EnvRecipe::calibration_1d() {
  EnvRecipe r;
  r.horizon = 1;
  r.state_dim = 1;
  r.action_set = {Vec::Constant(1, -1.0), Vec::Constant(1, 1.0)};
  r.feature_map = "calibration_1d";
  r.confounding_kappa = 1.0;
  r.sigma = 0.1;
  r.eps_scale = 0.0;
  r.channel_noise = 0.0;
  return r;
}

StrategicMdpSpec make_confounded_linear_env(const EnvRecipe& recipe) {
  if (recipe.horizon < 1) throw ConfigError("horizon must be positive");
  if (recipe.state_dim < 1) throw ConfigError("state_dim must be positive");
  if (recipe.action_set.empty()) throw ConfigError("action_set must be nonempty");
  if (recipe.confounding_kappa < 0.0) throw ConfigError("confounding_kappa must be >= 0");
  const Index d1 = recipe.state_dim;
  const Index da = recipe.action_set.front().size();
  for (const auto& a : recipe.action_set) {
    if (a.size() != da) throw ConfigError("dimension mismatch in action_set");
  }
  const Index d_o = da;
  const bool calibration = recipe.feature_map == "calibration_1d";
  const bool intercept = recipe.feature_map == "linear_intercept";
  if (!calibration && !intercept && recipe.feature_map != "linear") {
    throw ConfigError("unknown feature_map preset: " + recipe.feature_map);
  }
  if (calibration && (d1 != 1 || da != 1)) {
    throw ConfigError("dimension mismatch: calibration_1d needs state_dim 1 and scalar actions");
  }

  Rng prng(recipe.param_seed);
  Mat w0 = Mat::Identity(da, d_o);
  Mat confound_dir = Mat::Ones(d1, d_o);
  if (!calibration) {
    for (Index i = 0; i < da; ++i)
      for (Index j = 0; j < d_o; ++j) w0(i, j) += 0.3 * prng.normal();
    for (Index i = 0; i < d1; ++i) {
      for (Index j = 0; j < d_o; ++j) confound_dir(i, j) = prng.normal();
      confound_dir.row(i).normalize();
    }
  }

  FeatureMaps fm;
  if (calibration) {
    fm.n_x = 1;
    fm.n_z = 1;
    fm.phi_x = [](const Vec&, const Vec&, const Vec& o) -> Vec { return o; };
    fm.psi_z = [](const Vec&, const Vec& a) -> Vec { return a; };
  } else {
    const Index off = intercept ? 1 : 0;
    fm.n_x = off + d1 + d_o;
    fm.n_z = off + d1 + da;
    fm.phi_x = [off, d1, d_o](const Vec& s, const Vec&, const Vec& o) -> Vec {
      Vec x(off + d1 + d_o);
      if (off) x[0] = 1.0;
      x.segment(off, d1) = s;
      x.tail(d_o) = o;
      return x;
    };
    fm.psi_z = [off, d1, da](const Vec& s, const Vec& a) -> Vec {
      Vec z(off + d1 + da);
      if (off) z[0] = 1.0;
      z.segment(off, d1) = s;
      z.tail(da) = a;
      return z;
    };
  }

  // type = [u; vec(W)]
  const Index type_dim = d_o + da * d_o;
  Vec w_flat = Eigen::Map<const Vec>(w0.data(), da * d_o);
  auto population = Distribution::sampled(type_dim, [d_o, w_flat](Rng& rng) {
    Vec t(d_o + w_flat.size());
    t << rng.normal_vec(d_o), w_flat;
    return t;
  });
  auto effort = [da, d_o](const Vec& t) -> Mat {
    return Eigen::Map<const Mat>(t.data() + d_o, da, d_o);
  };
  auto channel_mean = [d_o, da](const Vec&, const Vec&, const Vec& t, const Vec& b) -> Vec {
    const Mat w = Eigen::Map<const Mat>(t.data() + d_o, da, d_o);
    return t.head(d_o) + w * b;
  };
  const double kappa = recipe.confounding_kappa;
  const double f1_norm = calibration ? 1.0 : 1.0 / std::sqrt(static_cast<double>(d_o));

  StrategicMdpSpec spec;
  auto& env = spec.env;
  env.horizon = recipe.horizon;
  env.state_dim = d1;
  env.action_set = recipe.action_set;
  env.features = fm;
  env.sigma = recipe.sigma;
  env.initial_state = Distribution::standard_normal(d1);
  spec.eps_scale = recipe.eps_scale;

  for (int h = 0; h < recipe.horizon; ++h) {
    StageDynamics st{
        population, AgentModel::closed_form_linear(effort),
        ObservationChannel::additive_gaussian(d_o, channel_mean, recipe.channel_noise),
        [kappa, f1_norm, d_o](const Vec& t) { return kappa * f1_norm * t.head(d_o).sum(); },
        [kappa, confound_dir, d_o](const Vec& t) -> Vec {
          return kappa * confound_dir * t.head(d_o);
        }};
    env.stages.push_back(std::move(st));

    StageParams p;
    if (calibration) {
      p.theta_r = Vec::Ones(1);
      p.theta_g = Mat::Constant(1, 1, 0.5);
    } else {
      const Index off = intercept ? 1 : 0;
      const double scale = 1.0 / std::sqrt(static_cast<double>(fm.n_x));
      p.theta_r = prng.normal_vec(fm.n_x) * scale;
      p.theta_g = Mat::Zero(d1, fm.n_x);
      p.theta_g.block(0, off, d1, d1) = 0.5 * random_orthonormal(d1, prng);
      for (Index i = 0; i < d1; ++i)
        for (Index j = 0; j < d_o; ++j) p.theta_g(i, off + d1 + j) = 0.5 * scale * prng.normal();
    }
    spec.truth.stages.push_back(std::move(p));
  }

  const Mat mean_response = w0 * w0.transpose();
  env.mean_feature = [fm, mean_response](int, const Vec& s, const Vec& a) -> Vec {
    return fm.phi_x(s, a, mean_response * a);
  };
  spec.validate();
  return spec;
}

}  // namespace plan_iv
