#include "plan_iv/model.hpp"

#include <cmath>
#include <string>

namespace plan_iv {

Distribution Distribution::finite(std::vector<WeightedPoint> support) {
  if (support.empty()) throw ConfigError("finite distribution needs at least one support point");
  Distribution d;
  d.dim_ = support.front().value.size();
  double total = 0.0;
  for (const auto& p : support) {
    if (p.value.size() != d.dim_) throw ConfigError("support points differ in dimension");
    if (!(p.weight >= 0.0)) throw ConfigError("negative support weight");
    total += p.weight;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("support weights must sum to 1");
  for (const auto& p : support) d.weights_.push_back(p.weight);
  d.support_ = std::move(support);
  return d;
}

Distribution Distribution::point_mass(Vec value) { return finite({{std::move(value), 1.0}}); }

Distribution Distribution::sampled(Index dim, Sampler sampler) {
  Distribution d;
  d.dim_ = dim;
  d.sampler_ = std::move(sampler);
  return d;
}

Distribution Distribution::standard_normal(Index dim) {
  return sampled(dim, [dim](Rng& rng) { return rng.normal_vec(dim); });
}

Vec Distribution::sample(Rng& rng) const {
  if (finite_support()) return support_[rng.categorical(weights_)].value;
  return sampler_(rng);
}

Distribution product(const Distribution& first, const Distribution& second) {
  const Index d1 = first.dim();
  const Index d2 = second.dim();
  if (first.finite_support() && second.finite_support()) {
    std::vector<WeightedPoint> support;
    for (const auto& p : first.support()) {
      for (const auto& q : second.support()) {
        Vec v(d1 + d2);
        v << p.value, q.value;
        support.push_back({std::move(v), p.weight * q.weight});
      }
    }
    // re-normalize away floating drift in the products
    double total = 0.0;
    for (const auto& p : support) total += p.weight;
    for (auto& p : support) p.weight /= total;
    return Distribution::finite(std::move(support));
  }
  return Distribution::sampled(d1 + d2, [first, second, d1, d2](Rng& rng) {
    Vec v(d1 + d2);
    v << first.sample(rng), second.sample(rng);
    return v;
  });
}

AgentMode parse_agent_mode(std::string_view name) {
  if (name == "closed_form_linear") return AgentMode::closed_form_linear;
  if (name == "finite_argmax") return AgentMode::finite_argmax;
  throw ConfigError("unknown agent action mode: " + std::string(name));
}

std::string_view to_string(AgentMode mode) {
  return mode == AgentMode::closed_form_linear ? "closed_form_linear" : "finite_argmax";
}

AgentModel AgentModel::closed_form_linear(std::function<Mat(const Vec&)> effort_matrix) {
  AgentModel m;
  m.mode = AgentMode::closed_form_linear;
  m.effort_matrix = std::move(effort_matrix);
  return m;
}

AgentModel AgentModel::finite_argmax(std::vector<Vec> candidates, AgentUtility utility) {
  AgentModel m;
  m.mode = AgentMode::finite_argmax;
  m.candidates = std::move(candidates);
  m.utility = std::move(utility);
  return m;
}

Vec AgentModel::respond(const Vec& s, const Vec& a, const Vec& type) const {
  switch (mode) {
    case AgentMode::closed_form_linear: {
      if (!effort_matrix) throw ConfigError("closed_form_linear agent without effort matrix");
      const Mat w = effort_matrix(type);
      if (w.rows() != a.size()) throw ConfigError("effort matrix rows must match action dimension");
      return w.transpose() * a;
    }
    case AgentMode::finite_argmax: {
      if (candidates.empty()) throw ConfigError("finite_argmax agent with empty candidate set");
      std::size_t best = 0;
      double best_value = utility(s, a, type, candidates[0]);
      for (std::size_t k = 1; k < candidates.size(); ++k) {
        const double v = utility(s, a, type, candidates[k]);
        if (v > best_value) {
          best_value = v;
          best = k;
        }
      }
      return candidates[best];
    }
  }
  throw ConfigError("unknown agent action mode");
}

ObservationChannel ObservationChannel::additive_gaussian(Index dim, MeanFn mean,
                                                         double noise_scale) {
  if (!(noise_scale >= 0.0)) throw ConfigError("channel noise scale must be nonnegative");
  ObservationChannel c;
  c.dim_ = dim;
  c.mean_ = std::move(mean);
  c.noise_scale_ = noise_scale;
  return c;
}

ObservationChannel ObservationChannel::finite(Index dim, OutcomesFn outcomes) {
  ObservationChannel c;
  c.dim_ = dim;
  c.outcomes_ = std::move(outcomes);
  return c;
}

Vec ObservationChannel::sample(const Vec& s, const Vec& a, const Vec& type, const Vec& b,
                               Rng& rng) const {
  if (outcomes_) {
    const auto outs = outcomes_(s, a, type, b);
    std::vector<double> w;
    w.reserve(outs.size());
    for (const auto& o : outs) w.push_back(o.weight);
    return outs[rng.categorical(w)].value;
  }
  return mean_(s, a, type, b) + noise_scale_ * rng.normal_vec(dim_);
}

std::vector<WeightedPoint> ObservationChannel::outcomes(const Vec& s, const Vec& a,
                                                        const Vec& type, const Vec& b) const {
  if (outcomes_) return outcomes_(s, a, type, b);
  if (noise_scale_ != 0.0) throw ConfigError("gaussian channel with noise is not enumerable");
  return {{mean_(s, a, type, b), 1.0}};
}

ObservationChannel ObservationChannel::remap_type(std::function<Vec(const Vec&)> type_map) const {
  ObservationChannel c = *this;
  if (mean_) {
    c.mean_ = [m = mean_, type_map](const Vec& s, const Vec& a, const Vec& t, const Vec& b) {
      return m(s, a, type_map(t), b);
    };
  }
  if (outcomes_) {
    c.outcomes_ = [o = outcomes_, type_map](const Vec& s, const Vec& a, const Vec& t,
                                            const Vec& b) { return o(s, a, type_map(t), b); };
  }
  return c;
}

const StageDynamics& PlanningContext::stage(int h) const {
  if (h < 0 || h >= horizon) throw ConfigError("stage index out of range");
  return stages[static_cast<std::size_t>(h)];
}

void PlanningContext::validate() const {
  if (horizon < 1) throw ConfigError("horizon must be positive");
  if (state_dim < 1) throw ConfigError("state dimension must be positive");
  if (!(sigma >= 0.0)) throw ConfigError("sigma must be nonnegative");
  if (action_set.empty()) throw ConfigError("action set must be nonempty");
  const Index da = action_set.front().size();
  for (const auto& a : action_set) {
    if (a.size() != da) throw ConfigError("action vectors differ in dimension");
  }
  if (stages.size() != static_cast<std::size_t>(horizon)) {
    throw ConfigError("one stage description per horizon step required");
  }
  if (!features.phi_x || !features.psi_z || features.n_x < 1 || features.n_z < 1) {
    throw ConfigError("feature maps must be set with positive dimensions");
  }
  if (initial_state.dim() != state_dim) throw ConfigError("initial state dimension mismatch");
  for (const auto& st : stages) {
    if (!st.reward_confounder || !st.state_confounder) {
      throw ConfigError("confounder maps must be set (use zero maps when unconfounded)");
    }
    if (st.agent.mode == AgentMode::finite_argmax && st.agent.candidates.empty()) {
      throw ConfigError("finite_argmax agent with empty candidate set");
    }
  }
}

void AggregatedModel::validate(const PlanningContext& ctx) const {
  if (stages.size() != static_cast<std::size_t>(ctx.horizon)) {
    throw ConfigError("model has the wrong number of stages");
  }
  for (const auto& st : stages) {
    if (st.theta_r.size() != ctx.features.n_x) throw ConfigError("theta_r dimension mismatch");
    if (st.theta_g.rows() != ctx.state_dim || st.theta_g.cols() != ctx.features.n_x) {
      throw ConfigError("theta_g dimension mismatch");
    }
  }
}

void StrategicMdpSpec::validate() const {
  env.validate();
  truth.validate(env);
  if (!(eps_scale >= 0.0)) throw ConfigError("reward noise scale must be nonnegative");
}

ConfounderMeanReport verify_confounder_mean_zero(const PlanningContext& ctx, std::size_t n_draws,
                                                 std::uint64_t seed) {
  ConfounderMeanReport report;
  const double n = static_cast<double>(n_draws);
  for (int h = 0; h < ctx.horizon; ++h) {
    const auto& st = ctx.stage(h);
    Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(h));
    const Index cols = 1 + ctx.state_dim;
    Vec sum = Vec::Zero(cols);
    Vec sum_sq = Vec::Zero(cols);
    for (std::size_t k = 0; k < n_draws; ++k) {
      const Vec type = st.population.sample(rng);
      Vec v(cols);
      v << st.reward_confounder(type), st.state_confounder(type);
      sum += v;
      sum_sq += v.cwiseAbs2();
    }
    for (Index j = 0; j < cols; ++j) {
      const double mean = sum[j] / n;
      const double var = std::max(0.0, sum_sq[j] / n - mean * mean);
      const double se = std::sqrt(var / n);
      const double z = se > 0.0 ? std::abs(mean) / se : (mean == 0.0 ? 0.0 : INFINITY);
      report.max_z_score = std::max(report.max_z_score, z);
    }
  }
  report.passed = report.max_z_score <= 5.0;
  return report;
}

PlanningContext decouple_confounders(const PlanningContext& ctx) {
  PlanningContext out = ctx;
  for (auto& st : out.stages) {
    const Index d = st.population.dim();
    const auto head = [d](const Vec& t) -> Vec { return t.head(d); };
    const auto tail = [d](const Vec& t) -> Vec { return t.tail(d); };
    st.population = product(st.population, st.population);

    auto agent = st.agent;
    if (agent.effort_matrix) {
      agent.effort_matrix = [f = st.agent.effort_matrix, head](const Vec& t) { return f(head(t)); };
    }
    if (agent.utility) {
      agent.utility = [u = st.agent.utility, head](const Vec& s, const Vec& a, const Vec& t,
                                                   const Vec& b) { return u(s, a, head(t), b); };
    }
    st.agent = std::move(agent);

    st.channel = st.channel.remap_type(head);
    st.reward_confounder = [f = st.reward_confounder, tail](const Vec& t) { return f(tail(t)); };
    st.state_confounder = [f = st.state_confounder, tail](const Vec& t) { return f(tail(t)); };
  }
  return out;
}

}  // namespace plan_iv
