#include "plan_iv/aggregated_mdp.hpp"

#include "plan_iv/parallel.hpp"

#include <cmath>
#include <limits>

namespace plan_iv {

namespace {

void check_row(const std::vector<double>& row, std::size_t n_actions) {
  if (row.size() != n_actions) throw ConfigError("policy rows differ in arity");
  double total = 0.0;
  for (double p : row) {
    if (!(p >= 0.0)) throw ConfigError("policy probabilities must be nonnegative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("policy rows must sum to 1");
}

}  // namespace

MarkovPolicy::MarkovPolicy(std::vector<Vec> grid, Table table)
    : grid_(std::move(grid)), table_(std::move(table)) {
  if (grid_.empty()) throw ConfigError("policy grid must be nonempty");
  if (table_.empty()) throw ConfigError("policy table must cover at least one stage");
  const std::size_t n_actions = table_.front().empty() ? 0 : table_.front().front().size();
  if (n_actions == 0) throw ConfigError("policy over an empty action set");
  for (const auto& stage : table_) {
    if (stage.size() != grid_.size()) throw ConfigError("policy table / grid size mismatch");
    for (const auto& row : stage) check_row(row, n_actions);
  }
}

MarkovPolicy MarkovPolicy::constant(int horizon, Index state_dim, std::size_t n_actions,
                                    std::size_t action) {
  if (action >= n_actions) throw ConfigError("action index out of range");
  std::vector<double> row(n_actions, 0.0);
  row[action] = 1.0;
  Table table(static_cast<std::size_t>(horizon), std::vector<std::vector<double>>{row});
  return MarkovPolicy({Vec::Zero(state_dim)}, std::move(table));
}

MarkovPolicy MarkovPolicy::deterministic(std::vector<Vec> grid,
                                         const std::vector<std::vector<std::size_t>>& choice,
                                         std::size_t n_actions) {
  Table table;
  for (const auto& stage : choice) {
    std::vector<std::vector<double>> rows;
    for (std::size_t a : stage) {
      if (a >= n_actions) throw ConfigError("action index out of range");
      std::vector<double> row(n_actions, 0.0);
      row[a] = 1.0;
      rows.push_back(std::move(row));
    }
    table.push_back(std::move(rows));
  }
  return MarkovPolicy(std::move(grid), std::move(table));
}

std::size_t MarkovPolicy::nearest(const Vec& s) const {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g < grid_.size(); ++g) {
    const double d = (grid_[g] - s).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = g;
    }
  }
  return best;
}

const std::vector<double>& MarkovPolicy::probabilities(int h, const Vec& s) const {
  if (h < 0 || h >= horizon()) throw ConfigError("policy queried beyond its horizon");
  return table_[static_cast<std::size_t>(h)][nearest(s)];
}

nlohmann::json MarkovPolicy::to_json() const {
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& g : grid_) grid.push_back(std::vector<double>(g.begin(), g.end()));
  return {{"grid", grid}, {"table", table_}};
}

MarkovPolicy MarkovPolicy::from_json(const nlohmann::json& j) {
  try {
    std::vector<Vec> grid;
    for (const auto& g : j.at("grid")) {
      auto v = g.get<std::vector<double>>();
      grid.push_back(Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size())));
    }
    return MarkovPolicy(std::move(grid), j.at("table").get<Table>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad policy json: ") + e.what());
  }
}

std::vector<MarkovPolicy> enumerate_deterministic_policies(const std::vector<Vec>& grid,
                                                           int horizon, std::size_t n_actions,
                                                           std::size_t max_count) {
  const std::size_t cells = grid.size() * static_cast<std::size_t>(horizon);
  double count = std::pow(static_cast<double>(n_actions), static_cast<double>(cells));
  if (count > static_cast<double>(max_count)) throw ConfigError("policy class too large");
  std::vector<MarkovPolicy> out;
  std::vector<std::size_t> digits(cells, 0);
  for (std::size_t k = 0; k < static_cast<std::size_t>(count); ++k) {
    std::size_t rem = k;
    for (std::size_t c = cells; c-- > 0;) {
      digits[c] = rem % n_actions;
      rem /= n_actions;
    }
    std::vector<std::vector<std::size_t>> choice(static_cast<std::size_t>(horizon));
    for (int h = 0; h < horizon; ++h) {
      for (std::size_t g = 0; g < grid.size(); ++g) {
        choice[static_cast<std::size_t>(h)].push_back(
            digits[static_cast<std::size_t>(h) * grid.size() + g]);
      }
    }
    out.push_back(MarkovPolicy::deterministic(grid, choice, n_actions));
  }
  return out;
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) { return from_json(j, EvalConfig{}); }

EvalConfig EvalConfig::from_json(const nlohmann::json& j, const EvalConfig& base) {
  EvalConfig c = base;
  try {
    c.n_rollouts = j.value("n_rollouts", c.n_rollouts);
    c.seed = j.value("seed", c.seed);
    c.crn = j.value("crn", c.crn);
    c.exact_h1 = j.value("exact_h1", c.exact_h1);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad evaluation config: ") + e.what());
  }
  if (c.n_rollouts < 2) throw ConfigError("n_rollouts must be at least 2");
  return c;
}

nlohmann::json EvalConfig::to_json() const {
  return {{"n_rollouts", n_rollouts}, {"seed", seed}, {"crn", crn}, {"exact_h1", exact_h1}};
}

LinearValue mean_feature(const PlanningContext& ctx, int h, const Vec& s, const Vec& a) {
  if (ctx.mean_feature) return {ctx.mean_feature(h, s, a), 0.0};
  const auto& st = ctx.stage(h);
  if (!st.population.finite_support() || !st.channel.enumerable()) {
    throw ConfigError(
        "exact evaluation needs a closed-form mean feature or a finite population with an "
        "enumerable channel");
  }
  LinearValue out{Vec::Zero(ctx.features.n_x), 0.0};
  for (const auto& type : st.population.support()) {
    const Vec b = st.agent.respond(s, a, type.value);
    for (const auto& o : st.channel.outcomes(s, a, type.value, b)) {
      const double w = type.weight * o.weight;
      out.feature += w * ctx.features.phi_x(s, a, o.value);
    }
    out.offset += type.weight * st.reward_confounder(type.value);
  }
  return out;
}

std::optional<double> marginal_reward_exact(const PlanningContext& ctx,
                                            const AggregatedModel& model, int h, const Vec& s,
                                            const Vec& a) {
  const auto& st = ctx.stage(h);
  if (!st.population.finite_support() || !st.channel.enumerable()) return std::nullopt;
  PlanningContext enumerating = ctx;
  enumerating.mean_feature = nullptr;
  return mean_feature(enumerating, h, s, a).at(model.stages[static_cast<std::size_t>(h)].theta_r);
}

ScalarEstimate marginal_reward_mc(const PlanningContext& ctx, const AggregatedModel& model, int h,
                                  const Vec& s, const Vec& a, std::size_t n_mc, Rng& rng) {
  if (n_mc < 1) throw ConfigError("n_mc must be at least 1");
  const auto& st = ctx.stage(h);
  const Vec& theta = model.stages[static_cast<std::size_t>(h)].theta_r;
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t k = 0; k < n_mc; ++k) {
    const Vec type = st.population.sample(rng);
    const Vec b = st.agent.respond(s, a, type);
    const Vec o = st.channel.sample(s, a, type, b, rng);
    const double r = ctx.features.phi_x(s, a, o).dot(theta) + st.reward_confounder(type);
    sum += r;
    sum_sq += r * r;
  }
  const double n = static_cast<double>(n_mc);
  const double mean = sum / n;
  double se = 0.0;
  if (n_mc > 1) se = std::sqrt(std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0)) / n);
  return {mean, se};
}

ScalarEstimate marginal_reward(const PlanningContext& ctx, const AggregatedModel& model, int h,
                               const Vec& s, const Vec& a, std::size_t n_mc, Rng& rng) {
  if (n_mc < 1) throw ConfigError("n_mc must be at least 1");
  if (auto exact = marginal_reward_exact(ctx, model, h, s, a)) return {*exact, 0.0};
  return marginal_reward_mc(ctx, model, h, s, a, n_mc, rng);
}

Vec sample_next_state(const PlanningContext& ctx, const AggregatedModel& model, int h,
                      const Vec& s, const Vec& a, Rng& rng) {
  const auto& st = ctx.stage(h);
  const auto& p = model.stages[static_cast<std::size_t>(h)];
  const Vec type = st.population.sample(rng);
  const Vec b = st.agent.respond(s, a, type);
  const Vec o = st.channel.sample(s, a, type, b, rng);
  const Vec eta = rng.normal_vec(ctx.state_dim);
  return p.theta_g * ctx.features.phi_x(s, a, o) + st.state_confounder(type) + ctx.sigma * eta;
}

ValueEstimate evaluate_policy_mc(const PlanningContext& ctx, const AggregatedModel& model,
                                 const MarkovPolicy& policy, std::size_t n_rollouts,
                                 std::uint64_t seed) {
  if (n_rollouts < 2) throw ConfigError("need at least two rollouts");
  model.validate(ctx);
  if (policy.horizon() != ctx.horizon) throw ConfigError("policy horizon differs from context");
  std::vector<double> returns(n_rollouts);
  parallel_for(n_rollouts, [&](std::size_t t) {
    Rng rng = Rng::substream(seed, t);
    Vec s = ctx.initial_state.sample(rng);
    double total = 0.0;
    for (int h = 0; h < ctx.horizon; ++h) {
      const auto& st = ctx.stage(h);
      const auto& p = model.stages[static_cast<std::size_t>(h)];
      const std::size_t ai = rng.categorical(policy.probabilities(h, s));
      const Vec& a = ctx.action_set[ai];
      // one (type, observation) draw feeds both the reward and the transition
      const Vec type = st.population.sample(rng);
      const Vec b = st.agent.respond(s, a, type);
      const Vec o = st.channel.sample(s, a, type, b, rng);
      const Vec eta = rng.normal_vec(ctx.state_dim);
      const Vec x = ctx.features.phi_x(s, a, o);
      total += x.dot(p.theta_r) + st.reward_confounder(type);
      s = p.theta_g * x + st.state_confounder(type) + ctx.sigma * eta;
    }
    returns[t] = total;
  });
  const double n = static_cast<double>(n_rollouts);
  double mean = 0.0;
  for (double r : returns) mean += r;
  mean /= n;
  double ss = 0.0;
  for (double r : returns) ss += (r - mean) * (r - mean);
  return {mean, std::sqrt(ss / (n - 1.0) / n), n_rollouts};
}

LinearValue policy_value_h1(const PlanningContext& ctx, const MarkovPolicy& policy) {
  if (ctx.horizon != 1) throw ConfigError("exact evaluation requires horizon 1");
  if (!ctx.initial_state.finite_support()) {
    throw ConfigError("exact evaluation requires a finitely supported initial state");
  }
  LinearValue out{Vec::Zero(ctx.features.n_x), 0.0};
  for (const auto& s : ctx.initial_state.support()) {
    const auto& probs = policy.probabilities(0, s.value);
    for (std::size_t a = 0; a < probs.size(); ++a) {
      if (probs[a] == 0.0) continue;
      const LinearValue mu = mean_feature(ctx, 0, s.value, ctx.action_set[a]);
      out.feature += s.weight * probs[a] * mu.feature;
      out.offset += s.weight * probs[a] * mu.offset;
    }
  }
  return out;
}

double evaluate_policy_exact_h1(const PlanningContext& ctx, const AggregatedModel& model,
                                const MarkovPolicy& policy) {
  model.validate(ctx);
  return policy_value_h1(ctx, policy).at(model.stages.front().theta_r);
}

double evaluate_policy(const PlanningContext& ctx, const AggregatedModel& model,
                       const MarkovPolicy& policy, const EvalConfig& cfg, std::uint64_t stream) {
  if (cfg.exact_h1) return evaluate_policy_exact_h1(ctx, model, policy);
  const std::uint64_t seed = cfg.crn ? cfg.seed : substream_seed(cfg.seed, stream);
  return evaluate_policy_mc(ctx, model, policy, cfg.n_rollouts, seed).mean;
}

SearchResult optimal_policy_search(const PlanningContext& ctx, const AggregatedModel& model,
                                   const std::vector<MarkovPolicy>& policy_class,
                                   const EvalConfig& cfg) {
  if (policy_class.empty()) throw ConfigError("policy class must be nonempty");
  SearchResult out;
  out.values.reserve(policy_class.size());
  for (std::size_t k = 0; k < policy_class.size(); ++k) {
    out.values.push_back(evaluate_policy(ctx, model, policy_class[k], cfg, k));
  }
  for (std::size_t k = 1; k < out.values.size(); ++k) {
    if (out.values[k] > out.values[out.index]) out.index = k;
  }
  out.value = out.values[out.index];
  return out;
}

SubOptimality suboptimality(const PlanningContext& ctx, const AggregatedModel& true_model,
                            const MarkovPolicy& policy,
                            const std::vector<MarkovPolicy>& policy_class, const EvalConfig& cfg) {
  const SearchResult best = optimal_policy_search(ctx, true_model, policy_class, cfg);
  SubOptimality out;
  out.optimal_index = best.index;
  out.j_star = best.value;
  out.j_policy = evaluate_policy(ctx, true_model, policy, cfg, policy_class.size());
  out.raw = out.j_star - out.j_policy;
  out.reported = std::max(0.0, out.raw);
  return out;
}

}  // namespace plan_iv
