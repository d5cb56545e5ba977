#include "doctest.h"
#include "test_support.hpp"

#include "plan_iv/aggregated_mdp.hpp"
#include "plan_iv/applications.hpp"

using namespace plan_iv;
using namespace plan_iv::testing;

namespace {

// Two equally likely types with o = a + type and f1 = 0.5·type.
ToyOptions two_type_options() {
  ToyOptions o;
  o.population = Distribution::finite({{vec({-1}), 0.5}, {vec({2}), 0.5}});
  o.observation = [](const Vec&, const Vec& a, const Vec& t, const Vec&) -> Vec { return a + t; };
  o.f1 = [](const Vec& t) { return 0.5 * t[0] - 0.25; };
  o.theta_r = vec({1.5, -1});
  o.theta_g = mat({{0.5, 0.3}});
  o.f2 = [](const Vec& t) -> Vec { return vec({t[0] - 0.5}); };
  o.sigma = 0.2;
  o.initial = Distribution::point_mass(vec({0.4}));
  return o;
}

// Independent enumeration of E[φ_x] over the bandit planning context for one member.
double bandit_value_by_hand(const PlanningProblem& problem, std::size_t k, const Vec& theta) {
  const PlanningContext& ctx = problem.context(k);
  const auto& st = ctx.stages.front();
  const Vec s = ctx.initial_state.support().front().value;
  const auto& probs = problem.policies[k].probabilities(0, s);
  double value = 0.0;
  for (std::size_t a = 0; a < probs.size(); ++a) {
    for (const auto& type : st.population.support()) {
      const Vec b = st.agent.respond(s, ctx.action_set[a], type.value);
      for (const auto& o : st.channel.outcomes(s, ctx.action_set[a], type.value, b)) {
        const Vec x = ctx.features.phi_x(s, ctx.action_set[a], o.value);
        value += probs[a] * type.weight * o.weight *
                 (x.dot(theta) + st.reward_confounder(type.value));
      }
    }
  }
  return value;
}

}  // namespace

TEST_CASE("marginal reward through a degenerate channel is the plain linear reward") {
  ToyOptions o;
  o.observation = [](const Vec&, const Vec&, const Vec&, const Vec&) -> Vec { return vec({2.5}); };
  o.theta_r = vec({2, 3});
  const auto spec = toy_spec(o);
  Rng rng(1);
  const auto r = marginal_reward(spec.env, spec.truth, 0, vec({-1}), vec({1}), 10, rng);
  CHECK(r.value == doctest::Approx(2 * 2.5 - 3));
  CHECK(r.standard_error == 0.0);
}

TEST_CASE("two-type marginal reward is the weighted sum and Monte Carlo agrees") {
  const auto spec = toy_spec(two_type_options());
  const Vec s = vec({0.4});
  const Vec a = vec({1});
  // o = 0 for type -1 and o = 3 for type 2
  const double by_hand = 0.5 * (1.5 * 0 - 0.4) + 0.5 * (1.5 * 3 - 0.4) + 0.5 * (-0.5 - 0.25) +
                         0.5 * (1.0 - 0.25);
  Rng rng(2);
  const auto exact = marginal_reward(spec.env, spec.truth, 0, s, a, 1, rng);
  CHECK(exact.value == doctest::Approx(by_hand).epsilon(1e-14));
  const auto mc = marginal_reward_mc(spec.env, spec.truth, 0, s, a, 100000, rng);
  CHECK(std::abs(mc.value - exact.value) <= 5.0 * mc.standard_error);
  CHECK_THROWS_AS(marginal_reward(spec.env, spec.truth, 0, s, a, 0, rng), ConfigError);
}

TEST_CASE("noise-free next state is the drift") {
  ToyOptions o;
  o.observation = [](const Vec&, const Vec&, const Vec&, const Vec&) -> Vec { return vec({2}); };
  o.theta_g = mat({{0.5, 0.25}});
  const auto spec = toy_spec(o);
  Rng rng(3);
  CHECK(sample_next_state(spec.env, spec.truth, 0, vec({4}), vec({0}), rng)[0] ==
        doctest::Approx(0.5 * 2 + 0.25 * 4));
}

TEST_CASE("next-state draws average to the enumerated mixture mean and replay by seed") {
  const auto spec = toy_spec(two_type_options());
  const Vec s = vec({0.4});
  const Vec a = vec({1});
  double exact = 0.0;
  for (const auto& t : spec.env.stages[0].population.support()) {
    const Vec o = a + t.value;
    exact += t.weight * ((spec.truth.stages[0].theta_g * vec({o[0], s[0]}))[0] + t.value[0] - 0.5);
  }
  Rng rng(4);
  const std::size_t n = 100000;
  std::vector<double> draws(n);
  for (auto& x : draws) x = sample_next_state(spec.env, spec.truth, 0, s, a, rng)[0];
  CHECK(std::abs(mean_of(draws) - exact) <= 5.0 * std_of(draws) / std::sqrt(double(n)));

  Rng r1(77), r2(77);
  CHECK(sample_next_state(spec.env, spec.truth, 0, s, a, r1) ==
        sample_next_state(spec.env, spec.truth, 0, s, a, r2));
}

TEST_CASE("zero reward parameters give zero value with zero standard error") {
  auto o = two_type_options();
  o.horizon = 3;
  o.theta_r = Vec::Zero(2);
  o.f1 = [](const Vec&) { return 0.0; };
  const auto spec = toy_spec(o);
  const auto policy = MarkovPolicy::constant(3, 1, 2, 1);
  const auto v = evaluate_policy_mc(spec.env, spec.truth, policy, 500, 9);
  CHECK(v.mean == 0.0);
  CHECK(v.standard_error == 0.0);
  CHECK(v.n_rollouts == 500);
}

TEST_CASE("horizon-one deterministic rollouts equal the marginal reward") {
  ToyOptions o;
  o.initial = Distribution::point_mass(vec({0.3}));
  o.theta_r = vec({2, -1});
  const auto spec = toy_spec(o);
  const auto policy = MarkovPolicy::constant(1, 1, 2, 1);
  const auto v = evaluate_policy_mc(spec.env, spec.truth, policy, 10, 1);
  Rng rng(0);
  CHECK(v.mean == doctest::Approx(
                      marginal_reward(spec.env, spec.truth, 0, vec({0.3}), vec({1}), 1, rng).value));
  CHECK(v.standard_error < 1e-12);
}

TEST_CASE("Monte Carlo and exact horizon-one values agree") {
  auto o = two_type_options();
  o.initial = Distribution::finite({{vec({-1}), 0.3}, {vec({1}), 0.7}});
  const auto spec = toy_spec(o);
  const MarkovPolicy policy({vec({-1}), vec({1})}, {{{0.2, 0.8}, {0.6, 0.4}}});
  const double exact = evaluate_policy_exact_h1(spec.env, spec.truth, policy);
  const auto mc = evaluate_policy_mc(spec.env, spec.truth, policy, 100000, 5);
  CHECK(std::abs(mc.mean - exact) <= 3.0 * mc.standard_error);
}

TEST_CASE("exact horizon-one evaluation on small hand cases") {
  ToyOptions o;
  o.observation = [](const Vec&, const Vec&, const Vec&, const Vec&) -> Vec { return vec({1}); };
  o.theta_r = vec({2, 5});
  o.actions = scalars({0});
  auto spec = toy_spec(o);
  // μ(a) = (1, 0)
  CHECK(evaluate_policy_exact_h1(spec.env, spec.truth, MarkovPolicy::constant(1, 1, 1, 0)) ==
        doctest::Approx(2.0));

  ToyOptions two;
  two.actions = scalars({1, 3});
  two.theta_r = vec({1, 0});
  spec = toy_spec(two);
  const MarkovPolicy mix({vec({0})}, {{{0.5, 0.5}}});
  CHECK(evaluate_policy_exact_h1(spec.env, spec.truth, mix) == doctest::Approx(2.0));
}

TEST_CASE("exact evaluation rejects longer horizons and continuous initial states") {
  auto o = two_type_options();
  o.horizon = 2;
  auto spec = toy_spec(o);
  CHECK_THROWS_AS(evaluate_policy_exact_h1(spec.env, spec.truth, MarkovPolicy::constant(2, 1, 2, 0)),
                  ConfigError);
  o = two_type_options();
  o.initial = Distribution::standard_normal(1);
  spec = toy_spec(o);
  CHECK_THROWS_AS(evaluate_policy_exact_h1(spec.env, spec.truth, MarkovPolicy::constant(1, 1, 2, 0)),
                  ConfigError);
}

TEST_CASE("bandit members agree between exact and Monte Carlo evaluation") {
  const AppInstance app = build_strategic_bandit({});
  EvalConfig mc;
  mc.n_rollouts = 100000;
  mc.seed = 3;
  EvalConfig exact;
  exact.exact_h1 = true;
  for (std::size_t k = 0; k < app.problem.size(); ++k) {
    const auto est = evaluate_policy_mc(app.problem.context(k), app.spec.truth,
                                        app.problem.policies[k], mc.n_rollouts, mc.seed);
    const double e = evaluate_member(app.problem, k, app.spec.truth, exact);
    CHECK(std::abs(est.mean - e) <= 3.0 * est.standard_error);
    CHECK(e == doctest::Approx(bandit_value_by_hand(app.problem, k, app.spec.truth.stages[0].theta_r))
                   .epsilon(1e-12));
  }
}

TEST_CASE("policy search over simple classes") {
  ToyOptions o;
  o.actions = scalars({1, 3});
  o.theta_r = vec({1, 0});
  const auto spec = toy_spec(o);
  EvalConfig exact;
  exact.exact_h1 = true;
  const auto single = optimal_policy_search(spec.env, spec.truth,
                                            {MarkovPolicy::constant(1, 1, 2, 1)}, exact);
  CHECK(single.index == 0);
  const auto pair = optimal_policy_search(
      spec.env, spec.truth, {MarkovPolicy::constant(1, 1, 2, 0), MarkovPolicy::constant(1, 1, 2, 1)},
      exact);
  CHECK(pair.index == 1);
  CHECK(pair.value == doctest::Approx(3.0));
  CHECK_THROWS_AS(optimal_policy_search(spec.env, spec.truth, {}, exact), ConfigError);

  const auto tie = optimal_policy_search(
      spec.env, spec.truth, {MarkovPolicy::constant(1, 1, 2, 1), MarkovPolicy::constant(1, 1, 2, 1)},
      exact);
  CHECK(tie.index == 0);
}

TEST_CASE("bandit policy search matches brute force over the nine members") {
  const AppInstance app = build_strategic_bandit({});
  REQUIRE(app.problem.size() == 9);
  EvalConfig exact;
  exact.exact_h1 = true;
  const auto found = optimal_policy_search(app.problem, app.spec.truth, exact);
  std::size_t best = 0;
  double best_v = -1e300;
  for (std::size_t k = 0; k < 9; ++k) {
    const double v = bandit_value_by_hand(app.problem, k, app.spec.truth.stages[0].theta_r);
    if (v > best_v + 1e-12) {
      best_v = v;
      best = k;
    }
  }
  CHECK(found.index == best);
  CHECK(found.value == doctest::Approx(best_v).epsilon(1e-12));
}

TEST_CASE("suboptimality of the optimum is zero and hand gaps are reproduced") {
  ToyOptions o;
  o.actions = scalars({1, 3});
  o.theta_r = vec({1, 0});
  const auto spec = toy_spec(o);
  const std::vector<MarkovPolicy> cls{MarkovPolicy::constant(1, 1, 2, 0),
                                      MarkovPolicy::constant(1, 1, 2, 1)};
  EvalConfig exact;
  exact.exact_h1 = true;
  const auto gap = suboptimality(spec.env, spec.truth, cls[0], cls, exact);
  CHECK(gap.raw == doctest::Approx(2.0));
  CHECK(gap.reported == doctest::Approx(2.0));
  CHECK(gap.optimal_index == 1);

  auto noisy = two_type_options();
  noisy.horizon = 2;
  const auto nspec = toy_spec(noisy);
  const auto ncls = enumerate_deterministic_policies({vec({0})}, 2, 2);
  EvalConfig mc;
  mc.n_rollouts = 20000;
  mc.seed = 8;
  const auto best = optimal_policy_search(nspec.env, nspec.truth, ncls, mc);
  const auto zero = suboptimality(nspec.env, nspec.truth, ncls[best.index], ncls, mc);
  CHECK(zero.raw == 0.0);
  CHECK(zero.reported == 0.0);

  const AppInstance app = build_strategic_bandit({});
  const SearchResult opt = optimal_policy_search(app.problem, app.spec.truth, exact);
  const Vec& theta = app.spec.truth.stages[0].theta_r;
  for (std::size_t k = 0; k < app.problem.size(); ++k) {
    const auto s = suboptimality(app.problem, app.spec.truth, k, exact);
    CHECK(s.raw == doctest::Approx(bandit_value_by_hand(app.problem, opt.index, theta) -
                                   bandit_value_by_hand(app.problem, k, theta))
                       .epsilon(1e-12));
    CHECK(s.reported >= 0.0);
  }
}

TEST_CASE("with common random numbers the rollout value is linear in the reward parameters") {
  auto o = two_type_options();
  o.horizon = 2;
  o.f1 = [](const Vec&) { return 0.0; };
  const auto spec = toy_spec(o);
  const auto policy = MarkovPolicy::constant(2, 1, 2, 1);
  const double base = evaluate_policy_mc(spec.env, spec.truth, policy, 2000, 6).mean;
  for (double alpha : {0.0, 0.5, 1.0, 2.0}) {
    AggregatedModel scaled = spec.truth;
    for (auto& st : scaled.stages) st.theta_r *= alpha;
    const double v = evaluate_policy_mc(spec.env, scaled, policy, 2000, 6).mean;
    CHECK(v == doctest::Approx(alpha * base).epsilon(1e-12).scale(1.0));
  }
}

TEST_CASE("rollout standard error shrinks like one over root n") {
  auto o = two_type_options();
  o.horizon = 2;
  const auto spec = toy_spec(o);
  const auto policy = MarkovPolicy::constant(2, 1, 2, 0);
  double prev = evaluate_policy_mc(spec.env, spec.truth, policy, 1000, 1).standard_error;
  for (std::size_t n : {10000u, 100000u}) {
    const double se = evaluate_policy_mc(spec.env, spec.truth, policy, n, 1).standard_error;
    const double ratio = prev / se;
    CHECK(ratio > std::sqrt(10.0) / 2.0);
    CHECK(ratio < std::sqrt(10.0) * 2.0);
    prev = se;
  }
}

TEST_CASE("policy search is invariant to positive affine reward rescaling") {
  ToyOptions o;
  o.actions = scalars({-1, 0.5, 2, 1});
  o.initial = Distribution::finite({{vec({1}), 1.0}});
  // with s ≡ 1 the second feature is an intercept
  o.theta_r = vec({-0.3, 0.2});
  o.observation = [](const Vec&, const Vec& a, const Vec&, const Vec&) -> Vec {
    return vec({a[0] - 0.4 * a[0] * a[0]});
  };
  auto spec = toy_spec(o);
  const auto cls = enumerate_deterministic_policies({vec({1})}, 1, 4);
  EvalConfig exact;
  exact.exact_h1 = true;
  const std::size_t base = optimal_policy_search(spec.env, spec.truth, cls, exact).index;
  for (auto [alpha, beta] : {std::pair{2.0, 0.0}, std::pair{0.5, 3.0}, std::pair{7.0, -2.0}}) {
    AggregatedModel m = spec.truth;
    m.stages[0].theta_r = alpha * spec.truth.stages[0].theta_r + vec({0, beta});
    CHECK(optimal_policy_search(spec.env, m, cls, exact).index == base);
  }
}

TEST_CASE("Markov policies validate rows and serialize as grid and table") {
  CHECK_THROWS_AS(MarkovPolicy({vec({0})}, {{{0.5, 0.4}}}), ConfigError);
  CHECK_THROWS_AS(MarkovPolicy({vec({0})}, {{{1.2, -0.2}}}), ConfigError);
  CHECK_THROWS_AS(MarkovPolicy({vec({0}), vec({1})}, {{{1.0, 0.0}}}), ConfigError);

  const MarkovPolicy p({vec({-1}), vec({1})}, {{{0.25, 0.75}, {1.0, 0.0}}, {{0.0, 1.0}, {0.5, 0.5}}});
  const auto j = p.to_json();
  CHECK(j.contains("grid"));
  CHECK(j.contains("table"));
  const MarkovPolicy back = MarkovPolicy::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(p.probabilities(1, vec({0.9})) == std::vector<double>{0.5, 0.5});
  // equidistant from both grid points: the first one wins
  CHECK(p.nearest(vec({0.0})) == 0);
  CHECK_THROWS_AS(p.probabilities(2, vec({0})), ConfigError);
  CHECK_THROWS_AS(MarkovPolicy::from_json({{"grid", 3}}), ConfigError);
}

TEST_CASE("deterministic policy enumeration covers the class in order") {
  const auto all = enumerate_deterministic_policies({vec({-1}), vec({1})}, 2, 2);
  CHECK(all.size() == 16);
  CHECK(all[1].probabilities(1, vec({1}))[1] == 1.0);
  CHECK(all[8].probabilities(0, vec({-1}))[1] == 1.0);
  CHECK_THROWS_AS(enumerate_deterministic_policies({vec({0})}, 20, 3), ConfigError);
}

TEST_CASE("evaluation config reads its keys and rejects too few rollouts") {
  const auto c = EvalConfig::from_json({{"n_rollouts", 50}, {"seed", 4}, {"crn", false}, {"exact_h1", true}});
  CHECK(c.n_rollouts == 50);
  CHECK(c.seed == 4);
  CHECK_FALSE(c.crn);
  CHECK(c.exact_h1);
  CHECK(EvalConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(EvalConfig::from_json({{"n_rollouts", 1}}), ConfigError);
  CHECK_THROWS_AS(EvalConfig::from_json({{"n_rollouts", "many"}}), ConfigError);
}
