#include "plan_iv/pessimistic_planner.hpp"

#include <fmt/format.h>

#include <cmath>

namespace plan_iv {

namespace {

/// Visits every (stage, target) ellipsoid in a fixed order.
template <class Fn>
void for_each_component(const std::vector<StageFits>& fits, Fn&& fn) {
  for (std::size_t h = 0; h < fits.size(); ++h) {
    fn(h, fits[h].reward);
    for (const auto& t : fits[h].transition) fn(h, t);
  }
}

/// Writes θ into the slot of `model` owned by the component `tf`.
void assign(AggregatedModel& model, std::size_t h, const TargetFit& tf, const Vec& theta) {
  auto& st = model.stages[h];
  if (tf.fit.target.kind == TargetKind::reward) {
    st.theta_r = theta;
  } else {
    st.theta_g.row(tf.fit.target.coord) = theta.transpose();
  }
}

const Vec& component_of(const AggregatedModel& model, std::size_t h, const TargetFit& tf,
                        Vec& scratch) {
  const auto& st = model.stages[h];
  if (tf.fit.target.kind == TargetKind::reward) return st.theta_r;
  scratch = st.theta_g.row(tf.fit.target.coord).transpose();
  return scratch;
}

Vec random_boundary(const ConfidenceEllipsoid& ell, Rng& rng) {
  const Index r = ell.range_eigenvalues().size();
  if (r == 0 || ell.c2() == 0.0) return ell.center();
  Vec g = rng.normal_vec(r);
  const double norm = g.norm();
  if (norm == 0.0) g = Vec::Unit(r, 0);
  else g /= norm;
  const Vec scaled = g.cwiseQuotient(ell.range_eigenvalues().cwiseSqrt());
  return ell.center() + std::sqrt(ell.c2()) * (ell.range_eigenvectors() * scaled);
}

}  // namespace

AggregatedModel center_model(const std::vector<StageFits>& fits, Index state_dim) {
  if (fits.empty()) throw ConfigError("no fitted stages");
  AggregatedModel model;
  for (const auto& sf : fits) {
    const Index n = sf.reward.fit.theta_hat.size();
    StageParams p{sf.reward.fit.theta_hat, Mat::Zero(state_dim, n)};
    for (const auto& t : sf.transition) {
      if (t.fit.target.coord >= state_dim || t.fit.theta_hat.size() != n) {
        throw ConfigError("transition fit does not match the state dimension");
      }
      p.theta_g.row(t.fit.target.coord) = t.fit.theta_hat.transpose();
    }
    model.stages.push_back(std::move(p));
  }
  return model;
}

std::vector<ModelCandidate> enumerate_candidates(const std::vector<StageFits>& fits,
                                                 Index state_dim, std::size_t n_random,
                                                 std::uint64_t seed) {
  const AggregatedModel center = center_model(fits, state_dim);
  std::vector<ModelCandidate> out{{center, "center"}};
  for_each_component(fits, [&](std::size_t h, const TargetFit& tf) {
    const auto& ell = tf.ellipsoid;
    for (Index axis = 0; axis < ell.range_eigenvalues().size(); ++axis) {
      for (double sign : {1.0, -1.0}) {
        ModelCandidate c{center, fmt::format("axis_extreme({},{},{},{})", h, tf.fit.target.str(),
                                             axis, sign > 0 ? '+' : '-')};
        assign(c.model, h, tf, ell.boundary_point(ell.range_eigenvectors().col(axis), sign));
        out.push_back(std::move(c));
      }
    }
  });
  for (std::size_t r = 0; r < n_random; ++r) {
    const std::uint64_t sub = substream_seed(seed, r);
    Rng rng(sub);
    ModelCandidate c{center, fmt::format("random_boundary({})", sub)};
    for_each_component(fits, [&](std::size_t h, const TargetFit& tf) {
      assign(c.model, h, tf, random_boundary(tf.ellipsoid, rng));
    });
    out.push_back(std::move(c));
  }
  return out;
}

bool candidate_in_region(const ModelCandidate& candidate, const std::vector<StageFits>& fits,
                         double slack) {
  bool ok = candidate.model.stages.size() == fits.size();
  if (!ok) return false;
  Vec scratch;
  for_each_component(fits, [&](std::size_t h, const TargetFit& tf) {
    ok = ok && tf.ellipsoid.contains(component_of(candidate.model, h, tf, scratch), slack);
  });
  return ok;
}

PlanningProblem PlanningProblem::single(PlanningContext ctx, std::vector<MarkovPolicy> policies) {
  PlanningProblem p;
  p.contexts.push_back(std::move(ctx));
  p.context_of.assign(policies.size(), 0);
  for (std::size_t k = 0; k < policies.size(); ++k) p.labels.push_back(fmt::format("pi{}", k));
  p.policies = std::move(policies);
  return p;
}

void PlanningProblem::validate() const {
  if (policies.empty()) throw ConfigError("policy class must be nonempty");
  if (contexts.empty()) throw ConfigError("planning problem has no context");
  if (context_of.size() != policies.size() || labels.size() != policies.size()) {
    throw ConfigError("planning problem: per-policy arrays differ in length");
  }
  for (std::size_t k : context_of) {
    if (k >= contexts.size()) throw ConfigError("planning problem: context index out of range");
  }
}

double evaluate_member(const PlanningProblem& problem, std::size_t k,
                       const AggregatedModel& model, const EvalConfig& cfg) {
  return evaluate_policy(problem.context(k), model, problem.policies.at(k), cfg, k);
}

LinearValue member_value_h1(const PlanningProblem& problem, std::size_t k) {
  return policy_value_h1(problem.context(k), problem.policies.at(k));
}

SearchResult optimal_policy_search(const PlanningProblem& problem, const AggregatedModel& model,
                                   const EvalConfig& cfg) {
  problem.validate();
  SearchResult out;
  for (std::size_t k = 0; k < problem.size(); ++k) {
    out.values.push_back(evaluate_member(problem, k, model, cfg));
    if (out.values[k] > out.values[out.index]) out.index = k;
  }
  out.value = out.values[out.index];
  return out;
}

SubOptimality suboptimality(const PlanningProblem& problem, const AggregatedModel& true_model,
                            std::size_t chosen, const EvalConfig& cfg) {
  if (chosen >= problem.size()) throw ConfigError("chosen policy index out of range");
  const SearchResult best = optimal_policy_search(problem, true_model, cfg);
  SubOptimality out;
  out.optimal_index = best.index;
  out.j_star = best.value;
  out.j_policy = best.values[chosen];
  out.raw = out.j_star - out.j_policy;
  out.reported = std::max(0.0, out.raw);
  return out;
}

PessimisticValue pessimistic_value(const PlanningContext& ctx, const MarkovPolicy& policy,
                                   const std::vector<ModelCandidate>& candidates,
                                   const EvalConfig& cfg) {
  if (candidates.empty()) throw ConfigError("candidate set must be nonempty");
  PessimisticValue out{std::numeric_limits<double>::infinity(), 0};
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const double v = evaluate_policy(ctx, candidates[c].model, policy, cfg, c);
    if (v < out.value) out = {v, c};
  }
  return out;
}

nlohmann::json PlanResult::to_json() const {
  nlohmann::json unident = nlohmann::json::array();
  for (bool b : unidentified) unident.push_back(b);
  return {{"policy_index", policy_index},
          {"policy_label", policy_label},
          {"policy", policy},
          {"value", value},
          {"argmin_candidate", argmin_candidate},
          {"values", values},
          {"argmins", argmins},
          {"value_matrix", value_matrix},
          {"candidates", candidates},
          {"unidentified_direction", unident},
          {"mode", mode},
          {"eval", eval.to_json()},
          {"seed", seed}};
}

PlanResult plan(const PlanningProblem& problem, const std::vector<ModelCandidate>& candidates,
                const EvalConfig& cfg, std::uint64_t seed) {
  problem.validate();
  if (candidates.empty()) throw ConfigError("candidate set must be nonempty");
  const std::size_t P = problem.size();
  const std::size_t C = candidates.size();
  PlanResult out;
  out.mode = cfg.exact_h1 ? "exact_h1" : "mc";
  out.eval = cfg;
  out.seed = seed;
  for (const auto& c : candidates) out.candidates.push_back(c.provenance);
  out.value_matrix.assign(P, std::vector<double>(C, 0.0));
  for (std::size_t k = 0; k < P; ++k) {
    if (cfg.exact_h1) {
      const LinearValue lv = member_value_h1(problem, k);
      for (std::size_t c = 0; c < C; ++c) {
        candidates[c].model.validate(problem.context(k));
        out.value_matrix[k][c] = lv.at(candidates[c].model.stages.front().theta_r);
      }
    } else {
      for (std::size_t c = 0; c < C; ++c) {
        out.value_matrix[k][c] = evaluate_policy(problem.context(k), candidates[c].model,
                                                 problem.policies[k], cfg, k * C + c);
      }
    }
  }
  for (std::size_t k = 0; k < P; ++k) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (out.value_matrix[k][c] < out.value_matrix[k][arg]) arg = c;
    }
    out.argmins.push_back(arg);
    out.values.push_back(out.value_matrix[k][arg]);
    if (out.values[k] > out.values[out.policy_index]) out.policy_index = k;
  }
  out.value = out.values[out.policy_index];
  out.argmin_candidate = out.argmins[out.policy_index];
  out.policy_label = problem.labels[out.policy_index];
  out.policy = problem.policies[out.policy_index].to_json();
  return out;
}

LcbValue lcb(const ConfidenceEllipsoid& ellipsoid, const LinearValue& value) {
  if (value.feature.size() != ellipsoid.dim()) throw ConfigError("feature dimension mismatch");
  const double center = ellipsoid.center().dot(value.feature) + value.offset;
  if (ellipsoid.c2() == 0.0) return {center, false};
  const Mat& V = ellipsoid.range_eigenvectors();
  const Vec w = V.transpose() * value.feature;
  const Vec outside = value.feature - V * w;
  if (outside.norm() > 1e-9 * std::max(1.0, value.feature.norm())) {
    return {-std::numeric_limits<double>::infinity(), true};
  }
  const double width = std::sqrt(w.cwiseAbs2().cwiseQuotient(ellipsoid.range_eigenvalues()).sum());
  return {center - std::sqrt(ellipsoid.c2()) * width, false};
}

namespace {

std::size_t argmax_lcb(const std::vector<LcbValue>& values) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (values[k].value > values[best].value) best = k;
  }
  return best;
}

}  // namespace

LcbPlan plan_lcb_h1(const PlanningContext& ctx, const ConfidenceEllipsoid& reward_ellipsoid,
                    const std::vector<Vec>& action_grid) {
  if (ctx.horizon != 1) throw ConfigError("plan_lcb_h1 requires horizon 1");
  if (action_grid.empty()) throw ConfigError("action grid must be nonempty");
  if (!ctx.initial_state.finite_support()) {
    throw ConfigError("plan_lcb_h1 needs a finitely supported initial state");
  }
  LcbPlan out;
  for (const auto& a : action_grid) {
    LinearValue mu{Vec::Zero(ctx.features.n_x), 0.0};
    for (const auto& s : ctx.initial_state.support()) {
      const LinearValue m = mean_feature(ctx, 0, s.value, a);
      mu.feature += s.weight * m.feature;
      mu.offset += s.weight * m.offset;
    }
    out.values.push_back(lcb(reward_ellipsoid, mu));
  }
  out.index = argmax_lcb(out.values);
  return out;
}

PlanResult plan_lcb_policies(const PlanningProblem& problem,
                             const ConfidenceEllipsoid& reward_ellipsoid) {
  problem.validate();
  PlanResult out;
  out.mode = "lcb_h1";
  out.eval.exact_h1 = true;
  out.candidates = {"exact_lcb"};
  std::vector<LcbValue> values;
  for (std::size_t k = 0; k < problem.size(); ++k) {
    values.push_back(lcb(reward_ellipsoid, member_value_h1(problem, k)));
    out.values.push_back(values.back().value);
    out.argmins.push_back(0);
    out.unidentified.push_back(values.back().unidentified_direction);
    out.value_matrix.push_back({values.back().value});
  }
  out.policy_index = argmax_lcb(values);
  out.value = out.values[out.policy_index];
  out.policy_label = problem.labels[out.policy_index];
  out.policy = problem.policies[out.policy_index].to_json();
  return out;
}

}  // namespace plan_iv
