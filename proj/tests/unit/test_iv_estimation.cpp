#include "doctest.h"
#include "test_support.hpp"

#include "plan_iv/applications.hpp"
#include "plan_iv/iv_estimation.hpp"

#include <algorithm>
#include <type_traits>

using namespace plan_iv;
using namespace plan_iv::testing;

namespace {

StageDesign make_design(Mat X, Mat Z, Vec y) {
  StageDesign d;
  d.X = std::move(X);
  d.Z = std::move(Z);
  d.y = std::move(y);
  return d;
}

/// Overidentified random design: x depends on z and on a confounder shared with y.
StageDesign random_design(Rng& rng, Index K, Index m, Index n) {
  Mat Z(K, m), X(K, n);
  Vec y(K);
  Mat pi(m, n);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) pi(i, j) = rng.normal();
  const Vec theta = rng.normal_vec(n);
  for (Index k = 0; k < K; ++k) {
    const Vec z = rng.normal_vec(m);
    const double u = rng.normal();
    Z.row(k) = z.transpose();
    X.row(k) = (pi.transpose() * z).transpose() + Vec::Constant(n, u).transpose() +
               0.3 * rng.normal_vec(n).transpose();
    y[k] = X.row(k).dot(theta) + u + 0.2 * rng.normal();
  }
  return make_design(X, Z, y);
}

/// Maximizes (1/K)eᵀZβ − (1/2K)(‖Zβ‖² + λ‖β‖²) over β with conjugate gradients.
double inner_max_by_cg(const StageDesign& d, const Vec& theta, double lambda) {
  const double K = static_cast<double>(d.rows());
  const Vec e = d.y - d.X * theta;
  auto apply = [&](const Vec& v) -> Vec {
    return (d.Z.transpose() * (d.Z * v) + lambda * v) / K;
  };
  const Vec b = d.Z.transpose() * e / K;
  Vec beta = Vec::Zero(d.Z.cols());
  Vec r = b;
  Vec p = r;
  for (int it = 0; it < 10 * d.Z.cols() && r.norm() > 1e-15 * (1 + b.norm()); ++it) {
    const Vec Ap = apply(p);
    const double a = r.squaredNorm() / p.dot(Ap);
    beta += a * p;
    const Vec r_next = r - a * Ap;
    p = r_next + (r_next.squaredNorm() / r.squaredNorm()) * p;
    r = r_next;
  }
  return b.dot(beta) - 0.5 * beta.dot(apply(beta));
}

/// Exact orthogonal projector onto span(Z) through a QR factorization.
Mat projector(const Mat& Z) {
  Eigen::HouseholderQR<Mat> qr(Z);
  const Mat Q = qr.householderQ() * Mat::Identity(Z.rows(), Z.cols());
  return Q * Q.transpose();
}

/// The one-dimensional confounded oracle: z ∈ {−1, 1}, x = z + u, y = x + u.
ObservableDataset oracle_data(std::size_t K, std::uint64_t seed) {
  const auto spec = make_confounded_linear_env(EnvRecipe::calibration_1d());
  return collect_dataset(spec, BehaviorPolicy::uniform(2), K, seed).observable();
}

FeatureMaps oracle_features() {
  return make_confounded_linear_env(EnvRecipe::calibration_1d()).env.features;
}

}  // namespace

TEST_CASE("minimax loss on the two-row hand example") {
  const StageDesign d = make_design(mat({{1}, {2}}), mat({{1}, {1}}), vec({1, 2}));
  CHECK(minimax_loss_linear(d, vec({0}), 0.0) == doctest::Approx(1.125).epsilon(1e-14));
  CHECK(minimax_loss_linear(d, vec({1}), 0.0) == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("minimax loss vanishes when the residual is orthogonal to the instruments") {
  // Z = (1, -1)ᵀ and e = (1, 1): Zᵀe = 0
  const StageDesign d = make_design(mat({{0}, {0}}), mat({{1}, {-1}}), vec({1, 1}));
  CHECK(minimax_loss_linear(d, vec({5}), 0.0) == 0.0);
}

TEST_CASE("minimax loss refuses a numerically singular instrument Gram") {
  const StageDesign d = make_design(mat({{1}, {2}, {3}}), mat({{1, 0}, {1, 0}, {1, 0}}), vec({1, 2, 3}));
  CHECK_THROWS_AS(minimax_loss_linear(d, vec({1}), 0.0), NumericalError);
  CHECK_NOTHROW(minimax_loss_linear(d, vec({1}), 1e-3));
}

TEST_CASE("closed-form loss equals the inner maximization over linear test functions") {
  Rng rng(101);
  for (int rep = 0; rep < 50; ++rep) {
    const Index m = 2 + rep % 4;
    const Index n = 1 + rep % m;
    const StageDesign d = random_design(rng, 40 + rep, m, n);
    const Vec theta = rng.normal_vec(n);
    const double lambda = rep % 3 == 0 ? 0.0 : 0.1 * rng.uniform();
    const double closed = minimax_loss_linear(d, theta, lambda);
    CHECK(std::abs(closed - inner_max_by_cg(d, theta, lambda)) <= 1e-6);
  }
}

TEST_CASE("2SLS with instruments equal to covariates recovers noise-free parameters as OLS") {
  Rng rng(3);
  Mat X(30, 3);
  for (Index k = 0; k < 30; ++k) X.row(k) = rng.normal_vec(3).transpose();
  const Vec theta = vec({1, -2, 0.5});
  const StageDesign d = make_design(X, X, X * theta);
  const TwoSlsFit fit = fit_2sls(d, 0.0);
  CHECK((fit.theta_hat - theta).norm() < 1e-10);
  CHECK((naive_ols(d, 0.0) - theta).norm() < 1e-10);
  CHECK(fit.loss_at_min == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("confounded oracle separates IV from OLS") {
  const auto data = oracle_data(100000, 1);
  const StageDesign d = build_design(data, oracle_features(), 0, TargetTag::reward());
  const double iv = fit_2sls(d, 0.0).theta_hat[0];
  const double ols = naive_ols(d, 0.0)[0];
  CHECK(std::abs(iv - 1.0) <= 0.05);
  CHECK(std::abs(ols - 1.5) <= 0.05);
}

TEST_CASE("estimators are linear in the target") {
  Rng rng(4);
  StageDesign d = random_design(rng, 80, 3, 2);
  const Vec iv = fit_2sls(d, 0.0).theta_hat;
  const Vec ols = naive_ols(d, 0.0);
  d.y *= 2.0;
  CHECK((fit_2sls(d, 0.0).theta_hat - 2.0 * iv).norm() < 1e-10);
  CHECK((naive_ols(d, 0.0) - 2.0 * ols).norm() < 1e-10);
  d.y.setZero();
  CHECK(fit_2sls(d, 0.0).theta_hat.isZero(1e-14));
  CHECK(naive_ols(d, 0.0).isZero(1e-14));
}

TEST_CASE("estimators refuse rank deficiency without a ridge") {
  Mat X(20, 2);
  Rng rng(5);
  for (Index k = 0; k < 20; ++k) {
    const double v = rng.normal();
    X.row(k) << v, 2 * v;
  }
  const StageDesign d = make_design(X, X.col(0), X.col(0));
  CHECK_THROWS_AS(fit_2sls(d, 0.0, 0.0), NumericalError);
  CHECK_NOTHROW(fit_2sls(d, 0.0, 1e-3));
  const StageDesign ols = make_design(X, X, X.col(0));
  CHECK_THROWS_AS(naive_ols(ols, 0.0), NumericalError);
  CHECK_NOTHROW(naive_ols(ols, 1e-3));
}

TEST_CASE("2SLS minimizes the loss to a vanishing gradient") {
  Rng rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    const StageDesign d = random_design(rng, 60, 4, 2 + rep % 3);
    const TwoSlsFit fit = fit_2sls(d, 0.0);
    const Mat P = projector(d.Z);
    const double K = static_cast<double>(d.rows());
    const Vec grad = -d.X.transpose() * P * (d.y - d.X * fit.theta_hat) / K;
    const double scale = 1.0 + (d.X.transpose() * P * d.y).norm();
    CHECK(grad.norm() <= 1e-8 * scale);
    CHECK(fit.loss_at_min == doctest::Approx(minimax_loss_linear(d, fit.theta_hat, 0.0)).epsilon(1e-10));
    CHECK(fit.loss_at_min >= 0.0);
  }
}

TEST_CASE("loss excess over the minimum is the ellipsoid quadratic form") {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const StageDesign d = random_design(rng, 50, 3, 2);
    const TwoSlsFit fit = fit_2sls(d, 0.0);
    const ConfidenceEllipsoid ell = confidence_ellipsoid(fit, 0.3);
    for (int k = 0; k < 5; ++k) {
      const Vec theta = fit.theta_hat + rng.normal_vec(2);
      const double gap = minimax_loss_linear(d, theta, 0.0) - fit.loss_at_min;
      CHECK(std::abs(gap - ell.quadratic_form(theta)) <= 1e-10 * (1.0 + gap));
    }
  }
}

TEST_CASE("2SLS moment residual is orthogonal to the instrumented covariates") {
  Rng rng(8);
  const StageDesign just = random_design(rng, 60, 2, 2);
  const Vec res = just.Z.transpose() * (just.y - just.X * fit_2sls(just, 0.0).theta_hat);
  CHECK(res.norm() <= 1e-6 * (just.Z.transpose() * just.y).norm());

  // overidentified: the moments vanish along range(ZᵀX) in the (ZᵀZ)⁻¹ metric
  const StageDesign over = random_design(rng, 60, 4, 2);
  const Vec m = over.Z.transpose() * (over.y - over.X * fit_2sls(over, 0.0).theta_hat);
  const Mat ZtZ = over.Z.transpose() * over.Z;
  const Mat ZtX = over.Z.transpose() * over.X;
  CHECK((ZtX.transpose() * ZtZ.ldlt().solve(m)).norm() <=
        1e-6 * (over.Z.transpose() * over.y).norm());
}

TEST_CASE("linear threshold matches independent formula evaluations") {
  ThresholdConfig cfg;
  cfg.c0 = 1.0;
  cfg.L = 1.0;
  cfg.sigma = 0.0;
  cfg.H = 1;
  cfg.d1 = 1;
  cfg.m = 5;
  cfg.n = 5;
  cfg.K = 100;
  cfg.delta = 0.1;
  const double c100 = threshold_linear(cfg);
  CHECK(std::abs(c100 - 0.63163) <= 1e-4);

  cfg.K = 400;
  const double ratio = threshold_linear(cfg) / c100;
  CHECK(ratio > 0.5);
  CHECK(ratio < 0.62);

  cfg.K = 100;
  double prev = threshold_linear(cfg);
  for (double delta : {0.3, 0.6, 0.9, 0.999999}) {
    cfg.delta = delta;
    const double c = threshold_linear(cfg);
    CHECK(c < prev);
    prev = c;
  }
  CHECK(prev == doctest::Approx(std::sqrt(5 * std::log(100.0) / 100)).epsilon(1e-3));

  // L_{K,x} = L + σ·√((ln H + 1)·ln(K·x))
  cfg.delta = 0.1;
  cfg.sigma = 0.5;
  cfg.H = 3;
  cfg.d1 = 2;
  CHECK(function_scale(cfg, 2.0) ==
        doctest::Approx(1.0 + 0.5 * std::sqrt((std::log(3.0) + 1) * std::log(200.0))));
  CHECK(threshold_linear(cfg, 2.0) > threshold_linear(cfg, 1.0));
}

TEST_CASE("threshold configuration validates its ranges") {
  ThresholdConfig cfg;
  cfg.delta = 1.0;
  CHECK_THROWS_AS(threshold_linear(cfg), ConfigError);
  cfg.delta = 0.05;
  cfg.c0 = 0.0;
  CHECK_THROWS_AS(threshold_linear(cfg), ConfigError);
  const auto j = nlohmann::json{{"c0", 2.5}, {"delta", 0.1}, {"L", 3.0}};
  const auto parsed = ThresholdConfig::from_json(j);
  CHECK(parsed.c0 == 2.5);
  CHECK(parsed.delta == 0.1);
  CHECK(parsed.L == 3.0);
  CHECK_THROWS_AS(ThresholdConfig::from_json({{"c0", -1.0}}), ConfigError);
}

TEST_CASE("RKHS thresholds on both decay branches") {
  ThresholdConfig cfg;
  cfg.c0 = 1.0;
  cfg.L = 1.0;
  cfg.sigma = 0.0;
  cfg.K = 100;
  cfg.d1 = 1;
  cfg.delta = 0.1;
  CHECK(std::abs(threshold_rkhs(EigenDecay::exponential(), cfg) - 0.36634) <= 1e-4);
  const double second = std::sqrt(std::log(10.0) / 100);
  const double big_alpha = threshold_rkhs(EigenDecay::polynomial(1e9), cfg) - second;
  CHECK(big_alpha == doctest::Approx(std::sqrt(std::log(100.0) / 100)).epsilon(1e-6));
  CHECK_NOTHROW(threshold_rkhs(EigenDecay::polynomial(1.000001), cfg));
  CHECK_THROWS_AS(threshold_rkhs(EigenDecay::polynomial(1.0), cfg), ConfigError);
  CHECK(threshold_rkhs(EigenDecay::polynomial(2.0), cfg) > threshold_rkhs(EigenDecay::exponential(), cfg));
}

TEST_CASE("ellipsoid membership and boundary in one dimension") {
  const ConfidenceEllipsoid ell(vec({0.7}), mat({{2}}), 2.0);
  CHECK(ell.contains(vec({0.7})));
  CHECK(ell.boundary_point(vec({1}), 1.0)[0] == doctest::Approx(1.7));
  CHECK(ell.boundary_point(vec({1}), -1.0)[0] == doctest::Approx(-0.3));
  CHECK(ell.contains(vec({0.7 + 0.99})));
  CHECK_FALSE(ell.contains(vec({0.7 + 1.01})));
  CHECK_THROWS_AS(ConfidenceEllipsoid(vec({0}), mat({{1}}), -1.0), ConfigError);
}

TEST_CASE("boundary points sit exactly c squared above the minimum loss") {
  Rng rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    const StageDesign d = random_design(rng, 70, 4, 3);
    const TwoSlsFit fit = fit_2sls(d, 0.0);
    const double c = 0.05 + rng.uniform();
    const ConfidenceEllipsoid ell = confidence_ellipsoid(fit, c);
    const Vec b = ell.boundary_point(rng.normal_vec(3), rep % 2 ? 1.0 : -1.0);
    CHECK(std::abs(minimax_loss_linear(d, b, 0.0) - fit.loss_at_min - c * c) <= 1e-8);
  }
}

TEST_CASE("ellipsoid clips a numerically indefinite shape matrix and exposes its null space") {
  const ConfidenceEllipsoid ell(vec({0, 0}), mat({{1, 0}, {0, -1e-3}}), 1.0);
  CHECK(ell.clipped());
  CHECK(ell.A()(1, 1) == doctest::Approx(0.0).scale(1.0));
  CHECK(ell.null_space().cols() == 1);
  CHECK(ell.range_eigenvalues().size() == 1);
  CHECK_THROWS_AS(ell.boundary_point(vec({0, 1})), NumericalError);

  const ConfidenceEllipsoid point(vec({1, 2}), mat({{1, 0}, {0, 1}}), 0.0);
  CHECK(point.boundary_point(vec({1, 1})) == vec({1, 2}));
}

TEST_CASE("linear-kernel IV reproduces 2SLS predictions") {
  Rng rng(10);
  for (int rep = 0; rep < 5; ++rep) {
    const StageDesign d = random_design(rng, 80, 3, 2);
    const double lambda = 1e-3 * (1 + rep);
    const double K = static_cast<double>(d.rows());
    const KernelFit kf = fit_kernel_iv(d, {"linear", 1.0}, {"linear", 1.0}, lambda);
    const TwoSlsFit lf = fit_2sls(d, K * lambda, 2.0 * K * lambda);
    CHECK((kf.fitted() - d.X * lf.theta_hat).cwiseAbs().maxCoeff() <= 1e-6);
    const Mat fresh = d.X.topRows(5) * 1.5;
    CHECK((kf.predict(fresh) - fresh * lf.theta_hat).cwiseAbs().maxCoeff() <= 1e-6);
  }
}

TEST_CASE("kernel IV with a zero target has zero coefficients") {
  Rng rng(11);
  StageDesign d = random_design(rng, 40, 2, 2);
  d.y.setZero();
  const KernelFit kf = fit_kernel_iv(d, {"rbf", 1.0}, {"rbf", 1.0}, 1e-3);
  CHECK(kf.alpha.isZero(0.0));
  CHECK(kf.loss(kf.alpha) == 0.0);
  CHECK_THROWS_AS(fit_kernel_iv(d, {"rbf", 1.0}, {"rbf", 1.0}, 0.0), ConfigError);
  CHECK_THROWS_AS(fit_kernel_iv(d, {"cosine", 1.0}, {"rbf", 1.0}, 1e-3), ConfigError);
}

TEST_CASE("kernel IV loss is minimized at the fitted coefficients") {
  Rng rng(12);
  const StageDesign d = random_design(rng, 60, 2, 1);
  const double lambda = 1e-2;
  const KernelFit kf = fit_kernel_iv(d, {"rbf", 2.0}, {"rbf", 1.0}, lambda);
  auto objective = [&](const Vec& a) { return kf.loss(a) + lambda * a.dot(kf.gram_x * a); };
  const double at_fit = objective(kf.alpha);
  for (int k = 0; k < 10; ++k) {
    CHECK(objective(kf.alpha + 1e-3 * rng.normal_vec(kf.alpha.size())) >= at_fit);
  }
}

TEST_CASE("RBF kernel IV recovers the linear truth on the confounded oracle") {
  const auto data = oracle_data(5000, 2);
  const StageDesign d = build_design(data, oracle_features(), 0, TargetTag::reward());
  // The binary instrument pins only two conditional moments, so the fit leans on the
  // smoothness of a wide kernel.
  const KernelFit kf = fit_kernel_iv(d, {"rbf", 5.0}, {"rbf", 1.0}, 1e-6);
  const double mse = (kf.fitted() - d.X.col(0)).squaredNorm() / static_cast<double>(d.rows());
  CHECK(mse <= 0.05);
}

TEST_CASE("projected MSE identities") {
  Rng rng(13);
  const StageDesign d = random_design(rng, 90, 3, 3);
  const Vec ref = rng.normal_vec(3);
  CHECK(projected_mse(d, ref, ref) == 0.0);
  for (int k = 0; k < 5; ++k) {
    const Vec theta = ref + rng.normal_vec(3);
    const Vec diff = theta - ref;
    const Mat P = projector(d.Z);
    const double K = static_cast<double>(d.rows());
    const double quad = diff.dot(d.X.transpose() * P * d.X * diff) / K;
    CHECK(projected_mse(d, theta, ref) == doctest::Approx(quad).epsilon(1e-10));
    const TwoSlsFit fit = fit_2sls(d, 0.0);
    CHECK(projected_mse(d, theta, ref) ==
          doctest::Approx(2.0 * diff.dot(fit.A * diff)).epsilon(1e-8));
  }

  // the second covariate is orthogonal to span(Z)
  Mat Z(4, 1), X(4, 2);
  Z << 1, 1, 1, 1;
  X << 1, 1, 1, -1, 1, 1, 1, -1;
  const StageDesign null_design = make_design(X, Z, Vec::Zero(4));
  CHECK(projected_mse(null_design, vec({0, 3}), vec({0, 0})) == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("ill-posedness estimates") {
  Rng rng(14);
  Mat Z(200, 2);
  for (Index k = 0; k < 200; ++k) Z.row(k) = rng.normal_vec(2).transpose();
  CHECK(ill_posedness_linear(make_design(Z, Z, Vec::Zero(200))) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(ill_posedness_linear(make_design(2 * Z.col(0), Z.col(0), Vec::Zero(200))) ==
        doctest::Approx(1.0).epsilon(1e-6));

  const auto data = oracle_data(100000, 3);
  const StageDesign d = build_design(data, oracle_features(), 0, TargetTag::reward());
  CHECK(std::abs(ill_posedness_linear(d) - std::sqrt(2.0)) <= 0.05);

  CHECK_THROWS_AS(ill_posedness_linear(make_design(Z.col(0), Mat::Zero(200, 1), Vec::Zero(200))),
                  NumericalError);
}

TEST_CASE("design validation refuses degenerate and non-finite designs") {
  StageDesign small = make_design(mat({{1, 2}}), mat({{1, 0}}), vec({1}));
  CHECK_THROWS_AS(small.validate(), ConfigError);
  CHECK_THROWS_AS(fit_2sls(small, 0.0), ConfigError);
  StageDesign bad = make_design(mat({{1}, {std::nan("")}}), mat({{1}, {1}}), vec({1, 2}));
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  StageDesign mismatch = make_design(mat({{1}, {2}}), mat({{1}}), vec({1, 2}));
  CHECK_THROWS_AS(mismatch.validate(), ConfigError);
  CHECK(default_ridge(make_design(mat({{1}, {1}}), mat({{1, 2}, {3, 4}}), vec({0, 0}))) ==
        doctest::Approx(1e-8 * 30.0 / 2.0));
}

TEST_CASE("target tags print and parse") {
  CHECK(TargetTag::reward().str() == "reward");
  CHECK(TargetTag::transition(3).str() == "transition(3)");
  CHECK(TargetTag::parse("transition(3)").coord == 3);
  CHECK(TargetTag::parse("reward").kind == TargetKind::reward);
  CHECK_THROWS_AS(TargetTag::parse("transition(x)"), ConfigError);
  CHECK_THROWS_AS(TargetTag::parse("cost"), ConfigError);
}

TEST_CASE("fit_all covers the reward and every transition coordinate") {
  const auto data = oracle_data(500, 4);
  FitOptions opt;
  const auto fits = fit_all(data, oracle_features(), opt);
  REQUIRE(fits.size() == 1);
  CHECK(fits[0].transition.size() == 1);
  CHECK(fits[0].reward.fit.target.kind == TargetKind::reward);
  CHECK(fits[0].transition[0].fit.target.str() == "transition(0)");

  EnvRecipe r;
  r.horizon = 2;
  r.state_dim = 3;
  r.action_set = {vec({1, 0}), vec({0, 1}), vec({1, 1})};
  const auto spec = make_confounded_linear_env(r);
  const auto multi = fit_all(collect_dataset(spec, BehaviorPolicy::uniform(3), 300, 1).observable(),
                             spec.env.features, opt);
  CHECK(multi.size() == 2);
  CHECK(multi[1].transition.size() == 3);

  opt.reward_only = true;
  CHECK(fit_all(data, oracle_features(), opt)[0].transition.empty());
  CHECK_THROWS_AS(fit_all(ObservableDataset{}, oracle_features(), opt), ConfigError);
}

TEST_CASE("thresholds in fit_all use the transition scale and the per-family c0") {
  EnvRecipe r;
  r.state_dim = 2;
  r.sigma = 0.5;
  r.action_set = {vec({1, 0}), vec({0, 1}), vec({1, 1})};
  const auto spec = make_confounded_linear_env(r);
  const auto data = collect_dataset(spec, BehaviorPolicy::uniform(3), 400, 2).observable();
  FitOptions opt;
  opt.threshold.c0 = 1.0;
  opt.threshold.sigma = 0.5;
  opt.c0_transition = 3.0;
  const auto fits = fit_all(data, spec.env.features, opt);
  ThresholdConfig cfg = opt.threshold;
  cfg.H = 1;
  cfg.d1 = 2;
  cfg.K = 400;
  cfg.m = spec.env.features.n_z;
  cfg.n = spec.env.features.n_x;
  CHECK(fits[0].reward.c == doctest::Approx(threshold_linear(cfg, 1.0)));
  cfg.c0 = 3.0;
  CHECK(fits[0].transition[1].c == doctest::Approx(threshold_linear(cfg, 2.0)));
  CHECK(fits[0].reward.ellipsoid.c2() == doctest::Approx(fits[0].reward.c * fits[0].reward.c));
}

TEST_CASE("without confounding IV and OLS agree within bootstrap error") {
  EnvRecipe r = EnvRecipe::calibration_1d();
  r.confounding_kappa = 0.0;
  r.eps_scale = 1.0;
  const auto spec = make_confounded_linear_env(r);
  const auto data = collect_dataset(spec, BehaviorPolicy::uniform(2), 2000, 5).observable();
  const StageDesign d = build_design(data, spec.env.features, 0, TargetTag::reward());
  const double iv = fit_2sls(d, 0.0).theta_hat[0];
  const double ols = naive_ols(d, 0.0)[0];
  Rng rng(6);
  std::vector<double> iv_b, ols_b;
  for (int b = 0; b < 200; ++b) {
    StageDesign s = d;
    for (Index k = 0; k < d.rows(); ++k) {
      const auto pick = static_cast<Index>(rng.uniform() * static_cast<double>(d.rows()));
      s.X.row(k) = d.X.row(pick);
      s.Z.row(k) = d.Z.row(pick);
      s.y[k] = d.y[pick];
    }
    iv_b.push_back(fit_2sls(s, 0.0).theta_hat[0]);
    ols_b.push_back(naive_ols(s, 0.0)[0]);
  }
  CHECK(std::abs(iv - ols) <= 3.0 * std::max(std_of(iv_b), std_of(ols_b)));
}

TEST_CASE("calibrated reward ellipsoid covers the truth on the oracle") {
  const auto spec = make_confounded_linear_env(EnvRecipe::calibration_1d());
  const Vec theta_star = spec.truth.stages[0].theta_r;
  const std::size_t K = 1000;
  FitOptions opt;
  opt.reward_only = true;
  opt.threshold.c0 = 1.0;

  StrategicMdpSpec twin = spec;
  twin.env = decouple_confounders(spec.env);
  std::vector<double> required;
  for (std::uint64_t rep = 0; rep < 100; ++rep) {
    const auto data = collect_dataset(twin, BehaviorPolicy::uniform(2), K, 1000 + rep).observable();
    const auto f = fit_all(data, spec.env.features, opt)[0].reward;
    required.push_back(required_c0(f.fit, theta_star, f.c));
  }
  opt.threshold.c0 = calibrate_c0(required, 0.05).c0;

  int covered = 0;
  for (std::uint64_t rep = 0; rep < 200; ++rep) {
    const auto data = collect_dataset(spec, BehaviorPolicy::uniform(2), K, 5000 + rep).observable();
    covered += fit_all(data, spec.env.features, opt)[0].reward.ellipsoid.contains(theta_star) ? 1 : 0;
  }
  CHECK(covered / 200.0 >= 0.85);
}

TEST_CASE("c0 calibration takes the upper quantile rounded up to one decimal") {
  std::vector<double> req;
  for (int k = 100; k >= 1; --k) req.push_back(0.01 * k);
  const Calibration cal = calibrate_c0(req, 0.05);
  CHECK(cal.raw_quantile == doctest::Approx(0.95));
  CHECK(cal.c0 == doctest::Approx(1.0));
  CHECK(cal.replications == 100);
  CHECK(calibrate_c0({0.001, 0.002}, 0.05).c0 == doctest::Approx(0.1));
  CHECK(calibrate_c0({0.31}, 0.05).c0 == doctest::Approx(0.4));
  CHECK_THROWS_AS(calibrate_c0({}, 0.05), ConfigError);

  TwoSlsFit fit;
  fit.theta_hat = vec({0});
  fit.A = mat({{2}});
  CHECK(required_c0(fit, vec({1}), 0.5) == doctest::Approx(std::sqrt(2.0) / 0.5));
}

TEST_CASE("fit JSON carries the documented keys and round trips") {
  const auto data = oracle_data(300, 6);
  const auto fits = fit_all(data, oracle_features(), FitOptions{});
  const auto j = fits_to_json(fits);
  const auto& r = j.at(0).at("reward");
  for (const char* key : {"theta_hat", "A", "c2", "lambda", "loss_at_min", "rank", "target_tag", "h"}) {
    CHECK(r.contains(key));
  }
  CHECK(r.at("A").is_array());
  CHECK(r.at("A").at(0).is_array());
  const auto back = fits_from_json(j);
  REQUIRE(back.size() == 1);
  CHECK(back[0].reward.fit.theta_hat == fits[0].reward.fit.theta_hat);
  CHECK(back[0].reward.ellipsoid.c2() == fits[0].reward.ellipsoid.c2());
  CHECK(back[0].transition[0].fit.A == fits[0].transition[0].fit.A);
  CHECK(fits_to_json(back) == j);
  CHECK_THROWS_AS(fits_from_json(nlohmann::json::array({{{"reward", 1}}})), ConfigError);
}

TEST_CASE("fit options parse estimator, ridge and thresholds") {
  const auto o = FitOptions::from_json(
      {{"estimator", "ols"}, {"lambda", 0.5}, {"threshold", {{"c0", 2.0}, {"c0_transition", 4.0}}}});
  CHECK(o.estimator == Estimator::ols);
  CHECK(o.lambda == 0.5);
  CHECK(o.threshold.c0 == 2.0);
  CHECK(o.c0_transition == 4.0);
  CHECK_THROWS_AS(FitOptions::from_json({{"estimator", "gmm"}}), ConfigError);
  CHECK(parse_estimator(to_string(Estimator::iv)) == Estimator::iv);
}

// The estimation API is typed on the observable view: offline datasets with hidden
// diagnostics do not convert, and the observable record has no type or agent-action field.
template <class T>
concept HasHiddenFields = requires(T t) { t.types; } || requires(T t) { t.agent_actions; } ||
                          requires(T t) { t.hidden; };

TEST_CASE("estimators accept only observable records") {
  static_assert(!std::is_convertible_v<OfflineDataset, ObservableDataset>);
  static_assert(!std::is_convertible_v<Trajectory, ObservableTrajectory>);
  static_assert(!HasHiddenFields<ObservableTrajectory>);
  static_assert(!HasHiddenFields<ObservableDataset>);
  static_assert(HasHiddenFields<Trajectory>);
  static_assert(std::is_invocable_v<decltype(&build_design), const ObservableDataset&,
                                    const FeatureMaps&, int, TargetTag>);
  static_assert(!std::is_invocable_v<decltype(&build_design), const OfflineDataset&,
                                     const FeatureMaps&, int, TargetTag>);
  static_assert(!std::is_invocable_v<decltype(&fit_all), const OfflineDataset&,
                                     const FeatureMaps&, const FitOptions&>);
  static_assert(std::is_invocable_v<decltype(&fit_all), const ObservableDataset&,
                                    const FeatureMaps&, const FitOptions&>);
  CHECK(true);
}
