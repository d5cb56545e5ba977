#include "plan_iv/iv_estimation.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace plan_iv {

namespace {

constexpr double kMaxCondition = 1e12;
constexpr double kRangeFloor = 1e-10;

struct Moments {
  Mat ZtZ;
  Mat ZtX;
  Vec Zty;
};

Moments moments(const StageDesign& d) {
  return {d.Z.transpose() * d.Z, d.Z.transpose() * d.X, d.Z.transpose() * d.y};
}

/// Cholesky of ZᵀZ + λI after the conditioning check.
Eigen::LLT<Mat> instrument_factor(const Mat& ZtZ, double lambda) {
  if (lambda < 0.0) throw ConfigError("ridge must be nonnegative");
  Mat G = ZtZ;
  G.diagonal().array() += lambda;
  Eigen::SelfAdjointEigenSolver<Mat> eig(G, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > kMaxCondition) {
    throw NumericalError(
        "ZᵀZ + λI is numerically singular (condition number above 1e12); use a ridge λ > 0");
  }
  return Eigen::LLT<Mat>(G);
}

Index numerical_rank(const Mat& S) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(S, Eigen::EigenvaluesOnly);
  const double top = std::max(eig.eigenvalues().cwiseAbs().maxCoeff(), 0.0);
  if (top == 0.0) return 0;
  Index r = 0;
  for (Index k = 0; k < eig.eigenvalues().size(); ++k) {
    if (eig.eigenvalues()[k] > kRangeFloor * top) ++r;
  }
  return r;
}

/// P_Z X with P_Z the exact orthogonal projector onto span(Z).
Mat project_onto_instruments(const StageDesign& d, const Mat& M) {
  Eigen::ColPivHouseholderQR<Mat> qr(d.Z);
  return d.Z * qr.solve(M);
}

std::vector<double> vec_to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

Vec std_to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace

std::string TargetTag::str() const {
  return kind == TargetKind::reward ? std::string("reward") : fmt::format("transition({})", coord);
}

TargetTag TargetTag::parse(const std::string& text) {
  if (text == "reward") return reward();
  long j = -1;
  if (std::sscanf(text.c_str(), "transition(%ld)", &j) == 1 && j >= 0) {
    return transition(static_cast<Index>(j));
  }
  throw ConfigError("unknown target tag: " + text);
}

void StageDesign::validate(bool require_full_rank_size) const {
  const Index K = X.rows();
  if (K < 1) throw ConfigError("design has no rows");
  if (Z.rows() != K || y.size() != K) throw ConfigError("X, Z and y must share the row count");
  if (!X.allFinite() || !Z.allFinite() || !y.allFinite()) {
    throw ConfigError("design contains NaN or Inf");
  }
  if (require_full_rank_size && K < std::max(X.cols(), Z.cols())) {
    throw ConfigError(fmt::format("degenerate design: K = {} < max(m, n) = {}", K,
                                  std::max(X.cols(), Z.cols())));
  }
}

StageDesign build_design(const ObservableDataset& data, const FeatureMaps& features, int h,
                         TargetTag target) {
  if (data.size() == 0) throw ConfigError("dataset is empty");
  if (h < 0 || h >= data.horizon()) throw ConfigError("stage index out of range");
  const Index K = static_cast<Index>(data.size());
  StageDesign d;
  d.h = h;
  d.target = target;
  d.X.resize(K, features.n_x);
  d.Z.resize(K, features.n_z);
  d.y.resize(K);
  for (Index k = 0; k < K; ++k) {
    const auto& t = data.trajectories[static_cast<std::size_t>(k)];
    const auto hs = static_cast<std::size_t>(h);
    const Vec& s = t.states[hs];
    const Vec& a = t.actions[hs];
    const Vec x = features.phi_x(s, a, t.observations[hs]);
    const Vec z = features.psi_z(s, a);
    if (x.size() != features.n_x || z.size() != features.n_z) {
      throw ConfigError("feature map returned the wrong dimension");
    }
    d.X.row(k) = x.transpose();
    d.Z.row(k) = z.transpose();
    if (target.kind == TargetKind::reward) {
      d.y[k] = t.rewards[hs];
    } else {
      const Vec& next = t.states[hs + 1];
      if (target.coord < 0 || target.coord >= next.size()) {
        throw ConfigError("transition coordinate out of range");
      }
      d.y[k] = next[target.coord];
    }
  }
  return d;
}

double default_ridge(const StageDesign& design) {
  return 1e-8 * design.Z.squaredNorm() / static_cast<double>(design.Z.cols());
}

double minimax_loss_linear(const StageDesign& design, const Vec& theta, double lambda) {
  design.validate(false);
  if (theta.size() != design.X.cols()) throw ConfigError("θ has the wrong dimension");
  const Vec e = design.y - design.X * theta;
  const Vec Zte = design.Z.transpose() * e;
  const auto llt = instrument_factor(design.Z.transpose() * design.Z, lambda);
  return Zte.dot(llt.solve(Zte)) / (2.0 * static_cast<double>(design.rows()));
}

TwoSlsFit fit_2sls(const StageDesign& design, double lambda) {
  return fit_2sls(design, lambda, lambda);
}

TwoSlsFit fit_2sls(const StageDesign& design, double lambda_inner, double lambda_outer) {
  design.validate(true);
  if (lambda_outer < 0.0) throw ConfigError("ridge must be nonnegative");
  const Moments mo = moments(design);
  const auto llt = instrument_factor(mo.ZtZ, lambda_inner);
  const Mat W = llt.solve(mo.ZtX);  // (ZᵀZ+λI)⁻¹ZᵀX
  Mat S = mo.ZtX.transpose() * W;   // XᵀP_Z X
  S = 0.5 * (S + S.transpose());
  const Vec b = W.transpose() * mo.Zty;  // XᵀP_Z y
  const Index n = design.X.cols();
  const double K = static_cast<double>(design.rows());

  TwoSlsFit fit;
  fit.rank = numerical_rank(S);
  if (lambda_outer == 0.0 && fit.rank < n) {
    throw NumericalError(fmt::format(
        "XᵀP_Z X has rank {} < {}; the instruments do not identify every direction, use λ > 0",
        fit.rank, n));
  }
  Mat system = S;
  system.diagonal().array() += lambda_outer;
  Eigen::LDLT<Mat> ldlt(system);
  if (ldlt.info() != Eigen::Success) throw NumericalError("2SLS normal equations failed");
  fit.theta_hat = ldlt.solve(b);
  if (!fit.theta_hat.allFinite()) throw NumericalError("2SLS produced a non-finite estimate");
  fit.A = S / (2.0 * K);
  fit.lambda = lambda_inner;
  fit.lambda_outer = lambda_outer;
  fit.K = design.rows();
  fit.h = design.h;
  fit.target = design.target;
  const Vec Zte = mo.Zty - mo.ZtX * fit.theta_hat;
  const Vec beta = llt.solve(Zte);
  fit.loss_at_min = std::max(0.0, Zte.dot(beta) / (2.0 * K));
  fit.beta_norm = beta.norm();
  return fit;
}

Vec naive_ols(const StageDesign& design, double lambda) {
  design.validate(true);
  if (lambda < 0.0) throw ConfigError("ridge must be nonnegative");
  Mat G = design.X.transpose() * design.X;
  G.diagonal().array() += lambda;
  Eigen::SelfAdjointEigenSolver<Mat> eig(G, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  if (!(lo > 0.0) || eig.eigenvalues().maxCoeff() / lo > kMaxCondition) {
    throw NumericalError("XᵀX + λI is numerically singular; use a ridge λ > 0");
  }
  return G.ldlt().solve(design.X.transpose() * design.y);
}

void ThresholdConfig::validate() const {
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("δ must lie in (0, 1)");
  if (!(c0 > 0.0)) throw ConfigError("c0 must be positive");
  if (L < 0.0 || sigma < 0.0) throw ConfigError("L and σ must be nonnegative");
  if (H < 1 || d1 < 1 || K < 1 || m < 1 || n < 1) {
    throw ConfigError("H, d1, K, m and n must be positive");
  }
}

ThresholdConfig ThresholdConfig::from_json(const nlohmann::json& j) { return from_json(j, ThresholdConfig{}); }

ThresholdConfig ThresholdConfig::from_json(const nlohmann::json& j, const ThresholdConfig& base) {
  ThresholdConfig c = base;
  try {
    c.c0 = j.value("c0", c.c0);
    c.delta = j.value("delta", c.delta);
    c.L = j.value("L", c.L);
    c.sigma = j.value("sigma", c.sigma);
    c.H = j.value("H", c.H);
    c.d1 = j.value("d1", c.d1);
    c.K = j.value("K", c.K);
    c.m = j.value("m", c.m);
    c.n = j.value("n", c.n);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad threshold config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json ThresholdConfig::to_json() const {
  return {{"c0", c0}, {"delta", delta}, {"L", L}, {"sigma", sigma}, {"H", H},
          {"d1", d1}, {"K", K},         {"m", m}, {"n", n}};
}

double function_scale(const ThresholdConfig& cfg, double x) {
  const double K = static_cast<double>(cfg.K);
  return cfg.L + cfg.sigma * std::sqrt((std::log(static_cast<double>(cfg.H)) + 1.0) *
                                       std::max(0.0, std::log(K * x)));
}

double threshold_linear(const ThresholdConfig& cfg, double x) {
  cfg.validate();
  const double K = static_cast<double>(cfg.K);
  const double dim = static_cast<double>(std::max(cfg.m, cfg.n));
  const double first = std::sqrt(dim * std::log(K) / K);
  const double second = std::sqrt(
      std::max(0.0, std::log(static_cast<double>(cfg.H) * static_cast<double>(cfg.d1) /
                             cfg.delta)) /
      K);
  return cfg.c0 * function_scale(cfg, x) * (first + second);
}

double threshold_rkhs(const EigenDecay& decay, const ThresholdConfig& cfg, double x) {
  cfg.validate();
  const double K = static_cast<double>(cfg.K);
  double first = 0.0;
  if (decay.kind == EigenDecay::Kind::exponential) {
    first = std::sqrt(std::log(K) / K);
  } else {
    if (!(decay.alpha > 1.0)) throw ConfigError("polynomial eigen-decay needs α > 1");
    first = std::sqrt(std::log(K) / std::pow(K, decay.alpha / (decay.alpha + 1.0)));
  }
  const double second =
      std::sqrt(std::max(0.0, std::log(static_cast<double>(cfg.d1) / cfg.delta)) / K);
  return cfg.c0 * function_scale(cfg, x) * (first + second);
}

ConfidenceEllipsoid::ConfidenceEllipsoid(Vec center, Mat A, double c2)
    : center_(std::move(center)), c2_(c2) {
  if (!(c2_ >= 0.0)) throw ConfigError("ellipsoid radius² must be nonnegative");
  if (A.rows() != center_.size() || A.cols() != center_.size()) {
    throw ConfigError("ellipsoid shape matrix has the wrong size");
  }
  A_ = 0.5 * (A + A.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> eig(A_);
  Vec values = eig.eigenvalues();
  const double top = values.cwiseAbs().maxCoeff();
  if (values.minCoeff() < -1e-12 * std::max(top, 1.0)) {
    clipped_ = true;
    fmt::print(stderr, "warning: shape matrix not PSD (min eigenvalue {:.3g}); clipping at 0\n",
               values.minCoeff());
  }
  values = values.cwiseMax(0.0);
  A_ = eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
  std::vector<Index> range;
  std::vector<Index> null;
  for (Index k = 0; k < values.size(); ++k) {
    (top > 0.0 && values[k] > kRangeFloor * top ? range : null).push_back(k);
  }
  range_values_.resize(static_cast<Index>(range.size()));
  range_vectors_.resize(center_.size(), static_cast<Index>(range.size()));
  for (std::size_t k = 0; k < range.size(); ++k) {
    range_values_[static_cast<Index>(k)] = values[range[k]];
    range_vectors_.col(static_cast<Index>(k)) = eig.eigenvectors().col(range[k]);
  }
  null_vectors_.resize(center_.size(), static_cast<Index>(null.size()));
  for (std::size_t k = 0; k < null.size(); ++k) {
    null_vectors_.col(static_cast<Index>(k)) = eig.eigenvectors().col(null[k]);
  }
}

double ConfidenceEllipsoid::quadratic_form(const Vec& theta) const {
  const Vec d = theta - center_;
  return d.dot(A_ * d);
}

bool ConfidenceEllipsoid::contains(const Vec& theta, double slack) const {
  return quadratic_form(theta) <= c2_ + slack;
}

Vec ConfidenceEllipsoid::boundary_point(const Vec& direction, double sign) const {
  if (direction.size() != center_.size()) throw ConfigError("direction has the wrong size");
  if (c2_ == 0.0) return center_;
  const double q = direction.dot(A_ * direction);
  const double top = range_values_.size() ? range_values_.maxCoeff() : 0.0;
  if (!(q > kRangeFloor * top * direction.squaredNorm()) || top == 0.0) {
    throw NumericalError("direction lies in the null space of the shape matrix");
  }
  return center_ + (sign * std::sqrt(c2_) / std::sqrt(q)) * direction;
}

ConfidenceEllipsoid confidence_ellipsoid(const TwoSlsFit& fit, double c) {
  if (!(c >= 0.0)) throw ConfigError("threshold must be nonnegative");
  return ConfidenceEllipsoid(fit.theta_hat, fit.A, c * c);
}

double KernelSpec::operator()(const Vec& u, const Vec& v) const {
  if (name == "linear") return u.dot(v);
  if (name == "rbf") return std::exp(-(u - v).squaredNorm() / (2.0 * bandwidth * bandwidth));
  throw ConfigError("unknown kernel: " + name);
}

Mat cross_gram(const KernelSpec& kernel, const Mat& left, const Mat& right) {
  if (left.cols() != right.cols()) throw ConfigError("kernel inputs differ in dimension");
  Mat inner = left * right.transpose();
  if (kernel.name == "linear") return inner;
  if (kernel.name != "rbf") throw ConfigError("unknown kernel: " + kernel.name);
  if (!(kernel.bandwidth > 0.0)) throw ConfigError("RBF bandwidth must be positive");
  const Vec ln = left.rowwise().squaredNorm();
  const Vec rn = right.rowwise().squaredNorm();
  const double scale = -1.0 / (2.0 * kernel.bandwidth * kernel.bandwidth);
  for (Index j = 0; j < inner.cols(); ++j) {
    for (Index i = 0; i < inner.rows(); ++i) {
      const double sq = std::max(0.0, ln[i] + rn[j] - 2.0 * inner(i, j));
      inner(i, j) = std::exp(scale * sq);
    }
  }
  return inner;
}

Mat gram_matrix(const KernelSpec& kernel, const Mat& rows) {
  Mat G = cross_gram(kernel, rows, rows);
  return 0.5 * (G + G.transpose());
}

Vec KernelFit::predict(const Mat& X) const { return cross_gram(kernel_x, X, train_x) * alpha; }

Vec KernelFit::apply_projection(const Vec& r) const {
  const double K = static_cast<double>(train_x.rows());
  return r - K * lambda * test_factor.solve(r);
}

double KernelFit::loss(const Vec& coefficients) const {
  const Vec r = y - gram_x * coefficients;
  return r.dot(apply_projection(r)) / (2.0 * static_cast<double>(train_x.rows()));
}

namespace {

void check_psd_gram(const Mat& G, const char* which) {
  Mat J = G;
  const double jitter = 1e-8 * std::max(1.0, G.diagonal().maxCoeff());
  J.diagonal().array() += jitter;
  Eigen::LDLT<Mat> ldlt(J);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().minCoeff() < -jitter) {
    throw NumericalError(fmt::format("{} Gram matrix is not PSD after jitter", which));
  }
}

}  // namespace

KernelFit fit_kernel_iv(const StageDesign& design, const KernelSpec& kernel_x,
                        const KernelSpec& kernel_z, double lambda) {
  design.validate(false);
  if (!(lambda > 0.0)) throw ConfigError("kernel IV needs λ > 0");
  const Index n = design.rows();
  if (n > 5000) throw ConfigError("kernel IV is limited to K ≤ 5000 (dense Gram matrices)");
  const double K = static_cast<double>(n);

  KernelFit fit;
  fit.kernel_x = kernel_x;
  fit.kernel_z = kernel_z;
  fit.lambda = lambda;
  fit.train_x = design.X;
  fit.y = design.y;
  fit.gram_x = gram_matrix(kernel_x, design.X);
  fit.gram_z = gram_matrix(kernel_z, design.Z);
  check_psd_gram(fit.gram_x, "covariate");
  check_psd_gram(fit.gram_z, "instrument");

  Mat C = fit.gram_z;
  C.diagonal().array() += K * lambda;
  fit.test_factor.compute(C);
  if (fit.test_factor.info() != Eigen::Success) {
    throw NumericalError("instrument Gram factorization failed");
  }
  // Stationarity (M G + 2Kλ I) α = M y with M = C⁻¹G_F, multiplied through by C.
  Mat system = fit.gram_z * fit.gram_x;
  system += 2.0 * K * lambda * C;
  const Vec rhs = fit.gram_z * design.y;
  Eigen::PartialPivLU<Mat> lu(system);
  fit.alpha = lu.solve(rhs);
  if (!fit.alpha.allFinite()) throw NumericalError("kernel IV solve produced non-finite values");
  return fit;
}

double projected_mse(const StageDesign& design, const Vec& theta, const Vec& theta_ref) {
  design.validate(false);
  const Vec v = design.X * (theta - theta_ref);
  const Vec pv = project_onto_instruments(design, v);
  return pv.squaredNorm() / static_cast<double>(design.rows());
}

double ill_posedness_linear(const StageDesign& design) {
  design.validate(false);
  const double K = static_cast<double>(design.rows());
  const Mat PX = project_onto_instruments(design, design.X);
  Mat S1 = design.X.transpose() * design.X / K;
  Mat S2 = design.X.transpose() * PX / K;
  S2 = 0.5 * (S2 + S2.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> eig(S2);
  const double top = eig.eigenvalues().maxCoeff();
  if (!(top > 1e-14 * std::max(S1.trace(), 1e-300))) {
    throw NumericalError("the instruments carry no information about the covariates");
  }
  std::vector<Index> keep;
  for (Index k = 0; k < eig.eigenvalues().size(); ++k) {
    if (eig.eigenvalues()[k] > kRangeFloor * top) keep.push_back(k);
  }
  Mat U(S2.rows(), static_cast<Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    U.col(static_cast<Index>(k)) =
        eig.eigenvectors().col(keep[k]) / std::sqrt(eig.eigenvalues()[keep[k]]);
  }
  Mat T = U.transpose() * S1 * U;
  T = 0.5 * (T + T.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> gen(T, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, gen.eigenvalues().maxCoeff()));
}

std::string_view to_string(Estimator e) { return e == Estimator::iv ? "iv" : "ols"; }

Estimator parse_estimator(std::string_view name) {
  if (name == "iv") return Estimator::iv;
  if (name == "ols") return Estimator::ols;
  throw ConfigError("unknown estimator: " + std::string(name));
}

FitOptions FitOptions::from_json(const nlohmann::json& j) { return from_json(j, FitOptions{}); }

FitOptions FitOptions::from_json(const nlohmann::json& j, const FitOptions& base) {
  FitOptions o = base;
  try {
    if (j.contains("estimator")) o.estimator = parse_estimator(j.at("estimator").get<std::string>());
    if (j.contains("lambda") && !j.at("lambda").is_null()) o.lambda = j.at("lambda").get<double>();
    if (j.contains("threshold")) {
      o.threshold = ThresholdConfig::from_json(j.at("threshold"), o.threshold);
      o.c0_transition = j.at("threshold").value("c0_transition", o.c0_transition);
    }
    o.reward_only = j.value("reward_only", o.reward_only);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad fit options: ") + e.what());
  }
  return o;
}

std::vector<StageFits> fit_all(const ObservableDataset& data, const FeatureMaps& features,
                               const FitOptions& options) {
  if (data.size() == 0) throw ConfigError("dataset is empty");
  const int H = data.horizon();
  const Index d1 = data.state_dim();
  auto fit_target = [&](int h, TargetTag tag) {
    StageDesign d = build_design(data, features, h, tag);
    if (options.estimator == Estimator::ols) d.Z = d.X;
    const double lambda = options.lambda >= 0.0 ? options.lambda : default_ridge(d);
    TwoSlsFit fit = fit_2sls(d, lambda);
    ThresholdConfig cfg = options.threshold;
    cfg.H = H;
    cfg.d1 = d1;
    cfg.K = d.rows();
    cfg.m = d.Z.cols();
    cfg.n = d.X.cols();
    double x = 1.0;
    if (tag.kind == TargetKind::transition) {
      x = static_cast<double>(d1);
      if (options.c0_transition > 0.0) cfg.c0 = options.c0_transition;
    }
    const double c = threshold_linear(cfg, x);
    ConfidenceEllipsoid ell = confidence_ellipsoid(fit, c);
    return TargetFit{std::move(fit), std::move(ell), c};
  };
  std::vector<StageFits> out;
  for (int h = 0; h < H; ++h) {
    StageFits sf{fit_target(h, TargetTag::reward()), {}};
    if (!options.reward_only) {
      for (Index j = 0; j < d1; ++j) sf.transition.push_back(fit_target(h, TargetTag::transition(j)));
    }
    out.push_back(std::move(sf));
  }
  return out;
}

nlohmann::json fit_to_json(const TwoSlsFit& fit, double c2) {
  nlohmann::json A = nlohmann::json::array();
  for (Index r = 0; r < fit.A.rows(); ++r) A.push_back(vec_to_std(fit.A.row(r).transpose()));
  return {{"theta_hat", vec_to_std(fit.theta_hat)},
          {"A", A},
          {"c2", c2},
          {"lambda", fit.lambda},
          {"lambda_outer", fit.lambda_outer},
          {"loss_at_min", fit.loss_at_min},
          {"rank", fit.rank},
          {"beta_norm", fit.beta_norm},
          {"K", fit.K},
          {"target_tag", fit.target.str()},
          {"h", fit.h}};
}

nlohmann::json fits_to_json(const std::vector<StageFits>& fits) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& sf : fits) {
    nlohmann::json trans = nlohmann::json::array();
    for (const auto& t : sf.transition) trans.push_back(fit_to_json(t.fit, t.ellipsoid.c2()));
    out.push_back({{"reward", fit_to_json(sf.reward.fit, sf.reward.ellipsoid.c2())},
                   {"transition", trans}});
  }
  return out;
}

namespace {

TargetFit target_from_json(const nlohmann::json& j) {
  TwoSlsFit fit;
  fit.theta_hat = std_to_vec(j.at("theta_hat").get<std::vector<double>>());
  const auto rows = j.at("A").get<std::vector<std::vector<double>>>();
  fit.A.resize(static_cast<Index>(rows.size()), fit.theta_hat.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<Index>(rows[r].size()) != fit.theta_hat.size()) {
      throw ConfigError("fit JSON: A has the wrong shape");
    }
    fit.A.row(static_cast<Index>(r)) = std_to_vec(rows[r]).transpose();
  }
  fit.lambda = j.at("lambda").get<double>();
  fit.lambda_outer = j.value("lambda_outer", fit.lambda);
  fit.loss_at_min = j.at("loss_at_min").get<double>();
  fit.rank = j.at("rank").get<Index>();
  fit.beta_norm = j.value("beta_norm", 0.0);
  fit.K = j.value("K", Index{0});
  fit.target = TargetTag::parse(j.at("target_tag").get<std::string>());
  fit.h = j.at("h").get<int>();
  const double c2 = j.at("c2").get<double>();
  ConfidenceEllipsoid ell(fit.theta_hat, fit.A, c2);
  return TargetFit{std::move(fit), std::move(ell), std::sqrt(c2)};
}

}  // namespace

std::vector<StageFits> fits_from_json(const nlohmann::json& j) {
  std::vector<StageFits> out;
  try {
    for (const auto& stage : j) {
      StageFits sf{target_from_json(stage.at("reward")), {}};
      for (const auto& t : stage.at("transition")) sf.transition.push_back(target_from_json(t));
      out.push_back(std::move(sf));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad fit JSON: ") + e.what());
  }
  return out;
}

double required_c0(const TwoSlsFit& fit, const Vec& theta_star, double unit_threshold) {
  if (!(unit_threshold > 0.0)) throw ConfigError("unit threshold must be positive");
  const Vec d = theta_star - fit.theta_hat;
  return std::sqrt(std::max(0.0, d.dot(fit.A * d))) / unit_threshold;
}

Calibration calibrate_c0(std::vector<double> required, double delta) {
  if (required.empty()) throw ConfigError("calibration needs at least one replication");
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("δ must lie in (0, 1)");
  std::sort(required.begin(), required.end());
  const double n = static_cast<double>(required.size());
  auto idx = static_cast<std::size_t>(std::ceil((1.0 - delta) * n - 1e-9));
  idx = std::clamp<std::size_t>(idx, 1, required.size()) - 1;
  Calibration out;
  out.raw_quantile = required[idx];
  out.c0 = std::max(0.1, std::ceil(out.raw_quantile * 10.0 - 1e-9) / 10.0);
  out.replications = required.size();
  return out;
}

}  // namespace plan_iv
