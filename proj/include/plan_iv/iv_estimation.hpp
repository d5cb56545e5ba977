#pragma once

#include "plan_iv/smdp_env.hpp"

#include "json.hpp"

#include <string>
#include <vector>

namespace plan_iv {

enum class TargetKind { reward, transition };

struct TargetTag {
  TargetKind kind = TargetKind::reward;
  Index coord = 0;  // transition coordinate j

  static TargetTag reward() { return {TargetKind::reward, 0}; }
  static TargetTag transition(Index j) { return {TargetKind::transition, j}; }
  /// "reward" or "transition(j)".
  std::string str() const;
  static TargetTag parse(const std::string& text);
};

/// Rows of φ_x (X), ψ_z (Z) and the regression target (y) for one stage and target.
struct StageDesign {
  Mat X;
  Mat Z;
  Vec y;
  int h = 0;
  TargetTag target;

  Index rows() const { return X.rows(); }
  /// Shape agreement, finiteness and, for the default fitter, K ≥ max(m, n).
  void validate(bool require_full_rank_size = true) const;
};

/// Only observable records go in: the estimator never sees types or agent actions.
StageDesign build_design(const ObservableDataset& data, const FeatureMaps& features, int h,
                         TargetTag target);

/// 1e-8 · trace(ZᵀZ) / m.
double default_ridge(const StageDesign& design);

/// (1/2K)·eᵀZ(ZᵀZ + λI)⁻¹Zᵀe with e = y − Xθ.
double minimax_loss_linear(const StageDesign& design, const Vec& theta, double lambda);

struct TwoSlsFit {
  Vec theta_hat;
  double loss_at_min = 0.0;
  Mat A;  // XᵀP_Z X / (2K)
  double lambda = 0.0;        // ridge inside P_Z
  double lambda_outer = 0.0;  // ridge on θ
  Index rank = 0;             // numerical rank of XᵀP_Z X
  double beta_norm = 0.0;     // ‖β*‖ of the optimal linear test function at θ̂
  Index K = 0;
  int h = 0;
  TargetTag target;
};

TwoSlsFit fit_2sls(const StageDesign& design, double lambda);
TwoSlsFit fit_2sls(const StageDesign& design, double lambda_inner, double lambda_outer);

/// (XᵀX + λI)⁻¹Xᵀy.
Vec naive_ols(const StageDesign& design, double lambda);

struct ThresholdConfig {
  double c0 = 1.0;
  double delta = 0.05;
  double L = 1.0;
  double sigma = 0.0;
  int H = 1;
  Index d1 = 1;
  Index K = 1;
  Index m = 1;
  Index n = 1;

  void validate() const;
  /// Keys absent from `j` keep their value in `base`.
  static ThresholdConfig from_json(const nlohmann::json& j);
  static ThresholdConfig from_json(const nlohmann::json& j, const ThresholdConfig& base);
  nlohmann::json to_json() const;
};

/// L_{K,x} = L + σ·√((ln H + 1)·ln(K·x)).
double function_scale(const ThresholdConfig& cfg, double x);

/// c0·L_{K,x}·(√(max(m,n)·ln K / K) + √(ln(H·d1/δ) / K)); x = 1 for rewards, d1 for
/// transition coordinates.
double threshold_linear(const ThresholdConfig& cfg, double x = 1.0);

struct EigenDecay {
  enum class Kind { exponential, polynomial } kind = Kind::exponential;
  double alpha = 2.0;

  static EigenDecay exponential() { return {Kind::exponential, 0.0}; }
  static EigenDecay polynomial(double alpha) { return {Kind::polynomial, alpha}; }
};

double threshold_rkhs(const EigenDecay& decay, const ThresholdConfig& cfg, double x = 1.0);

/// {θ : (θ − θ̂)ᵀA(θ − θ̂) ≤ c²}.
class ConfidenceEllipsoid {
 public:
  ConfidenceEllipsoid(Vec center, Mat A, double c2);

  const Vec& center() const { return center_; }
  const Mat& A() const { return A_; }
  double c2() const { return c2_; }
  Index dim() const { return center_.size(); }

  double quadratic_form(const Vec& theta) const;
  bool contains(const Vec& theta, double slack = 1e-8) const;
  /// θ̂ + sign·c·v/√(vᵀAv). Throws NumericalError for v in the null space of A.
  Vec boundary_point(const Vec& direction, double sign = 1.0) const;

  /// Eigenpairs of A with eigenvalue above the numerical floor.
  const Vec& range_eigenvalues() const { return range_values_; }
  const Mat& range_eigenvectors() const { return range_vectors_; }
  /// Orthonormal basis of the null space of A (possibly zero columns).
  const Mat& null_space() const { return null_vectors_; }
  bool clipped() const { return clipped_; }

 private:
  Vec center_;
  Mat A_;
  double c2_;
  Vec range_values_;
  Mat range_vectors_;
  Mat null_vectors_;
  bool clipped_ = false;
};

ConfidenceEllipsoid confidence_ellipsoid(const TwoSlsFit& fit, double c);

struct KernelSpec {
  std::string name = "rbf";  // rbf | linear
  double bandwidth = 1.0;

  double operator()(const Vec& u, const Vec& v) const;
};

Mat gram_matrix(const KernelSpec& kernel, const Mat& rows);
Mat cross_gram(const KernelSpec& kernel, const Mat& left, const Mat& right);

struct KernelFit {
  KernelSpec kernel_x;
  KernelSpec kernel_z;
  Vec alpha;
  double lambda = 0.0;
  Mat train_x;
  Vec y;
  Mat gram_x;
  Mat gram_z;
  /// Cholesky factor of G_F + KλI; M = G_F(G_F + KλI)⁻¹ = I − Kλ(G_F + KλI)⁻¹.
  Eigen::LLT<Mat> test_factor;

  Vec predict(const Mat& X) const;
  Vec fitted() const { return gram_x * alpha; }
  Vec apply_projection(const Vec& r) const;
  /// (1/2K)(y − G α)ᵀ M (y − G α).
  double loss(const Vec& coefficients) const;
};

/// Dual minimax IV estimate over the RKHS of `kernel_x`, tested against the RKHS of
/// `kernel_z`: minimizes (1/2K)(y − Gα)ᵀM(y − Gα) + λαᵀGα.
KernelFit fit_kernel_iv(const StageDesign& design, const KernelSpec& kernel_x,
                        const KernelSpec& kernel_z, double lambda);

/// (1/K)‖P_Z X (θ − θ_ref)‖² with the exact projection onto the column span of Z.
double projected_mse(const StageDesign& design, const Vec& theta, const Vec& theta_ref);

/// √ of the largest generalized eigenvalue of XᵀX/K against XᵀP_Z X/K on the range of the
/// latter.
double ill_posedness_linear(const StageDesign& design);

enum class Estimator { iv, ols };

std::string_view to_string(Estimator e);
Estimator parse_estimator(std::string_view name);

struct TargetFit {
  TwoSlsFit fit;
  ConfidenceEllipsoid ellipsoid;
  double c = 0.0;
};

struct StageFits {
  TargetFit reward;
  std::vector<TargetFit> transition;  // one per state coordinate
};

struct FitOptions {
  Estimator estimator = Estimator::iv;
  /// Negative selects default_ridge per design.
  double lambda = -1.0;
  ThresholdConfig threshold;
  /// Negative reuses threshold.c0.
  double c0_transition = -1.0;
  /// Skip the transition targets (e.g. H = 1 planning needs only the reward).
  bool reward_only = false;

  static FitOptions from_json(const nlohmann::json& j);
  static FitOptions from_json(const nlohmann::json& j, const FitOptions& base);
};

/// For `Estimator::ols` the design uses Z := X, so the same fitter returns OLS and the
/// ellipsoid is the OLS analogue.
std::vector<StageFits> fit_all(const ObservableDataset& data, const FeatureMaps& features,
                               const FitOptions& options);

nlohmann::json fit_to_json(const TwoSlsFit& fit, double c2);
nlohmann::json fits_to_json(const std::vector<StageFits>& fits);
std::vector<StageFits> fits_from_json(const nlohmann::json& j);

/// c0 needed for θ* to sit on the ellipsoid boundary: √((θ*−θ̂)ᵀA(θ*−θ̂)) / c(c0 = 1).
double required_c0(const TwoSlsFit& fit, const Vec& theta_star, double unit_threshold);

struct Calibration {
  double c0 = 0.0;
  double raw_quantile = 0.0;
  std::size_t replications = 0;
};

/// Smallest c0 covering a (1 − δ) fraction of the required values, rounded up to one
/// decimal (at least 0.1).
Calibration calibrate_c0(std::vector<double> required, double delta);

}  // namespace plan_iv
