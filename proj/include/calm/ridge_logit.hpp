#pragma once

// Ridge-penalized logistic regression policies:
//
//   minimize  sum_i [ log(1 + exp(eta_i)) - y_i eta_i ] + (lambda/2) ||beta||^2
//   eta_i   = beta0 + x_i . beta
//
// The intercept beta0 is unpenalized unless FitConfig::penalize_intercept.
// Parameters are exchanged as a single vector theta = (beta0, beta).

#include "calm/case_data.hpp"
#include "calm/errors.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace calm {

struct FitConfig {
  double lambda = 1.0;
  int max_iterations = 100;
  double gradient_tolerance = 1e-8;  // infinity norm
  bool penalize_intercept = false;

  void validate() const;
};

struct FitDiagnostics {
  bool converged = false;
  int iterations = 0;
  double final_gradient_norm = 0.0;
  double final_objective = 0.0;
  bool used_gradient_fallback = false;
  double lambda = 0.0;
  std::size_t n_cases = 0;
  double positive_rate = 0.0;  // label mean of the fitting set
};

/// Thrown when the optimizer exhausts its iteration budget.
class FitError : public NumericalError {
 public:
  FitError(const std::string& message, FitDiagnostics diagnostics)
      : NumericalError("NonConvergence", message), diagnostics_(diagnostics) {}
  const FitDiagnostics& diagnostics() const noexcept { return diagnostics_; }

 private:
  FitDiagnostics diagnostics_;
};

struct PolicyVector {
  double intercept = 0.0;
  Eigen::VectorXd coefficients;  // aligned with encoding->retained()
  std::shared_ptr<const EncodingMap> encoding;
  FitDiagnostics diagnostics;

  /// (intercept, coefficients...)
  Eigen::VectorXd theta() const;
  static PolicyVector from_theta(const Eigen::VectorXd& theta, std::shared_ptr<const EncodingMap> encoding);
};

double objective(const PolicyVector& policy, const DesignMatrix& design, const Eigen::VectorXd& labels,
                 const FitConfig& config);
Eigen::VectorXd gradient(const PolicyVector& policy, const DesignMatrix& design, const Eigen::VectorXd& labels,
                         const FitConfig& config);

/// Matrix-level forms used by the resampling code.
double objective(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                 const FitConfig& config);
Eigen::VectorXd gradient(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         const FitConfig& config);

struct FitResult {
  Eigen::VectorXd theta;
  FitDiagnostics diagnostics;
};

/// Damped Newton with step halving; falls back to backtracking gradient
/// descent when the Newton system cannot be solved. `start` (length p+1)
/// defaults to zero.
FitResult fit_matrix(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const FitConfig& config,
                     const Eigen::VectorXd* start = nullptr);

PolicyVector fit(const DesignMatrix& design, const Eigen::VectorXd& labels, const FitConfig& config);
PolicyVector fit(const DesignMatrix& design, const FitConfig& config);

double sigmoid(double z);

Eigen::VectorXd predict_propensity(const PolicyVector& policy, const DesignMatrix& design);

/// 1 where propensity >= threshold (ties go to the positive class).
std::vector<bool> predict_label(const PolicyVector& policy, const DesignMatrix& design, double threshold = 0.5);
std::vector<bool> threshold_labels(const Eigen::VectorXd& propensities, double threshold = 0.5);

struct FoldMetrics {
  double accuracy = 0.0;
  double auc = 0.0;
};

struct CvResult {
  int k = 0;
  std::int64_t seed = 0;
  double lambda = 0.0;
  std::vector<FoldMetrics> per_fold;
  double accuracy = 0.0;        // pooled over held-out predictions
  double auc = 0.0;             // pooled over held-out predictions
  double log_likelihood = 0.0;  // pooled held-out log-likelihood
  Eigen::VectorXd held_out_propensity;
};

/// Stratified fold index per row: within each class, rows are shuffled by a
/// seeded generator and dealt round-robin.
std::vector<int> stratified_folds(const Eigen::VectorXd& labels, int k, std::int64_t seed);

/// Stratified k-fold CV. Each training portion is re-standardized (columns
/// constant within it are dropped for that fold) and the held-out rows are
/// scored with the training statistics.
CvResult cross_validate(const DesignMatrix& design, const Eigen::VectorXd& labels, int k, const FitConfig& config,
                        std::int64_t seed);

struct LambdaSelection {
  double lambda = 0.0;
  std::vector<std::pair<double, double>> log_likelihood;  // (lambda, held-out log-likelihood)
};

inline const std::vector<double> kDefaultLambdaGrid{0.01, 0.1, 1.0, 10.0, 100.0};

/// Picks the grid value with the largest pooled held-out log-likelihood
/// (ties go to the larger lambda).
LambdaSelection select_lambda(const DesignMatrix& design, const Eigen::VectorXd& labels, const std::vector<double>& grid,
                              int k, const FitConfig& base, std::int64_t seed);

/// Encoding fingerprint plus a hash of the exact intercept and coefficients.
std::string policy_fingerprint(const PolicyVector& policy);

nlohmann::json policy_to_json(const PolicyVector& policy);
PolicyVector policy_from_json(const nlohmann::json& doc);
nlohmann::json encoding_to_json(const EncodingMap& encoding);
EncodingMap encoding_from_json(const nlohmann::json& doc);
nlohmann::json cv_to_json(const CvResult& cv);

}  // namespace calm
