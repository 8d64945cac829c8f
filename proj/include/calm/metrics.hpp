#pragma once

// Alignment and output metrics between an organizational policy and an agent.

#include "calm/case_data.hpp"
#include "calm/ridge_logit.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace calm {

/// a.b / (|a||b|). Throws NumericalError("ZeroVector") if either is zero.
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// Centered cosine. Throws NumericalError("ConstantVector").
double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

double propensity_correlation(const PolicyVector& a, const PolicyVector& b, const DesignMatrix& design);

double accuracy(const std::vector<bool>& pred, const std::vector<bool>& truth);

/// Cohen's kappa with marginal-product chance agreement. nullopt when the
/// chance agreement is 1 (both raters constant and equal).
std::optional<double> cohens_kappa(const std::vector<bool>& pred, const std::vector<bool>& truth);

/// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie), computed exactly
/// from integer pair counts.
double roc_auc(const Eigen::VectorXd& scores, const std::vector<bool>& labels);
double roc_auc(const std::vector<double>& scores, const std::vector<bool>& labels);

double positive_rate(const std::vector<bool>& pred);

/// Coefficient vectors of two policies over a common column set. Identical
/// retained columns are used as-is; otherwise the union is taken (a's order,
/// then b's extras) with absent columns set to 0 and a warning appended.
std::pair<Eigen::VectorXd, Eigen::VectorXd> aligned_coefficients(const PolicyVector& a, const PolicyVector& b,
                                                                 std::vector<std::string>* warnings = nullptr);

/// Cosine over aligned coefficients, intercepts excluded.
double policy_cosine(const PolicyVector& a, const PolicyVector& b, std::vector<std::string>* warnings = nullptr);

struct AlignmentReport {
  double cosine = 0.0;
  double pearson_coeff = 0.0;
  double propensity_corr = 0.0;
  double accuracy = 0.0;
  std::optional<double> kappa;
  double auc = 0.0;
  double positive_rate = 0.0;
  std::size_t n_cases = 0;
  bool intercept_excluded = true;
  std::vector<std::string> warnings;
};

struct CvSpec {
  int k = 5;
  std::int64_t seed = 0;
};

struct AlignmentAnalysis {
  AlignmentReport report;
  PolicyVector agent_policy;
  CvResult agent_cv;
};

/// Fits the agent's policy on its decisions over `design` (whose labels are
/// the benchmark decisions) and fills every report field.
AlignmentAnalysis analyze_alignment(const PolicyVector& org_policy, const Dataset& agent_decisions,
                                    const DesignMatrix& design, const FitConfig& config, const CvSpec& cv);

AlignmentReport alignment_report(const PolicyVector& org_policy, const Dataset& agent_decisions,
                                 const DesignMatrix& design, const FitConfig& config, const CvSpec& cv);

/// Flat record: r_cos, acc, auc, good_pct first, then the secondary metrics.
nlohmann::ordered_json report_to_json(const AlignmentReport& report);

}  // namespace calm
