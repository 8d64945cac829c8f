#pragma once

// Case-level resampling: a paired percentile bootstrap for the cosine
// between two decision-makers' policies, and a label-swap permutation test
// for the change in cosine between two conditions of one decision-maker.

#include "calm/case_data.hpp"
#include "calm/ridge_logit.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace calm {

enum class Side { greater, less, two_sided };
std::string_view to_string(Side side);
Side parse_side(std::string_view text);

struct ResampleConfig {
  int n_resamples = 1000;
  std::uint64_t seed = 0;
  double confidence = 0.95;
  Side side = Side::greater;
  int threads = 1;

  /// n_resamples >= 100, confidence in (0, 1), threads >= 1.
  void validate() const;
};

struct SignificanceResult {
  double observed_delta = 0.0;  // the observed statistic (cosine for the bootstrap)
  double p_value = 1.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_resamples = 0;
  int redraws = 0;
  std::uint64_t seed = 0;
  Side side = Side::greater;
  std::string method;   // "paired_bootstrap" | "case_swap_permutation"
  std::string ci_kind;  // how the interval was formed
  std::vector<double> distribution;  // resampled statistics in resample-index order
};

nlohmann::ordered_json significance_to_json(const SignificanceResult& result);

/// Fraction of resamples allowed to be redrawn before aborting.
inline constexpr double kMaxRedrawFraction = 0.2;

/// Paired bootstrap of the cosine between the policies fitted to
/// `org_decisions` and `agent_decisions` (same cases, same cue values). Each
/// resample re-standardizes the resampled design and refits both policies.
/// The p-value tests the cosine against 0 on `side`.
SignificanceResult bootstrap_cosine_ci(const Dataset& org_decisions, const Dataset& agent_decisions,
                                       const CueSchema& schema, const FitConfig& fit_config,
                                       const ResampleConfig& rcfg);

/// delta = cos(org, treated policy) - cos(org, baseline policy). The null
/// swaps each case's baseline/treated decisions with probability 1/2 and
/// refits both policies; the interval is the null's central percentile range.
SignificanceResult permutation_delta_test(const Dataset& baseline_decisions, const Dataset& treated_decisions,
                                          const PolicyVector& org_policy, const CueSchema& schema,
                                          const FitConfig& fit_config, const ResampleConfig& rcfg);

/// Permutation p-value with add-one smoothing for `side` given the null
/// statistics.
double permutation_p_value(const std::vector<double>& null, double observed, Side side);

/// Type-7 quantile of sorted data.
double quantile_sorted(const std::vector<double>& sorted, double q);

/// Runs body(i) for i in [0, n) on up to `threads` workers. Callers write
/// results by index, so output does not depend on scheduling.
void parallel_for(int n, int threads, const std::function<void(int)>& body);

}  // namespace calm
