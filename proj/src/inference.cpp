#include "calm/inference.hpp"

#include "calm/errors.hpp"
#include "calm/log.hpp"
#include "calm/metrics.hpp"
#include "calm/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>

namespace calm {

std::string_view to_string(Side side) {
  switch (side) {
    case Side::greater: return "greater";
    case Side::less: return "less";
    case Side::two_sided: return "two_sided";
  }
  return "greater";
}

Side parse_side(std::string_view text) {
  if (text == "greater") return Side::greater;
  if (text == "less") return Side::less;
  if (text == "two_sided") return Side::two_sided;
  throw ValidationError("UnknownSide", "unknown test side '" + std::string(text) + "'");
}

void ResampleConfig::validate() const {
  if (n_resamples < 100) {
    throw ValidationError("TooFewResamples", "n_resamples must be at least 100, got " + std::to_string(n_resamples));
  }
  if (!(confidence > 0.0 && confidence < 1.0)) throw ValidationError("InvalidConfidence", "confidence must lie in (0, 1)");
  if (threads < 1) throw ValidationError("InvalidThreads", "threads must be at least 1");
}

nlohmann::ordered_json significance_to_json(const SignificanceResult& r) {
  nlohmann::ordered_json j;
  j["method"] = r.method;
  j["observed"] = r.observed_delta;
  j["p_value"] = r.p_value;
  j["ci_low"] = r.ci_low;
  j["ci_high"] = r.ci_high;
  j["ci_kind"] = r.ci_kind;
  j["side"] = std::string(to_string(r.side));
  j["n_resamples"] = r.n_resamples;
  j["redraws"] = r.redraws;
  j["seed"] = r.seed;
  j["resample_seed_rule"] = "splitmix64(master seed, resample index), redraws keyed by attempt";
  return j;
}

double permutation_p_value(const std::vector<double>& null, double observed, Side side) {
  const double b = static_cast<double>(null.size());
  const auto ge = static_cast<double>(std::count_if(null.begin(), null.end(), [&](double v) { return v >= observed; }));
  const auto le = static_cast<double>(std::count_if(null.begin(), null.end(), [&](double v) { return v <= observed; }));
  const double pg = (1.0 + ge) / (1.0 + b);
  const double pl = (1.0 + le) / (1.0 + b);
  switch (side) {
    case Side::greater: return pg;
    case Side::less: return pl;
    case Side::two_sided: return std::min(1.0, 2.0 * std::min(pg, pl));
  }
  return pg;
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ValidationError("EmptyVector", "quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

void parallel_for(int n, int threads, const std::function<void(int)>& body) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex mu;
  std::optional<int> failed_at;
  std::exception_ptr failure;
  auto worker = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(mu);
        // Report the lowest failing index so the error is scheduling-independent.
        if (!failed_at || i < *failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

namespace {

/// `other` reordered to the case order of `reference`.
std::vector<bool> aligned_decisions(const Dataset& reference, const Dataset& other) {
  if (reference.size() != other.size()) {
    throw ValidationError("CaseMismatch", "decision sets cover " + std::to_string(reference.size()) + " and " +
                                              std::to_string(other.size()) + " cases");
  }
  std::vector<bool> out(reference.size());
  for (std::size_t i = 0; i < reference.size(); ++i) {
    auto idx = other.index_of(reference[i].case_id);
    if (!idx) throw ValidationError("CaseMismatch", "case '" + reference[i].case_id + "' missing from one decision set");
    if (other[*idx].cue_values != reference[i].cue_values) {
      throw ValidationError("CaseMismatch", "case '" + reference[i].case_id + "' has different cue values");
    }
    out[i] = other[*idx].decision;
  }
  return out;
}

Eigen::VectorXd to_labels(const std::vector<bool>& d) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i) y(static_cast<Eigen::Index>(i)) = d[i] ? 1.0 : 0.0;
  return y;
}

bool single_class(const Eigen::VectorXd& y) {
  const double s = y.sum();
  return s <= 0.0 || s >= static_cast<double>(y.size());
}

Eigen::VectorXd coefficients_of(const FitResult& r) { return r.theta.tail(r.theta.size() - 1); }

int max_redraws(int n_resamples) { return static_cast<int>(std::floor(kMaxRedrawFraction * n_resamples)); }

void check_redraws(int redraws, int n_resamples) {
  if (redraws > max_redraws(n_resamples)) {
    throw NumericalError("TooManyRedraws", std::to_string(redraws) + " of " + std::to_string(n_resamples) +
                                               " resamples were single-class; aborting");
  }
}

}  // namespace

SignificanceResult bootstrap_cosine_ci(const Dataset& org_decisions, const Dataset& agent_decisions,
                                       const CueSchema& schema, const FitConfig& fit_config,
                                       const ResampleConfig& rcfg) {
  rcfg.validate();
  fit_config.validate();
  const std::vector<bool> org_d = org_decisions.decisions();
  const std::vector<bool> agent_d = aligned_decisions(org_decisions, agent_decisions);
  const Eigen::VectorXd yo = to_labels(org_d);
  const Eigen::VectorXd ya = to_labels(agent_d);
  const Eigen::MatrixXd raw = raw_design(org_decisions, schema);
  const auto skeleton = schema_columns(schema);
  const auto n = static_cast<Eigen::Index>(org_d.size());

  const EncodingMap full_enc = fit_standardization(raw, skeleton);
  const Eigen::MatrixXd x = apply_standardization(raw, full_enc);
  const FitResult fo = fit_matrix(x, yo, fit_config);
  const FitResult fa = fit_matrix(x, ya, fit_config);

  SignificanceResult result;
  result.method = "paired_bootstrap";
  result.observed_delta = cosine_similarity(coefficients_of(fo), coefficients_of(fa));
  result.n_resamples = rcfg.n_resamples;
  result.seed = rcfg.seed;
  result.side = rcfg.side;
  result.distribution.assign(static_cast<std::size_t>(rcfg.n_resamples), 0.0);
  std::vector<int> redraws(static_cast<std::size_t>(rcfg.n_resamples), 0);
  const int cap = max_redraws(rcfg.n_resamples);

  parallel_for(rcfg.n_resamples, rcfg.threads, [&](int b) {
    const std::uint64_t base = derive_seed(rcfg.seed, static_cast<std::uint64_t>(b));
    for (int attempt = 0;; ++attempt) {
      if (attempt > cap) check_redraws(attempt, rcfg.n_resamples);
      Rng rng(derive_seed(base, static_cast<std::uint64_t>(attempt)));
      std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
      for (auto& i : idx) i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
      Eigen::VectorXd yob(n), yab(n);
      for (Eigen::Index k = 0; k < n; ++k) {
        yob(k) = yo(idx[static_cast<std::size_t>(k)]);
        yab(k) = ya(idx[static_cast<std::size_t>(k)]);
      }
      if (single_class(yob) || single_class(yab)) {
        ++redraws[static_cast<std::size_t>(b)];
        continue;
      }
      const EncodingMap enc = fit_standardization(raw, skeleton, idx);
      if (enc.retained_count() == 0) {
        ++redraws[static_cast<std::size_t>(b)];
        continue;
      }
      const Eigen::MatrixXd xb = apply_standardization(raw(idx, Eigen::all), enc);
      const bool warm = xb.cols() == x.cols();
      const FitResult ro = fit_matrix(xb, yob, fit_config, warm ? &fo.theta : nullptr);
      const FitResult ra = fit_matrix(xb, yab, fit_config, warm ? &fa.theta : nullptr);
      const Eigen::VectorXd co = coefficients_of(ro), ca = coefficients_of(ra);
      if (!(co.norm() > 0.0) || !(ca.norm() > 0.0)) {
        ++redraws[static_cast<std::size_t>(b)];
        continue;
      }
      result.distribution[static_cast<std::size_t>(b)] = cosine_similarity(co, ca);
      return;
    }
  });

  for (int r : redraws) result.redraws += r;
  check_redraws(result.redraws, rcfg.n_resamples);
  if (result.redraws > 0) logger().info("bootstrap redrew {} single-class resamples", result.redraws);

  std::vector<double> sorted = result.distribution;
  std::sort(sorted.begin(), sorted.end());
  const double a = (1.0 - rcfg.confidence) / 2.0;
  // Percentile interval, widened if needed so it always covers the observed cosine.
  result.ci_low = std::min(quantile_sorted(sorted, a), result.observed_delta);
  result.ci_high = std::max(quantile_sorted(sorted, 1.0 - a), result.observed_delta);
  result.ci_kind = "percentile (type 7), widened to include the observed statistic";
  // Test of the cosine against 0: greater asks whether alignment is positive.
  const double bd = static_cast<double>(sorted.size());
  const auto le0 = static_cast<double>(std::count_if(sorted.begin(), sorted.end(), [](double v) { return v <= 0.0; }));
  const auto ge0 = static_cast<double>(std::count_if(sorted.begin(), sorted.end(), [](double v) { return v >= 0.0; }));
  const double pg = (1.0 + le0) / (1.0 + bd);
  const double pl = (1.0 + ge0) / (1.0 + bd);
  result.p_value = rcfg.side == Side::greater ? pg : rcfg.side == Side::less ? pl : std::min(1.0, 2.0 * std::min(pg, pl));
  return result;
}

SignificanceResult permutation_delta_test(const Dataset& baseline_decisions, const Dataset& treated_decisions,
                                          const PolicyVector& org_policy, const CueSchema& schema,
                                          const FitConfig& fit_config, const ResampleConfig& rcfg) {
  rcfg.validate();
  fit_config.validate();
  const std::vector<bool> base_d = baseline_decisions.decisions();
  const std::vector<bool> treat_d = aligned_decisions(baseline_decisions, treated_decisions);
  const Eigen::MatrixXd raw = raw_design(baseline_decisions, schema);
  const EncodingMap enc = fit_standardization(raw, schema_columns(schema));
  if (!org_policy.encoding || enc.fingerprint() != org_policy.encoding->fingerprint()) {
    throw ValidationError("EncodingMismatch", "the organization policy was not fitted on this case set's encoding");
  }
  const Eigen::MatrixXd x = apply_standardization(raw, enc);
  const Eigen::VectorXd yb = to_labels(base_d);
  const Eigen::VectorXd yt = to_labels(treat_d);
  const Eigen::VectorXd& org = org_policy.coefficients;
  const auto n = x.rows();

  const FitResult fb = fit_matrix(x, yb, fit_config);
  const FitResult ft = fit_matrix(x, yt, fit_config);

  SignificanceResult result;
  result.method = "case_swap_permutation";
  result.observed_delta = cosine_similarity(org, coefficients_of(ft)) - cosine_similarity(org, coefficients_of(fb));
  result.n_resamples = rcfg.n_resamples;
  result.seed = rcfg.seed;
  result.side = rcfg.side;
  result.distribution.assign(static_cast<std::size_t>(rcfg.n_resamples), 0.0);
  std::vector<int> redraws(static_cast<std::size_t>(rcfg.n_resamples), 0);
  const int cap = max_redraws(rcfg.n_resamples);

  parallel_for(rcfg.n_resamples, rcfg.threads, [&](int b) {
    const std::uint64_t base = derive_seed(rcfg.seed, static_cast<std::uint64_t>(b));
    for (int attempt = 0;; ++attempt) {
      if (attempt > cap) check_redraws(attempt, rcfg.n_resamples);
      Rng rng(attempt == 0 ? base : derive_seed(base, static_cast<std::uint64_t>(attempt)));
      Eigen::VectorXd pb = yb, pt = yt;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (rng.uniform() < 0.5) std::swap(pb(i), pt(i));
      }
      if (single_class(pb) || single_class(pt)) {
        ++redraws[static_cast<std::size_t>(b)];
        continue;
      }
      const FitResult rb = fit_matrix(x, pb, fit_config, &fb.theta);
      const FitResult rt = fit_matrix(x, pt, fit_config, &ft.theta);
      result.distribution[static_cast<std::size_t>(b)] =
          cosine_similarity(org, coefficients_of(rt)) - cosine_similarity(org, coefficients_of(rb));
      return;
    }
  });

  for (int r : redraws) result.redraws += r;
  check_redraws(result.redraws, rcfg.n_resamples);
  result.p_value = permutation_p_value(result.distribution, result.observed_delta, rcfg.side);
  std::vector<double> sorted = result.distribution;
  std::sort(sorted.begin(), sorted.end());
  const double a = (1.0 - rcfg.confidence) / 2.0;
  result.ci_low = quantile_sorted(sorted, a);
  result.ci_high = quantile_sorted(sorted, 1.0 - a);
  result.ci_kind = "central percentile range of the permutation null";
  return result;
}

}  // namespace calm
