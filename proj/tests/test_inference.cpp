#include "calm/errors.hpp"
#include "calm/inference.hpp"
#include "calm/metrics.hpp"
#include "calm/rng.hpp"

#include "support.hpp"

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>

using namespace calm;

namespace {

// Bernoulli decisions from a logistic model over the numeric cues.
Dataset logistic_decisions(const Dataset& d, const std::vector<double>& beta, std::uint64_t seed) {
  std::vector<bool> dec(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < beta.size(); ++j) s += beta[j] * std::get<double>(d[i].cue_values[j]);
    dec[i] = unit_uniform(derive_seed(seed, i)) < sigmoid(s);
  }
  return d.with_decisions(dec);
}

struct Fixture {
  std::shared_ptr<const CueSchema> schema = testing::numeric_schema(4);
  Dataset cases = testing::normal_cases(schema, 300, 31);
  Dataset org = logistic_decisions(cases, {2.0, -1.5, 1.0, 0.5}, 1);
  FitConfig fit;
  PolicyVector org_policy = calm::fit(encode(org), fit);
};

ResampleConfig resample(int b, std::uint64_t seed) {
  ResampleConfig r;
  r.n_resamples = b;
  r.seed = seed;
  return r;
}

}  // namespace

TEST_CASE("resample configuration", "[inference]") {
  CHECK_THROWS_AS(resample(99, 1).validate(), ValidationError);
  CHECK_NOTHROW(resample(100, 1).validate());
  ResampleConfig bad = resample(100, 1);
  bad.confidence = 1.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad.confidence = 0.9;
  bad.threads = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  try {
    resample(10, 1).validate();
  } catch (const Error& e) {
    CHECK(e.code() == "TooFewResamples");
  }
  CHECK(parse_side("less") == Side::less);
  CHECK(to_string(Side::two_sided) == "two_sided");
}

TEST_CASE("permutation p-values", "[inference]") {
  const std::vector<double> null{0.1, 0.2, 0.3, 0.4};
  CHECK(permutation_p_value(null, 10.0, Side::greater) == 1.0 / 5.0);
  CHECK(permutation_p_value(null, 0.25, Side::greater) == 3.0 / 5.0);
  CHECK(permutation_p_value(null, 0.25, Side::less) == 3.0 / 5.0);
  CHECK(permutation_p_value(null, -1.0, Side::less) == 1.0 / 5.0);
  CHECK(permutation_p_value(null, 10.0, Side::two_sided) == 2.0 / 5.0);
  CHECK(permutation_p_value(null, 0.25, Side::two_sided) == 1.0);
  SECTION("never zero and monotone in the observed statistic") {
    Rng rng(3);
    std::vector<double> big(500);
    for (auto& v : big) v = rng.normal();
    double previous = 1.0;
    for (double obs = -4.0; obs <= 4.0; obs += 0.05) {
      const double p = permutation_p_value(big, obs, Side::greater);
      CHECK(p > 0.0);
      CHECK(p <= previous);
      previous = p;
    }
  }
}

TEST_CASE("type-7 quantiles", "[inference]") {
  const std::vector<double> s{1, 2, 3, 4, 5};
  CHECK(quantile_sorted(s, 0.0) == 1.0);
  CHECK(quantile_sorted(s, 1.0) == 5.0);
  CHECK(quantile_sorted(s, 0.5) == 3.0);
  CHECK(quantile_sorted(s, 0.1) == Catch::Approx(1.4));
  CHECK(quantile_sorted({7.0}, 0.3) == 7.0);
}

TEST_CASE("parallel_for covers every index and rethrows the first failure", "[inference]") {
  std::vector<int> hits(257, 0);
  parallel_for(257, 4, [&](int i) { hits[i] += 1; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  try {
    parallel_for(50, 3, [](int i) {
      if (i == 17 || i == 40) throw std::runtime_error(std::to_string(i));
    });
    FAIL("expected a rethrow");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()) == "17");
  }
}

TEST_CASE("bootstrap of an agent identical to the benchmark", "[inference]") {
  Fixture f;
  const SignificanceResult r = bootstrap_cosine_ci(f.org, f.org, *f.schema, f.fit, resample(100, 5));
  CHECK(r.observed_delta == Catch::Approx(1.0).margin(1e-12));
  CHECK(r.ci_low >= 0.95);
  CHECK(r.ci_high <= 1.0 + 1e-12);
  CHECK(r.ci_low <= r.observed_delta);
  CHECK(r.observed_delta <= r.ci_high + 1e-15);
  CHECK(r.p_value == 1.0 / 101.0);
  CHECK(r.n_resamples == 100);
  CHECK(r.method == "paired_bootstrap");
}

TEST_CASE("bootstrap interval contains the observed statistic", "[inference]") {
  Fixture f;
  const Dataset agent = logistic_decisions(f.cases, {0.5, 1.0, 1.0, -1.0}, 2);
  const SignificanceResult r = bootstrap_cosine_ci(f.org, agent, *f.schema, f.fit, resample(100, 6));
  CHECK(r.ci_low <= r.observed_delta);
  CHECK(r.observed_delta <= r.ci_high);
  CHECK(r.distribution.size() == 100);
  const PolicyVector ap = fit(encode(agent), f.fit);
  CHECK(r.observed_delta == Catch::Approx(policy_cosine(f.org_policy, ap)).margin(1e-12));
}

TEST_CASE("permutation test with identical conditions", "[inference]") {
  Fixture f;
  const Dataset agent = logistic_decisions(f.cases, {1.0, 0.0, -1.0, 0.5}, 3);
  const SignificanceResult r = permutation_delta_test(agent, agent, f.org_policy, *f.schema, f.fit, resample(100, 8));
  CHECK(r.observed_delta == 0.0);
  CHECK(r.p_value > 0.05);
  for (double v : r.distribution) CHECK(v == 0.0);
  CHECK(r.method == "case_swap_permutation");
}

TEST_CASE("permutation test detects a large shift", "[inference]") {
  Fixture f;
  const Dataset base = logistic_decisions(f.cases, {-2.0, 1.5, -1.0, -0.5}, 4);
  const Dataset treated = logistic_decisions(f.cases, {2.0, -1.5, 1.0, 0.5}, 5);
  const SignificanceResult r = permutation_delta_test(base, treated, f.org_policy, *f.schema, f.fit, resample(200, 9));
  CHECK(r.observed_delta > 1.0);
  CHECK(r.p_value == 1.0 / 201.0);
  CHECK(r.ci_low <= r.ci_high);
  CHECK(r.observed_delta > r.ci_high);
  ResampleConfig less = resample(200, 9);
  less.side = Side::less;
  CHECK(permutation_delta_test(base, treated, f.org_policy, *f.schema, f.fit, less).p_value > 0.9);
}

TEST_CASE("resampling is deterministic given the seed", "[inference]") {
  Fixture f;
  const Dataset base = logistic_decisions(f.cases, {1.0, 1.0, 0.0, 0.0}, 10);
  const Dataset treated = logistic_decisions(f.cases, {1.5, 0.0, 0.5, 0.0}, 11);
  const auto a = permutation_delta_test(base, treated, f.org_policy, *f.schema, f.fit, resample(100, 12));
  const auto b = permutation_delta_test(base, treated, f.org_policy, *f.schema, f.fit, resample(100, 12));
  CHECK(a.distribution == b.distribution);
  CHECK(a.p_value == b.p_value);
  ResampleConfig threaded = resample(100, 12);
  threaded.threads = 3;
  const auto c = permutation_delta_test(base, treated, f.org_policy, *f.schema, f.fit, threaded);
  CHECK(a.distribution == c.distribution);
  CHECK(significance_to_json(a).dump() == significance_to_json(c).dump());
  const auto d = permutation_delta_test(base, treated, f.org_policy, *f.schema, f.fit, resample(100, 13));
  CHECK(a.distribution != d.distribution);

  const auto boot1 = bootstrap_cosine_ci(f.org, treated, *f.schema, f.fit, resample(100, 14));
  ResampleConfig bt = resample(100, 14);
  bt.threads = 2;
  const auto boot2 = bootstrap_cosine_ci(f.org, treated, *f.schema, f.fit, bt);
  CHECK(boot1.distribution == boot2.distribution);
}

TEST_CASE("permutation test needs the benchmark encoding", "[inference]") {
  Fixture f;
  auto other = testing::numeric_schema(3);
  const Dataset d = logistic_decisions(testing::normal_cases(other, 100, 1), {1, 1, 1}, 1);
  try {
    permutation_delta_test(d, d, f.org_policy, *other, f.fit, resample(100, 1));
    FAIL("expected EncodingMismatch");
  } catch (const ValidationError& e) {
    CHECK(e.code() == "EncodingMismatch");
  }
}
