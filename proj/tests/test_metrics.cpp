#include "calm/errors.hpp"
#include "calm/metrics.hpp"
#include "calm/rng.hpp"

#include "support.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>

using namespace calm;
using Eigen::VectorXd;

namespace {

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// Confusion counts: tp, fp, fn, tn.
void push_counts(std::vector<bool>& pred, std::vector<bool>& truth, int tp, int fp, int fn, int tn) {
  auto add = [&](int n, bool p, bool t) {
    for (int i = 0; i < n; ++i) {
      pred.push_back(p);
      truth.push_back(t);
    }
  };
  add(tp, true, true);
  add(fp, true, false);
  add(fn, false, true);
  add(tn, false, false);
}

double brute_force_auc(const std::vector<double>& s, const std::vector<bool>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

Dataset linear_decisions(const Dataset& d, const std::vector<double>& beta) {
  std::vector<bool> dec(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < beta.size(); ++j) s += beta[j] * std::get<double>(d[i].cue_values[j]);
    dec[i] = s > 0;
  }
  return d.with_decisions(dec);
}

}  // namespace

TEST_CASE("cosine similarity", "[metrics]") {
  CHECK(std::abs(cosine_similarity(vec({1, 2, 2}), vec({2, 1, 2})) - 8.0 / 9.0) <= 1e-12);
  CHECK(cosine_similarity(vec({1, 0}), vec({0, 3})) == 0.0);
  CHECK(std::abs(cosine_similarity(vec({1, -2}), vec({-2, 4})) + 1.0) <= 1e-12);
  CHECK(std::abs(cosine_similarity(vec({1, 2, 3}), vec({10, 20, 30})) - 1.0) <= 1e-12);
  CHECK_THROWS_AS(cosine_similarity(vec({0, 0}), vec({1, 2})), NumericalError);
  CHECK_THROWS_AS(cosine_similarity(vec({1}), vec({1, 2})), Error);
}

TEST_CASE("Pearson correlation is the centered cosine", "[metrics]") {
  const VectorXd a = vec({1, 2, 3, 4});
  const VectorXd b = vec({2, 4, 5, 9});
  const VectorXd ac = a.array() - a.mean();
  const VectorXd bc = b.array() - b.mean();
  CHECK(std::abs(pearson(a, b) - ac.dot(bc) / (ac.norm() * bc.norm())) <= 1e-12);
  CHECK_THROWS_AS(pearson(vec({1, 1, 1}), b.head(3)), NumericalError);
}

TEST_CASE("accuracy and kappa from confusion counts", "[metrics]") {
  std::vector<bool> pred, truth;
  push_counts(pred, truth, 40, 10, 10, 40);
  CHECK(accuracy(pred, truth) == 0.8);
  REQUIRE(cohens_kappa(pred, truth).has_value());
  CHECK(std::abs(*cohens_kappa(pred, truth) - 0.6) <= 1e-12);

  SECTION("asymmetric table against the textbook formula") {
    std::vector<bool> p2, t2;
    push_counts(p2, t2, 20, 5, 10, 15);
    const double po = 35.0 / 50.0;
    const double pe = (25.0 / 50) * (30.0 / 50) + (25.0 / 50) * (20.0 / 50);
    CHECK(std::abs(*cohens_kappa(p2, t2) - (po - pe) / (1 - pe)) <= 1e-12);
  }
  SECTION("self-agreement") {
    CHECK(*cohens_kappa(truth, truth) == 1.0);
    CHECK(accuracy(truth, truth) == 1.0);
  }
  SECTION("both raters constant and equal") {
    const std::vector<bool> ones(10, true);
    CHECK_FALSE(cohens_kappa(ones, ones).has_value());
  }
  SECTION("length mismatch") { CHECK_THROWS_AS(accuracy({true}, {true, false}), Error); }
}

TEST_CASE("ROC AUC", "[metrics]") {
  CHECK(roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, {false, false, true, true}) == 0.75);
  CHECK(roc_auc(std::vector<double>{0.5, 0.5}, {false, true}) == 0.5);
  CHECK(roc_auc(std::vector<double>{0.9, 0.1}, {false, true}) == 0.0);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{0.1, 0.2}, {true, true}), Error);

  SECTION("equals pairwise concordance on random instances") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 2 + rng.below(60);
      std::vector<double> s(n);
      std::vector<bool> y(n);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = static_cast<double>(rng.below(12)) / 4.0;  // coarse grid forces ties
        y[i] = rng.uniform() < 0.4;
      }
      y[0] = true;
      y[1] = false;
      CHECK(std::abs(roc_auc(s, y) - brute_force_auc(s, y)) <= 1e-12);
    }
  }
  SECTION("invariant under monotone transforms") {
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8, 0.2, 0.9};
    const std::vector<bool> y{false, true, false, true, true, false};
    std::vector<double> t;
    for (double x : s) t.push_back(std::exp(3 * x) - 7);
    CHECK(roc_auc(s, y) == roc_auc(t, y));
  }
}

TEST_CASE("positive rate", "[metrics]") {
  CHECK(positive_rate({true, false, false, true}) == 0.5);
  CHECK_THROWS_AS(positive_rate({}), Error);
}

TEST_CASE("alignment of an agent with the benchmark itself", "[metrics]") {
  auto schema = testing::numeric_schema(5);
  const Dataset cases = testing::normal_cases(schema, 600, 21);
  const Dataset org = linear_decisions(cases, {1.0, -0.5, 0.3, 0.0, 0.8});
  const DesignMatrix dm = encode(org);
  const FitConfig cfg;
  const PolicyVector org_policy = fit(dm, cfg);

  SECTION("self-comparison") {
    const AlignmentReport r = alignment_report(org_policy, org, dm, cfg, CvSpec{5, 1});
    CHECK(std::abs(r.cosine - 1.0) <= 1e-12);
    REQUIRE(r.kappa.has_value());
    CHECK(*r.kappa == 1.0);
    CHECK(r.accuracy == 1.0);
    CHECK(r.n_cases == 600);
    CHECK(r.intercept_excluded);
  }
  SECTION("anti-aligned agent") {
    const Dataset anti = linear_decisions(cases, {-1.0, 0.5, -0.3, 0.0, -0.8});
    const AlignmentReport r = alignment_report(org_policy, anti, dm, cfg, CvSpec{5, 1});
    CHECK(r.cosine <= -0.9);
    CHECK(r.accuracy <= 0.1);
    CHECK(*r.kappa < 0);
  }
  SECTION("report record puts the main metrics first") {
    const auto doc = report_to_json(alignment_report(org_policy, org, dm, cfg, CvSpec{5, 1}));
    auto it = doc.begin();
    CHECK(it.key() == "r_cos");
    ++it;
    CHECK(it.key() == "acc");
    ++it;
    CHECK(it.key() == "auc");
    ++it;
    CHECK(it.key() == "good_pct");
  }
}

TEST_CASE("coefficient alignment over differing column sets", "[metrics]") {
  auto schema = testing::numeric_schema(3);
  const Dataset cases = testing::normal_cases(schema, 200, 5);
  const Dataset org = linear_decisions(cases, {1.0, 1.0, 1.0});
  const PolicyVector a = fit(encode(org), FitConfig{});
  // Second policy over a fitting set where x2 is constant, so x2 is dropped.
  std::vector<CaseRecord> records = org.records();
  for (auto& r : records) r.cue_values[1] = 0.0;
  const PolicyVector b = fit(encode(Dataset(schema, records)), FitConfig{});
  REQUIRE(b.coefficients.size() == 2);
  std::vector<std::string> warnings;
  const auto [va, vb] = aligned_coefficients(a, b, &warnings);
  CHECK(va.size() == 3);
  CHECK(vb.size() == 3);
  CHECK(vb(1) == 0.0);
  CHECK_FALSE(warnings.empty());
}
