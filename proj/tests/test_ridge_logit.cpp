#include "calm/case_data.hpp"
#include "calm/metrics.hpp"
#include "calm/rng.hpp"
#include "calm/ridge_logit.hpp"

#include "support.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

using namespace calm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd normal_matrix(Eigen::Index n, Eigen::Index p, Rng& rng) {
  MatrixXd x(n, p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) x(i, j) = rng.normal();
  return x;
}

VectorXd bernoulli_labels(const MatrixXd& x, const VectorXd& beta, double intercept, Rng& rng) {
  VectorXd y(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) y(i) = rng.uniform() < sigmoid(intercept + x.row(i).dot(beta)) ? 1 : 0;
  return y;
}

// Independent objective: direct sum of log-loss terms.
double reference_objective(const VectorXd& theta, const MatrixXd& x, const VectorXd& y, double lambda) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double eta = theta(0) + x.row(i).dot(theta.tail(x.cols()));
    total += std::log1p(std::exp(eta)) - y(i) * eta;
  }
  return total + 0.5 * lambda * theta.tail(x.cols()).squaredNorm();
}

DesignMatrix german_design() {
  const CueSchema schema = load_schema_file(std::string(CALM_DATA_DIR) + "/german_credit/schema.json");
  const Dataset full = load_cases_file(std::string(CALM_DATA_DIR) + "/german_credit/german_credit.csv", schema);
  return encode(balanced_subsample(full, 300, 42));
}

}  // namespace

TEST_CASE("objective at the zero policy is n ln 2", "[ridge_logit]") {
  Rng rng(1);
  const MatrixXd x = normal_matrix(37, 4, rng);
  VectorXd y(37);
  for (int i = 0; i < 37; ++i) y(i) = i % 3 == 0;
  FitConfig cfg;
  cfg.lambda = 5.0;
  CHECK(std::abs(objective(VectorXd::Zero(5), x, y, cfg) - 37 * std::log(2.0)) <= 1e-10);
}

TEST_CASE("objective matches the direct sum and the lambda identity", "[ridge_logit]") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const MatrixXd x = normal_matrix(30, 6, rng);
    VectorXd y(30);
    for (int i = 0; i < 30; ++i) y(i) = rng.uniform() < 0.5;
    VectorXd theta(7);
    for (int j = 0; j < 7; ++j) theta(j) = rng.normal();
    FitConfig c1, c2;
    c1.lambda = 0.7;
    c2.lambda = 1.4;
    const double f1 = objective(theta, x, y, c1);
    const double f2 = objective(theta, x, y, c2);
    CHECK(std::abs(f1 - reference_objective(theta, x, y, 0.7)) <= 1e-9 * std::max(1.0, std::abs(f1)));
    const double penalty = 0.5 * 0.7 * theta.tail(6).squaredNorm();
    CHECK(std::abs((f2 - f1) - penalty) <= 1e-9 * std::max(1.0, penalty));
  }
}

TEST_CASE("gradient matches central finite differences", "[ridge_logit]") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index p = 1 + static_cast<Eigen::Index>(rng.below(8));
    const MatrixXd x = normal_matrix(25, p, rng);
    VectorXd y(25);
    for (int i = 0; i < 25; ++i) y(i) = rng.uniform() < 0.5;
    VectorXd theta(p + 1);
    for (Eigen::Index j = 0; j <= p; ++j) theta(j) = rng.normal();
    FitConfig cfg;
    cfg.lambda = 0.1 + 3.0 * rng.uniform();
    const VectorXd g = gradient(theta, x, y, cfg);
    VectorXd fd(p + 1);
    const double h = 1e-6;
    for (Eigen::Index j = 0; j <= p; ++j) {
      VectorXd up = theta, down = theta;
      up(j) += h;
      down(j) -= h;
      fd(j) = (reference_objective(up, x, y, cfg.lambda) - reference_objective(down, x, y, cfg.lambda)) / (2 * h);
    }
    CHECK((g - fd).norm() / std::max(1.0, fd.norm()) <= 1e-5);
  }
}

TEST_CASE("intercept-only fits recover the log-odds", "[ridge_logit]") {
  for (const double p : {0.7, 0.5, 0.2, 0.93}) {
    const int n = 1000;
    const int pos = static_cast<int>(std::lround(p * n));
    VectorXd y = VectorXd::Zero(n);
    y.head(pos).setOnes();
    FitConfig cfg;
    cfg.lambda = 0.0;
    const FitResult r = fit_matrix(MatrixXd::Zero(n, 3), y, cfg);
    const double rate = static_cast<double>(pos) / n;
    CHECK(std::abs(r.theta(0) - std::log(rate / (1 - rate))) <= 1e-6);
    CHECK(r.theta.tail(3).cwiseAbs().maxCoeff() == 0.0);
  }
  VectorXd y = VectorXd::Zero(10);
  y.head(7).setOnes();
  FitConfig cfg;
  const FitResult r = fit_matrix(MatrixXd(10, 0), y, cfg);
  CHECK(std::abs(r.theta(0) - 0.8473) <= 1e-4);
}

TEST_CASE("fit reaches the optimum", "[ridge_logit]") {
  Rng rng(4);
  const MatrixXd x = normal_matrix(200, 5, rng);
  VectorXd beta(5);
  beta << 1.0, -0.5, 0.25, 0.0, 2.0;
  const VectorXd y = bernoulli_labels(x, beta, 0.3, rng);
  FitConfig cfg;
  cfg.lambda = 0.5;
  const FitResult r = fit_matrix(x, y, cfg);
  CHECK(r.diagnostics.converged);
  CHECK(r.diagnostics.final_gradient_norm <= cfg.gradient_tolerance);
  CHECK(gradient(r.theta, x, y, cfg).lpNorm<Eigen::Infinity>() <= 1e-8);
  CHECK(objective(r.theta, x, y, cfg) <= objective(VectorXd::Zero(6), x, y, cfg));
  SECTION("convexity: the optimum does not depend on the start") {
    VectorXd start(6);
    start << 5, -5, 5, -5, 5, -5;
    const FitResult s = fit_matrix(x, y, cfg, &start);
    CHECK((s.theta - r.theta).norm() <= 1e-6);
  }
  SECTION("swapping labels negates the policy") {
    const VectorXd flipped = VectorXd::Ones(200) - y;
    const FitResult f = fit_matrix(x, flipped, cfg);
    CHECK((f.theta + r.theta).norm() <= 1e-6);
  }
}

TEST_CASE("noiseless labels recover the true direction", "[ridge_logit]") {
  Rng rng(5);
  const MatrixXd x = normal_matrix(2000, 6, rng);
  VectorXd beta(6);
  beta << 2.0, -1.0, 0.5, 1.5, -0.25, 0.75;
  VectorXd y(2000);
  for (int i = 0; i < 2000; ++i) y(i) = x.row(i).dot(beta) > 0 ? 1 : 0;
  FitConfig cfg;
  cfg.lambda = 1e-4;
  cfg.max_iterations = 200;
  const FitResult r = fit_matrix(x, y, cfg);
  CHECK(cosine_similarity(r.theta.tail(6), beta) >= 0.99);
}

TEST_CASE("separable data stays finite under the penalty", "[ridge_logit]") {
  MatrixXd x(6, 1);
  x << -3, -2, -1, 1, 2, 3;
  VectorXd y(6);
  y << 0, 0, 0, 1, 1, 1;
  FitConfig cfg;
  cfg.lambda = 1.0;
  const FitResult r = fit_matrix(x, y, cfg);
  CHECK(r.diagnostics.converged);
  CHECK(r.theta.allFinite());
  CHECK(r.theta(1) > 0);
}

TEST_CASE("shrinkage is monotone in lambda", "[ridge_logit]") {
  Rng rng(6);
  const MatrixXd x = normal_matrix(300, 4, rng);
  VectorXd beta(4);
  beta << 1.0, -1.0, 0.5, 0.2;
  const VectorXd y = bernoulli_labels(x, beta, 0.0, rng);
  double previous = std::numeric_limits<double>::infinity();
  for (const double lambda : {0.01, 0.1, 1.0, 10.0, 100.0, 1000.0}) {
    FitConfig cfg;
    cfg.lambda = lambda;
    const double norm = fit_matrix(x, y, cfg).theta.tail(4).norm();
    CHECK(norm <= previous);
    previous = norm;
  }
}

TEST_CASE("invalid configuration", "[ridge_logit]") {
  FitConfig cfg;
  cfg.lambda = -1.0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg.lambda = 1.0;
  cfg.max_iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
}

TEST_CASE("predicted labels threshold the propensity", "[ridge_logit]") {
  VectorXd p(4);
  p << 0.2, 0.5, 0.7, 1.0;
  CHECK(threshold_labels(p, 0.0) == std::vector<bool>{true, true, true, true});
  CHECK(threshold_labels(p, 0.5) == std::vector<bool>{false, true, true, true});
  CHECK(threshold_labels(p, 1.0) == std::vector<bool>{false, false, false, false});
}

TEST_CASE("policy document round-trips", "[ridge_logit]") {
  auto schema = testing::numeric_schema(3);
  Dataset d = testing::normal_cases(schema, 80, 9);
  std::vector<bool> dec(80);
  for (std::size_t i = 0; i < 80; ++i) dec[i] = std::get<double>(d[i].cue_values[0]) > 0;
  const DesignMatrix dm = encode(d.with_decisions(dec));
  const PolicyVector p = fit(dm, FitConfig{});
  const PolicyVector back = policy_from_json(policy_to_json(p));
  CHECK(back.intercept == p.intercept);
  CHECK(back.coefficients == p.coefficients);
  CHECK(*back.encoding == *p.encoding);
  CHECK(policy_fingerprint(back) == policy_fingerprint(p));
}

TEST_CASE("stratified folds balance classes", "[ridge_logit]") {
  VectorXd y(103);
  for (int i = 0; i < 103; ++i) y(i) = i < 40;
  const auto folds = stratified_folds(y, 5, 11);
  for (int f = 0; f < 5; ++f) {
    int pos = 0, all = 0;
    for (int i = 0; i < 103; ++i) {
      if (folds[i] == f) {
        ++all;
        pos += y(i) > 0.5;
      }
    }
    CHECK(pos == 8);
    CHECK((all == 20 || all == 21));
  }
  CHECK(folds == stratified_folds(y, 5, 11));
}

TEST_CASE("cross-validation reproduces the German Credit ceiling", "[ridge_logit]") {
  const DesignMatrix dm = german_design();
  const CvResult cv = cross_validate(dm, dm.labels, 5, FitConfig{}, 42);
  CHECK(std::abs(cv.accuracy - 0.715) <= 0.03);
  CHECK(std::abs(cv.auc - 0.776) <= 0.03);
  CHECK(cv.per_fold.size() == 5);
  SECTION("same seed gives the same result") {
    const CvResult again = cross_validate(dm, dm.labels, 5, FitConfig{}, 42);
    CHECK(again.accuracy == cv.accuracy);
    CHECK(again.auc == cv.auc);
  }
}

TEST_CASE("cross-validation extremes", "[ridge_logit]") {
  Rng rng(12);
  auto schema = testing::numeric_schema(4);
  const Dataset d = testing::normal_cases(schema, 600, 13);
  SECTION("noiseless linear labels") {
    std::vector<bool> dec(600);
    for (std::size_t i = 0; i < 600; ++i)
      dec[i] = std::get<double>(d[i].cue_values[0]) - 0.5 * std::get<double>(d[i].cue_values[2]) > 0;
    const DesignMatrix dm = encode(d.with_decisions(dec));
    FitConfig cfg;
    cfg.lambda = 0.01;
    CHECK(cross_validate(dm, dm.labels, 5, cfg, 1).auc >= 0.99);
  }
  SECTION("labels independent of the cues") {
    std::vector<bool> dec(600);
    for (std::size_t i = 0; i < 600; ++i) dec[i] = rng.uniform() < 0.5;
    const DesignMatrix dm = encode(d.with_decisions(dec));
    CHECK(std::abs(cross_validate(dm, dm.labels, 5, FitConfig{}, 1).auc - 0.5) <= 0.05);
  }
}

TEST_CASE("lambda selection picks a grid value", "[ridge_logit]") {
  const DesignMatrix dm = german_design();
  const LambdaSelection sel = select_lambda(dm, dm.labels, kDefaultLambdaGrid, 5, FitConfig{}, 42);
  CHECK(std::find(kDefaultLambdaGrid.begin(), kDefaultLambdaGrid.end(), sel.lambda) != kDefaultLambdaGrid.end());
  CHECK(sel.log_likelihood.size() == kDefaultLambdaGrid.size());
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& [l, ll] : sel.log_likelihood) best = std::max(best, ll);
  for (const auto& [l, ll] : sel.log_likelihood)
    if (l == sel.lambda) CHECK(ll == best);
}
