#include "calm/ridge_logit.hpp"

#include "calm/io.hpp"
#include "calm/log.hpp"
#include "calm/metrics.hpp"
#include "calm/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace calm {

using nlohmann::json;

void FitConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw UsageError("InvalidLambda", "lambda must be finite and >= 0");
  if (!(gradient_tolerance > 0.0)) throw UsageError("InvalidTolerance", "gradient_tolerance must be > 0");
  if (max_iterations < 1) throw UsageError("InvalidIterations", "max_iterations must be >= 1");
}

Eigen::VectorXd PolicyVector::theta() const {
  Eigen::VectorXd t(coefficients.size() + 1);
  t(0) = intercept;
  t.tail(coefficients.size()) = coefficients;
  return t;
}

PolicyVector PolicyVector::from_theta(const Eigen::VectorXd& theta, std::shared_ptr<const EncodingMap> encoding) {
  PolicyVector p;
  p.intercept = theta(0);
  p.coefficients = theta.tail(theta.size() - 1);
  p.encoding = std::move(encoding);
  return p;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

void check_dimensions(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  if (theta.size() != x.cols() + 1) {
    throw ValidationError("DimensionMismatch", "parameter length " + std::to_string(theta.size()) +
                                                   " does not match " + std::to_string(x.cols()) + " columns + intercept");
  }
  if (y.size() != x.rows()) {
    throw ValidationError("DimensionMismatch", "label count " + std::to_string(y.size()) + " does not match " +
                                                   std::to_string(x.rows()) + " rows");
  }
}

Eigen::VectorXd penalty_weights(Eigen::Index size, const FitConfig& config) {
  Eigen::VectorXd d = Eigen::VectorXd::Constant(size, config.lambda);
  if (!config.penalize_intercept) d(0) = 0.0;
  return d;
}

Eigen::VectorXd linear_predictor(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x) {
  Eigen::VectorXd eta = x * theta.tail(theta.size() - 1);
  eta.array() += theta(0);
  return eta;
}

double objective_unchecked(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                           const Eigen::VectorXd& d) {
  const Eigen::VectorXd eta = linear_predictor(theta, x);
  double f = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) f += softplus(eta(i)) - y(i) * eta(i);
  return f + 0.5 * (d.array() * theta.array().square()).sum();
}

void check_policy(const PolicyVector& policy, const DesignMatrix& design) {
  if (policy.encoding && design.encoding && policy.encoding != design.encoding &&
      !(*policy.encoding == *design.encoding)) {
    throw ValidationError("EncodingMismatch", "policy encoding " + policy.encoding->fingerprint() +
                                                  " does not match design encoding " + design.encoding->fingerprint());
  }
  if (policy.coefficients.size() != design.rows.cols()) {
    throw ValidationError("DimensionMismatch", "policy has " + std::to_string(policy.coefficients.size()) +
                                                   " coefficients, design has " + std::to_string(design.rows.cols()) +
                                                   " columns");
  }
}

}  // namespace

double objective(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                 const FitConfig& config) {
  check_dimensions(theta, x, y);
  return objective_unchecked(theta, x, y, penalty_weights(theta.size(), config));
}

Eigen::VectorXd gradient(const Eigen::VectorXd& theta, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                         const FitConfig& config) {
  check_dimensions(theta, x, y);
  const Eigen::VectorXd eta = linear_predictor(theta, x);
  Eigen::VectorXd resid(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) resid(i) = sigmoid(eta(i)) - y(i);
  Eigen::VectorXd g(theta.size());
  g(0) = resid.sum();
  g.tail(theta.size() - 1) = x.transpose() * resid;
  return g + (penalty_weights(theta.size(), config).array() * theta.array()).matrix();
}

double objective(const PolicyVector& policy, const DesignMatrix& design, const Eigen::VectorXd& labels,
                 const FitConfig& config) {
  check_policy(policy, design);
  return objective(policy.theta(), design.rows, labels, config);
}

Eigen::VectorXd gradient(const PolicyVector& policy, const DesignMatrix& design, const Eigen::VectorXd& labels,
                         const FitConfig& config) {
  check_policy(policy, design);
  return gradient(policy.theta(), design.rows, labels, config);
}

FitResult fit_matrix(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const FitConfig& config,
                     const Eigen::VectorXd* start) {
  config.validate();
  const Eigen::Index n = x.rows();
  const Eigen::Index p = x.cols() + 1;
  if (y.size() != n) throw ValidationError("DimensionMismatch", "label count does not match design rows");
  if (n < 2) throw ValidationError("TooFewCases", "fitting needs at least 2 cases");
  const double positives = y.sum();
  if (positives <= 0.0 || positives >= static_cast<double>(n)) {
    throw NumericalError("SingleClass", "labels contain a single class; the policy is not identifiable");
  }

  Eigen::MatrixXd xa(n, p);
  xa.col(0).setOnes();
  xa.rightCols(p - 1) = x;
  const Eigen::VectorXd d = penalty_weights(p, config);

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(p);
  if (start) {
    if (start->size() != p) throw ValidationError("DimensionMismatch", "start vector length mismatch");
    theta = *start;
  }

  auto value = [&](const Eigen::VectorXd& t) {
    double f = 0.0;
    const Eigen::VectorXd eta = xa * t;
    for (Eigen::Index i = 0; i < n; ++i) f += softplus(eta(i)) - y(i) * eta(i);
    return f + 0.5 * (d.array() * t.array().square()).sum();
  };

  FitDiagnostics diag;
  diag.lambda = config.lambda;
  diag.n_cases = static_cast<std::size_t>(n);
  diag.positive_rate = positives / static_cast<double>(n);

  Eigen::VectorXd prob(n), w(n), g(p);
  Eigen::MatrixXd h(p, p);
  double f = value(theta);
  for (int iter = 0;; ++iter) {
    const Eigen::VectorXd eta = xa * theta;
    for (Eigen::Index i = 0; i < n; ++i) {
      prob(i) = sigmoid(eta(i));
      w(i) = prob(i) * (1.0 - prob(i));
    }
    g = xa.transpose() * (prob - y) + (d.array() * theta.array()).matrix();
    diag.iterations = iter;
    diag.final_gradient_norm = g.lpNorm<Eigen::Infinity>();
    diag.final_objective = f;
    if (!std::isfinite(f) || !g.allFinite()) {
      throw FitError("objective became non-finite during fitting", diag);
    }
    if (diag.final_gradient_norm <= config.gradient_tolerance) {
      diag.converged = true;
      break;
    }
    if (iter >= config.max_iterations) {
      throw FitError("no convergence within " + std::to_string(config.max_iterations) + " iterations (gradient " +
                         format_real(diag.final_gradient_norm) + ")",
                     diag);
    }

    // Newton direction, with a small ridge retry if the system is singular.
    const Eigen::MatrixXd xw = xa.array().colwise() * w.array().sqrt();
    h.setZero();
    h.selfadjointView<Eigen::Lower>().rankUpdate(xw.transpose());
    h.diagonal() += d;
    Eigen::VectorXd dir;
    for (double jitter : {0.0, 1e-10, 1e-6}) {
      Eigen::MatrixXd hj = h;
      if (jitter > 0.0) hj.diagonal().array() += jitter * std::max(1.0, h.diagonal().mean());
      Eigen::LDLT<Eigen::MatrixXd> ldlt(hj.selfadjointView<Eigen::Lower>());
      if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) continue;
      Eigen::VectorXd cand = -ldlt.solve(g);
      if (cand.allFinite() && g.dot(cand) < 0.0) {
        dir = std::move(cand);
        break;
      }
    }

    bool stepped = false;
    if (dir.size() == p) {
      const double slope = g.dot(dir);
      if (-slope < 1e-13 * (1.0 + std::abs(f))) {
        // Newton decrement below rounding: the full step is the best we can do.
        theta += dir;
        f = value(theta);
        stepped = true;
      } else {
        for (double t = 1.0; t > 1e-12; t *= 0.5) {
          const Eigen::VectorXd cand = theta + t * dir;
          const double fc = value(cand);
          if (fc <= f + 1e-4 * t * slope) {
            theta = cand;
            f = fc;
            stepped = true;
            break;
          }
        }
      }
    }
    if (!stepped) {
      diag.used_gradient_fallback = true;
      const double gg = g.squaredNorm();
      double t = 1.0 / std::max(1.0, h.diagonal().maxCoeff());
      for (int k = 0; k < 60; ++k, t *= 0.5) {
        const Eigen::VectorXd cand = theta - t * g;
        const double fc = value(cand);
        if (fc <= f - 1e-4 * t * gg) {
          theta = cand;
          f = fc;
          stepped = true;
          break;
        }
      }
      if (!stepped) throw FitError("line search failed to decrease the objective", diag);
    }
  }
  if (diag.used_gradient_fallback) logger().debug("fit used gradient-descent fallback");
  return {std::move(theta), diag};
}

PolicyVector fit(const DesignMatrix& design, const Eigen::VectorXd& labels, const FitConfig& config) {
  FitResult r = fit_matrix(design.rows, labels, config);
  PolicyVector policy = PolicyVector::from_theta(r.theta, design.encoding);
  policy.diagnostics = r.diagnostics;
  return policy;
}

PolicyVector fit(const DesignMatrix& design, const FitConfig& config) { return fit(design, design.labels, config); }

Eigen::VectorXd predict_propensity(const PolicyVector& policy, const DesignMatrix& design) {
  check_policy(policy, design);
  Eigen::VectorXd eta = design.rows * policy.coefficients;
  for (Eigen::Index i = 0; i < eta.size(); ++i) eta(i) = sigmoid(eta(i) + policy.intercept);
  return eta;
}

std::vector<bool> threshold_labels(const Eigen::VectorXd& propensities, double threshold) {
  std::vector<bool> out(static_cast<std::size_t>(propensities.size()));
  for (Eigen::Index i = 0; i < propensities.size(); ++i) {
    // threshold >= 1 yields all-negative even if a propensity rounds to 1.
    out[static_cast<std::size_t>(i)] = threshold < 1.0 && propensities(i) >= threshold;
  }
  return out;
}

std::vector<bool> predict_label(const PolicyVector& policy, const DesignMatrix& design, double threshold) {
  return threshold_labels(predict_propensity(policy, design), threshold);
}

// ---------------------------------------------------------------------------
// Cross-validation

std::vector<int> stratified_folds(const Eigen::VectorXd& labels, int k, std::int64_t seed) {
  const auto n = labels.size();
  if (k < 2) throw UsageError("InvalidFolds", "k must be >= 2");
  if (k > n) throw ValidationError("TooManyFolds", "k = " + std::to_string(k) + " exceeds " + std::to_string(n) + " cases");
  std::vector<int> fold(static_cast<std::size_t>(n), -1);
  for (int cls : {1, 0}) {
    std::vector<Eigen::Index> members;
    for (Eigen::Index i = 0; i < n; ++i) {
      if ((labels(i) > 0.5) == (cls == 1)) members.push_back(i);
    }
    if (static_cast<int>(members.size()) < k) {
      throw ValidationError("DegenerateFold", "class " + std::to_string(cls) + " has " + std::to_string(members.size()) +
                                                  " cases; every one of " + std::to_string(k) +
                                                  " folds needs both classes");
    }
    Rng rng(derive_seed(static_cast<std::uint64_t>(seed), 100 + static_cast<std::uint64_t>(cls)));
    rng.shuffle(std::span<Eigen::Index>(members));
    for (std::size_t j = 0; j < members.size(); ++j) fold[static_cast<std::size_t>(members[j])] = static_cast<int>(j % static_cast<std::size_t>(k));
  }
  return fold;
}

namespace {

struct FoldScaler {
  std::vector<Eigen::Index> keep;
  Eigen::VectorXd mean, std;
};

FoldScaler fold_scaler(const Eigen::MatrixXd& x) {
  FoldScaler s;
  const auto n = x.rows();
  std::vector<double> means, stds;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).mean();
    const Eigen::ArrayXd dev = x.col(j).array() - mean;
    const double sd = n > 1 ? std::sqrt(dev.square().sum() / static_cast<double>(n - 1)) : 0.0;
    if (sd > 0.0 && dev.abs().maxCoeff() > 1e-12 * std::max(1.0, std::abs(mean))) {
      s.keep.push_back(j);
      means.push_back(mean);
      stds.push_back(sd);
    }
  }
  s.mean = Eigen::Map<Eigen::VectorXd>(means.data(), static_cast<Eigen::Index>(means.size()));
  s.std = Eigen::Map<Eigen::VectorXd>(stds.data(), static_cast<Eigen::Index>(stds.size()));
  return s;
}

Eigen::MatrixXd scale(const Eigen::MatrixXd& x, const FoldScaler& s) {
  Eigen::MatrixXd z(x.rows(), static_cast<Eigen::Index>(s.keep.size()));
  for (std::size_t j = 0; j < s.keep.size(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    z.col(jj) = (x.col(s.keep[j]).array() - s.mean(jj)) / s.std(jj);
  }
  return z;
}

}  // namespace

CvResult cross_validate(const DesignMatrix& design, const Eigen::VectorXd& labels, int k, const FitConfig& config,
                        std::int64_t seed) {
  const auto n = design.rows.rows();
  if (labels.size() != n) throw ValidationError("DimensionMismatch", "label count does not match design rows");
  const std::vector<int> fold = stratified_folds(labels, k, seed);

  CvResult cv;
  cv.k = k;
  cv.seed = seed;
  cv.lambda = config.lambda;
  cv.held_out_propensity = Eigen::VectorXd::Zero(n);
  for (int f = 0; f < k; ++f) {
    std::vector<Eigen::Index> train, test;
    for (Eigen::Index i = 0; i < n; ++i) (fold[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
    const Eigen::MatrixXd x_train = design.rows(train, Eigen::all);
    const Eigen::MatrixXd x_test = design.rows(test, Eigen::all);
    const Eigen::VectorXd y_train = labels(train);
    const Eigen::VectorXd y_test = labels(test);

    const FoldScaler scaler = fold_scaler(x_train);
    const FitResult r = fit_matrix(scale(x_train, scaler), y_train, config);
    Eigen::VectorXd eta = scale(x_test, scaler) * r.theta.tail(r.theta.size() - 1);
    Eigen::VectorXd prob(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) prob(i) = sigmoid(eta(i) + r.theta(0));
    for (std::size_t i = 0; i < test.size(); ++i) cv.held_out_propensity(test[i]) = prob(static_cast<Eigen::Index>(i));

    const auto pred = threshold_labels(prob);
    std::vector<bool> truth(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) truth[i] = y_test(static_cast<Eigen::Index>(i)) > 0.5;
    cv.per_fold.push_back({accuracy(pred, truth), roc_auc(prob, truth)});
  }

  std::vector<bool> truth(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) truth[static_cast<std::size_t>(i)] = labels(i) > 0.5;
  cv.accuracy = accuracy(threshold_labels(cv.held_out_propensity), truth);
  cv.auc = roc_auc(cv.held_out_propensity, truth);
  constexpr double eps = 1e-15;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = std::clamp(cv.held_out_propensity(i), eps, 1.0 - eps);
    cv.log_likelihood += truth[static_cast<std::size_t>(i)] ? std::log(p) : std::log1p(-p);
  }
  return cv;
}

LambdaSelection select_lambda(const DesignMatrix& design, const Eigen::VectorXd& labels, const std::vector<double>& grid,
                              int k, const FitConfig& base, std::int64_t seed) {
  if (grid.empty()) throw UsageError("EmptyLambdaGrid", "lambda grid is empty");
  LambdaSelection sel;
  double best = -std::numeric_limits<double>::infinity();
  for (double lambda : grid) {
    FitConfig cfg = base;
    cfg.lambda = lambda;
    const double ll = cross_validate(design, labels, k, cfg, seed).log_likelihood;
    sel.log_likelihood.emplace_back(lambda, ll);
    if (ll > best || (ll == best && lambda > sel.lambda)) {
      best = ll;
      sel.lambda = lambda;
    }
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Serialization

json encoding_to_json(const EncodingMap& encoding) {
  json cols = json::array();
  for (const auto& c : encoding.columns()) {
    cols.push_back({{"cue", c.cue}, {"level", c.level}, {"mean", c.mean}, {"std", c.std}, {"dropped", c.dropped}});
  }
  return {{"fingerprint", encoding.fingerprint()}, {"columns", std::move(cols)}};
}

EncodingMap encoding_from_json(const json& doc) {
  std::vector<EncodedColumn> cols;
  for (const auto& c : doc.at("columns")) {
    cols.push_back({c.at("cue").get<std::string>(), c.at("level").get<std::string>(), c.at("mean").get<double>(),
                    c.at("std").get<double>(), c.at("dropped").get<bool>()});
  }
  EncodingMap map(std::move(cols));
  if (doc.contains("fingerprint") && doc["fingerprint"].get<std::string>() != map.fingerprint()) {
    throw ValidationError("FingerprintMismatch", "encoding fingerprint does not match its columns");
  }
  return map;
}

std::string policy_fingerprint(const PolicyVector& policy) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    h ^= 0x1f;
    h *= 0x100000001b3ULL;
  };
  feed(format_exact(policy.intercept));
  for (Eigen::Index j = 0; j < policy.coefficients.size(); ++j) feed(format_exact(policy.coefficients(j)));
  return policy.encoding->fingerprint() + "-" + fmt::format("{:016x}", h);
}

json policy_to_json(const PolicyVector& policy) {
  json coefs = json::array();
  for (std::size_t j = 0; j < policy.encoding->retained_count(); ++j) {
    const auto& c = policy.encoding->retained_column(j);
    coefs.push_back({{"cue", c.cue}, {"level", c.level}, {"coefficient", policy.coefficients(static_cast<Eigen::Index>(j))}});
  }
  const auto& d = policy.diagnostics;
  return {{"format", "calm-policy/1"},
          {"encoding_fingerprint", policy.encoding->fingerprint()},
          {"intercept", policy.intercept},
          {"coefficients", std::move(coefs)},
          {"diagnostics",
           {{"converged", d.converged},
            {"iterations", d.iterations},
            {"final_gradient_norm", d.final_gradient_norm},
            {"final_objective", d.final_objective},
            {"gradient_fallback", d.used_gradient_fallback},
            {"lambda", d.lambda},
            {"n_cases", d.n_cases},
            {"positive_rate", d.positive_rate}}},
          {"encoding", encoding_to_json(*policy.encoding)}};
}

PolicyVector policy_from_json(const json& doc) {
  try {
    if (doc.value("format", "") != "calm-policy/1") {
      throw ValidationError("UnknownPolicyFormat", "unsupported policy format");
    }
    auto encoding = std::make_shared<const EncodingMap>(encoding_from_json(doc.at("encoding")));
    if (doc.at("encoding_fingerprint").get<std::string>() != encoding->fingerprint()) {
      throw ValidationError("FingerprintMismatch", "policy fingerprint does not match its encoding");
    }
    const auto& coefs = doc.at("coefficients");
    if (coefs.size() != encoding->retained_count()) {
      throw ValidationError("DimensionMismatch", "coefficient count does not match retained columns");
    }
    PolicyVector p;
    p.encoding = encoding;
    p.intercept = doc.at("intercept").get<double>();
    p.coefficients.resize(static_cast<Eigen::Index>(coefs.size()));
    for (std::size_t j = 0; j < coefs.size(); ++j) {
      const auto& c = encoding->retained_column(j);
      if (coefs[j].at("cue").get<std::string>() != c.cue || coefs[j].at("level").get<std::string>() != c.level) {
        throw ValidationError("EncodingMismatch", "coefficient " + std::to_string(j) + " is not aligned with the encoding");
      }
      p.coefficients(static_cast<Eigen::Index>(j)) = coefs[j].at("coefficient").get<double>();
    }
    const auto& d = doc.at("diagnostics");
    p.diagnostics.converged = d.at("converged").get<bool>();
    p.diagnostics.iterations = d.at("iterations").get<int>();
    p.diagnostics.final_gradient_norm = d.at("final_gradient_norm").get<double>();
    p.diagnostics.final_objective = d.at("final_objective").get<double>();
    p.diagnostics.used_gradient_fallback = d.value("gradient_fallback", false);
    p.diagnostics.lambda = d.at("lambda").get<double>();
    p.diagnostics.n_cases = d.at("n_cases").get<std::size_t>();
    p.diagnostics.positive_rate = d.at("positive_rate").get<double>();
    if (!std::isfinite(p.intercept) || !p.coefficients.allFinite()) {
      throw ValidationError("NonFinitePolicy", "policy has non-finite entries");
    }
    return p;
  } catch (const json::exception& e) {
    throw ValidationError("MalformedPolicy", std::string("policy field error: ") + e.what());
  }
}

json cv_to_json(const CvResult& cv) {
  json folds = json::array();
  for (const auto& f : cv.per_fold) folds.push_back({{"accuracy", f.accuracy}, {"auc", f.auc}});
  return {{"k", cv.k},         {"seed", cv.seed},          {"lambda", cv.lambda},
          {"accuracy", cv.accuracy}, {"auc", cv.auc}, {"log_likelihood", cv.log_likelihood},
          {"per_fold", std::move(folds)}};
}

}  // namespace calm
