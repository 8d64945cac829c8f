#include "calm/metrics.hpp"

#include "calm/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <unordered_map>

namespace calm {

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw ValidationError("DimensionMismatch", "cosine of vectors with different lengths");
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) {
    throw NumericalError("ZeroVector", "alignment undefined: zero coefficient vector");
  }
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw ValidationError("DimensionMismatch", "pearson of vectors with different lengths");
  if (a.size() < 2) throw ValidationError("TooShort", "pearson needs at least 2 entries");
  const Eigen::VectorXd ca = a.array() - a.mean();
  const Eigen::VectorXd cb = b.array() - b.mean();
  const double na = ca.norm();
  const double nb = cb.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericalError("ConstantVector", "pearson undefined for a constant vector");
  return std::clamp(ca.dot(cb) / (na * nb), -1.0, 1.0);
}

double propensity_correlation(const PolicyVector& a, const PolicyVector& b, const DesignMatrix& design) {
  return pearson(predict_propensity(a, design), predict_propensity(b, design));
}

namespace {

void check_pair(const std::vector<bool>& pred, const std::vector<bool>& truth) {
  if (pred.size() != truth.size()) throw ValidationError("DimensionMismatch", "prediction and truth lengths differ");
  if (pred.empty()) throw ValidationError("EmptyVector", "metric of an empty vector");
}

}  // namespace

double accuracy(const std::vector<bool>& pred, const std::vector<bool>& truth) {
  check_pair(pred, truth);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) agree += pred[i] == truth[i];
  return static_cast<double>(agree) / static_cast<double>(pred.size());
}

std::optional<double> cohens_kappa(const std::vector<bool>& pred, const std::vector<bool>& truth) {
  check_pair(pred, truth);
  const double n = static_cast<double>(pred.size());
  double agree = 0, pred_pos = 0, truth_pos = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    agree += pred[i] == truth[i];
    pred_pos += pred[i];
    truth_pos += truth[i];
  }
  const double po = agree / n;
  const double pe = (pred_pos / n) * (truth_pos / n) + (1.0 - pred_pos / n) * (1.0 - truth_pos / n);
  if (pe >= 1.0) return std::nullopt;
  return (po - pe) / (1.0 - pe);
}

double roc_auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw ValidationError("DimensionMismatch", "score and label lengths differ");
  std::uint64_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw ValidationError("NaNScore", "AUC scores contain NaN");
    (labels[i] ? n_pos : n_neg) += 1;
  }
  if (n_pos == 0 || n_neg == 0) throw NumericalError("SingleClass", "AUC needs both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the concordant-pair count: ties contribute 1, wins 2.
  std::uint64_t twice_concordant = 0;
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos_g = 0, neg_g = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? pos_g : neg_g) += 1;
      ++j;
    }
    twice_concordant += 2 * pos_g * neg_below + pos_g * neg_g;
    neg_below += neg_g;
    i = j;
  }
  return static_cast<double>(twice_concordant) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double roc_auc(const Eigen::VectorXd& scores, const std::vector<bool>& labels) {
  return roc_auc(std::vector<double>(scores.data(), scores.data() + scores.size()), labels);
}

double positive_rate(const std::vector<bool>& pred) {
  if (pred.empty()) throw ValidationError("EmptyVector", "positive rate of an empty vector");
  return static_cast<double>(std::count(pred.begin(), pred.end(), true)) / static_cast<double>(pred.size());
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> aligned_coefficients(const PolicyVector& a, const PolicyVector& b,
                                                                 std::vector<std::string>* warnings) {
  auto keys = [](const PolicyVector& p) {
    std::vector<std::string> k;
    for (std::size_t j = 0; j < p.encoding->retained_count(); ++j) k.push_back(EncodingMap::column_key(p.encoding->retained_column(j)));
    return k;
  };
  const auto ka = keys(a);
  const auto kb = keys(b);
  if (ka == kb) return {a.coefficients, b.coefficients};

  std::vector<std::string> all = ka;
  std::unordered_map<std::string, Eigen::Index> pos;
  for (std::size_t j = 0; j < ka.size(); ++j) pos[ka[j]] = static_cast<Eigen::Index>(j);
  for (const auto& k : kb) {
    if (pos.emplace(k, static_cast<Eigen::Index>(all.size())).second) all.push_back(k);
  }
  Eigen::VectorXd va = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(all.size()));
  Eigen::VectorXd vb = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(all.size()));
  for (std::size_t j = 0; j < ka.size(); ++j) va(pos[ka[j]]) = a.coefficients(static_cast<Eigen::Index>(j));
  for (std::size_t j = 0; j < kb.size(); ++j) vb(pos[kb[j]]) = b.coefficients(static_cast<Eigen::Index>(j));
  if (warnings) {
    warnings->push_back("retained column sets differ (" + std::to_string(ka.size()) + " vs " + std::to_string(kb.size()) +
                        "); absent columns compared as 0");
  }
  return {va, vb};
}

double policy_cosine(const PolicyVector& a, const PolicyVector& b, std::vector<std::string>* warnings) {
  const auto [va, vb] = aligned_coefficients(a, b, warnings);
  return cosine_similarity(va, vb);
}

AlignmentAnalysis analyze_alignment(const PolicyVector& org_policy, const Dataset& agent_decisions,
                                    const DesignMatrix& design, const FitConfig& config, const CvSpec& cv) {
  if (agent_decisions.size() != design.case_ids.size()) {
    throw ValidationError("CaseMismatch", "agent decisions cover " + std::to_string(agent_decisions.size()) +
                                              " cases, design has " + std::to_string(design.case_ids.size()));
  }
  Eigen::VectorXd agent_labels(static_cast<Eigen::Index>(design.case_ids.size()));
  std::vector<bool> agent_pred(design.case_ids.size());
  std::vector<bool> truth(design.case_ids.size());
  for (std::size_t i = 0; i < design.case_ids.size(); ++i) {
    auto idx = agent_decisions.index_of(design.case_ids[i]);
    if (!idx) throw ValidationError("CaseMismatch", "agent decisions lack case '" + design.case_ids[i] + "'");
    agent_pred[i] = agent_decisions[*idx].decision;
    agent_labels(static_cast<Eigen::Index>(i)) = agent_pred[i] ? 1.0 : 0.0;
    truth[i] = design.labels(static_cast<Eigen::Index>(i)) > 0.5;
  }

  AlignmentAnalysis out;
  out.agent_policy = fit(design, agent_labels, config);
  AlignmentReport& r = out.report;
  const auto [vo, va] = aligned_coefficients(org_policy, out.agent_policy, &r.warnings);
  r.cosine = cosine_similarity(vo, va);
  r.pearson_coeff = pearson(vo, va);
  r.propensity_corr = propensity_correlation(org_policy, out.agent_policy, design);
  r.accuracy = accuracy(agent_pred, truth);
  r.kappa = cohens_kappa(agent_pred, truth);
  out.agent_cv = cross_validate(design, agent_labels, cv.k, config, cv.seed);
  r.auc = out.agent_cv.auc;
  r.positive_rate = positive_rate(agent_pred);
  r.n_cases = agent_pred.size();
  return out;
}

AlignmentReport alignment_report(const PolicyVector& org_policy, const Dataset& agent_decisions,
                                 const DesignMatrix& design, const FitConfig& config, const CvSpec& cv) {
  return analyze_alignment(org_policy, agent_decisions, design, config, cv).report;
}

nlohmann::ordered_json report_to_json(const AlignmentReport& r) {
  nlohmann::ordered_json j;
  j["r_cos"] = r.cosine;
  j["acc"] = r.accuracy;
  j["auc"] = r.auc;
  j["good_pct"] = 100.0 * r.positive_rate;
  j["pearson_coeff"] = r.pearson_coeff;
  j["propensity_corr"] = r.propensity_corr;
  j["kappa"] = r.kappa ? nlohmann::ordered_json(*r.kappa) : nlohmann::ordered_json("undefined");
  j["n_cases"] = r.n_cases;
  j["intercept_excluded"] = r.intercept_excluded;
  j["warnings"] = r.warnings;
  return j;
}

}  // namespace calm
