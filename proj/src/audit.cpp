#include "calm/audit.hpp"

#include "calm/errors.hpp"
#include "calm/io.hpp"
#include "calm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace calm {

std::vector<AttributeWeight> attribute_relative_weights(const PolicyVector& policy, WeightNorm norm) {
  const EncodingMap& enc = *policy.encoding;
  std::vector<AttributeWeight> out;
  for (const auto& name : enc.cue_names()) out.push_back({name, 0.0});
  double total = 0.0;
  std::size_t cue_pos = 0;
  for (std::size_t j = 0; j < enc.retained_count(); ++j) {
    const auto& col = enc.retained_column(j);
    while (out[cue_pos].attribute != col.cue) ++cue_pos;
    const double b = policy.coefficients(static_cast<Eigen::Index>(j));
    const double mass = norm == WeightNorm::l1 ? std::abs(b) : b * b;
    out[cue_pos].share += mass;
    total += mass;
  }
  if (!(total > 0.0)) throw NumericalError("ZeroVector", "relative weights undefined for an all-zero policy");
  for (auto& w : out) w.share /= total;
  return out;
}

double share_of(const std::vector<AttributeWeight>& weights, const std::string& attribute) {
  for (const auto& w : weights) {
    if (w.attribute == attribute) return w.share;
  }
  throw ValidationError("UnknownCue", "no relative weight for attribute '" + attribute + "'");
}

AuditReport protected_attribute_report(const std::vector<std::pair<PolicyKey, PolicyVector>>& policies,
                                       const CueSchema& schema, const PolicyKey& org, WeightNorm norm) {
  const PolicyVector* org_policy = nullptr;
  for (const auto& [key, policy] : policies) {
    if (key == org) org_policy = &policy;
  }
  if (!org_policy) {
    throw ValidationError("MissingBenchmark", "audit needs the benchmark policy '" + org.decision_maker + "/" +
                                                  org.condition + "'");
  }
  const std::string fingerprint = org_policy->encoding->fingerprint();
  for (const auto& [key, policy] : policies) {
    if (policy.encoding->fingerprint() != fingerprint) {
      throw ValidationError("EncodingMismatch", "policy " + key.decision_maker + "/" + key.condition +
                                                    " does not share the benchmark encoding");
    }
  }

  const auto org_weights = attribute_relative_weights(*org_policy, norm);
  std::map<std::string, std::vector<AttributeWeight>> baseline_weights;
  for (const auto& [key, policy] : policies) {
    if (key.condition == "baseline") baseline_weights[key.decision_maker] = attribute_relative_weights(policy, norm);
  }

  AuditReport report;
  report.org = org;
  report.norm = norm;
  for (const auto& [key, policy] : policies) {
    const auto weights = attribute_relative_weights(policy, norm);
    const auto base = baseline_weights.find(key.decision_maker);
    for (std::size_t a = 0; a < weights.size(); ++a) {
      AuditRow row;
      row.decision_maker = key.decision_maker;
      row.condition = key.condition;
      row.attribute = weights[a].attribute;
      row.is_protected = schema.find(row.attribute) ? schema.cue(row.attribute).is_protected : false;
      row.share = weights[a].share;
      row.delta_vs_org = weights[a].share - org_weights[a].share;
      if (base != baseline_weights.end()) row.delta_vs_baseline = weights[a].share - base->second[a].share;
      report.rows.push_back(std::move(row));
    }
  }
  return report;
}

void write_audit_csv(std::ostream& out, const AuditReport& report) {
  out << "decision_maker,condition,attribute,protected,share,delta_vs_org\n";
  for (const auto& r : report.rows) {
    out << r.decision_maker << ',' << r.condition << ',' << r.attribute << ',' << (r.is_protected ? "true" : "false")
        << ',' << format_real(r.share) << ',' << format_real(r.delta_vs_org) << '\n';
  }
}

void write_audit_jsonl(std::ostream& out, const AuditReport& report) {
  for (const auto& r : report.rows) {
    nlohmann::ordered_json j;
    j["decision_maker"] = r.decision_maker;
    j["condition"] = r.condition;
    j["attribute"] = r.attribute;
    j["protected"] = r.is_protected;
    j["share"] = r.share;
    j["delta_vs_org"] = r.delta_vs_org;
    j["delta_vs_baseline"] = r.delta_vs_baseline ? nlohmann::ordered_json(*r.delta_vs_baseline) : nlohmann::ordered_json("NA");
    j["norm"] = report.norm == WeightNorm::l1 ? "l1" : "l2";
    out << j.dump() << '\n';
  }
}

std::string_view to_string(DegenerateStatus status) {
  switch (status) {
    case DegenerateStatus::ok: return "ok";
    case DegenerateStatus::warn_extreme: return "warn_extreme";
    case DegenerateStatus::degenerate: return "degenerate";
  }
  return "ok";
}

DegenerateFlag degenerate_check(const std::vector<bool>& pred) {
  if (pred.empty()) throw ValidationError("EmptyVector", "degenerate check of an empty decision vector");
  const auto n = static_cast<long long>(pred.size());
  const auto pos = static_cast<long long>(std::count(pred.begin(), pred.end(), true));
  DegenerateFlag flag;
  flag.positive_rate = static_cast<double>(pos) / static_cast<double>(n);
  // rate >= 0.99 or <= 0.01, in integer form.
  if (100 * pos >= 99 * n || 100 * pos <= n) {
    flag.status = DegenerateStatus::degenerate;
  } else if (10 * pos < n || 10 * pos > 9 * n) {
    flag.status = DegenerateStatus::warn_extreme;
  }
  return flag;
}

std::string_view to_string(Tier tier) {
  switch (tier) {
    case Tier::high: return "HIGH";
    case Tier::medium: return "MEDIUM";
    case Tier::low: return "LOW";
  }
  return "MEDIUM";
}

Tier parse_tier(std::string_view text) {
  if (text == "HIGH") return Tier::high;
  if (text == "MEDIUM") return Tier::medium;
  if (text == "LOW") return Tier::low;
  throw ValidationError("UnknownTier", "unknown tier label '" + std::string(text) + "'");
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j - 1) + 1.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

}  // namespace

std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) return std::nullopt;
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  try {
    return pearson(Eigen::Map<const Eigen::VectorXd>(ra.data(), static_cast<Eigen::Index>(ra.size())),
                   Eigen::Map<const Eigen::VectorXd>(rb.data(), static_cast<Eigen::Index>(rb.size())));
  } catch (const NumericalError&) {
    return std::nullopt;
  }
}

StatedBehavioralTable stated_vs_behavioral(const std::vector<StatedTiers>& stated, const PolicyVector& policy) {
  if (stated.size() != policy.diagnostics.n_cases && policy.diagnostics.n_cases != 0) {
    throw ValidationError("CaseMismatch", "stated tiers cover " + std::to_string(stated.size()) +
                                              " cases, the policy was fitted on " +
                                              std::to_string(policy.diagnostics.n_cases));
  }
  const auto weights = attribute_relative_weights(policy, WeightNorm::l1);
  std::map<std::string, std::pair<std::size_t, std::size_t>> counts;  // (high, labeled)
  for (const auto& tiers : stated) {
    for (const auto& [attr, label] : tiers) {
      const Tier t = parse_tier(label);
      auto& c = counts[attr];
      c.first += t == Tier::high;
      c.second += 1;
    }
  }
  for (const auto& entry : counts) {
    const std::string& attr = entry.first;
    if (std::none_of(weights.begin(), weights.end(), [&](const AttributeWeight& w) { return w.attribute == attr; })) {
      throw ValidationError("UnknownCue", "stated tier for unknown attribute '" + attr + "'");
    }
  }

  StatedBehavioralTable table;
  for (const auto& w : weights) {
    auto it = counts.find(w.attribute);
    if (it == counts.end()) continue;
    StatedBehavioralRow row;
    row.attribute = w.attribute;
    row.stated_high_rate = static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
    row.behavioral_share = w.share;
    table.rows.push_back(std::move(row));
  }
  double high_total = 0.0, share_total = 0.0;
  for (const auto& r : table.rows) {
    high_total += r.stated_high_rate;
    share_total += r.behavioral_share;
  }
  constexpr double kConsistent = 0.01;
  std::size_t flag_at = 0;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    auto& r = table.rows[i];
    r.stated_share = high_total > 0.0 ? r.stated_high_rate / high_total : 0.0;
    // Behavioral shares renormalized over the same attribute subset.
    const double behavioral = share_total > 0.0 ? r.behavioral_share / share_total : 0.0;
    r.divergence = r.stated_share - behavioral;
    r.direction = r.divergence > kConsistent    ? "stated > behavioral"
                  : r.divergence < -kConsistent ? "stated < behavioral"
                                                : "consistent";
    if (std::abs(r.divergence) > std::abs(table.rows[flag_at].divergence)) flag_at = i;
  }
  if (!table.rows.empty()) table.rows[flag_at].flagged = true;

  std::vector<double> highs, shares;
  for (const auto& r : table.rows) {
    highs.push_back(r.stated_high_rate);
    shares.push_back(r.behavioral_share);
  }
  table.rank_correlation = spearman(highs, shares);
  return table;
}

void write_stated_csv(std::ostream& out, const StatedBehavioralTable& table) {
  out << "attribute,stated_high_rate,stated_share,behavioral_share,divergence,direction,flagged\n";
  for (const auto& r : table.rows) {
    out << r.attribute << ',' << format_real(r.stated_high_rate) << ',' << format_real(r.stated_share) << ','
        << format_real(r.behavioral_share) << ',' << format_real(r.divergence) << ',' << r.direction << ','
        << (r.flagged ? "true" : "false") << '\n';
  }
  out << "# rank_correlation," << (table.rank_correlation ? format_real(*table.rank_correlation) : "undefined") << '\n';
}

}  // namespace calm
