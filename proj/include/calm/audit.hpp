#pragma once

// Attribute-level reliance of fitted policies, protected-attribute
// comparison across decision-makers, degenerate-output detection, and
// stated-versus-behavioral weighting.

#include "calm/case_data.hpp"
#include "calm/ridge_logit.hpp"

#include <nlohmann/json.hpp>

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace calm {

/// How coefficient mass is attributed: L1 shares |b_j| / sum |b|, or the
/// squared-coefficient alternative b_j^2 / sum b^2 for sensitivity checks.
enum class WeightNorm { l1, l2 };

struct AttributeWeight {
  std::string attribute;
  double share = 0.0;
};

/// One share per cue in encoding order (cues whose columns were all dropped
/// get 0). Shares sum to 1. Throws NumericalError("ZeroVector") for an
/// all-zero coefficient vector.
std::vector<AttributeWeight> attribute_relative_weights(const PolicyVector& policy, WeightNorm norm = WeightNorm::l1);

double share_of(const std::vector<AttributeWeight>& weights, const std::string& attribute);

struct PolicyKey {
  std::string decision_maker;
  std::string condition;

  friend auto operator<=>(const PolicyKey&, const PolicyKey&) = default;
};

struct AuditRow {
  std::string decision_maker;
  std::string condition;
  std::string attribute;
  bool is_protected = false;
  double share = 0.0;
  double delta_vs_org = 0.0;
  std::optional<double> delta_vs_baseline;  // same decision-maker, baseline condition
};

struct AuditReport {
  PolicyKey org;
  WeightNorm norm = WeightNorm::l1;
  std::vector<AuditRow> rows;
};

/// Policies are tabulated in the given order; `org` must be among them and
/// every policy must share its encoding.
AuditReport protected_attribute_report(const std::vector<std::pair<PolicyKey, PolicyVector>>& policies,
                                       const CueSchema& schema, const PolicyKey& org = {"org", "baseline"},
                                       WeightNorm norm = WeightNorm::l1);

/// Long-form table: decision_maker,condition,attribute,protected,share,delta_vs_org
void write_audit_csv(std::ostream& out, const AuditReport& report);
void write_audit_jsonl(std::ostream& out, const AuditReport& report);

enum class DegenerateStatus { ok, warn_extreme, degenerate };
std::string_view to_string(DegenerateStatus status);

struct DegenerateFlag {
  DegenerateStatus status = DegenerateStatus::ok;
  double positive_rate = 0.0;
};

/// degenerate when the positive rate is >= 0.99 or <= 0.01; warn_extreme when
/// outside [0.10, 0.90]; ok otherwise. Comparisons use exact counts.
DegenerateFlag degenerate_check(const std::vector<bool>& pred);

enum class Tier { high, medium, low };
std::string_view to_string(Tier tier);
Tier parse_tier(std::string_view text);

/// Per-case stated tiers: attribute -> "HIGH" | "MEDIUM" | "LOW".
using StatedTiers = std::map<std::string, std::string>;

struct StatedBehavioralRow {
  std::string attribute;
  double stated_high_rate = 0.0;  // fraction of labeled cases marked HIGH
  double stated_share = 0.0;      // high rate normalized to sum to 1
  double behavioral_share = 0.0;  // L1 relative weight
  double divergence = 0.0;        // stated_share - behavioral_share
  std::string direction;          // "stated > behavioral" | "stated < behavioral" | "consistent"
  bool flagged = false;           // largest |divergence|
};

struct StatedBehavioralTable {
  std::vector<StatedBehavioralRow> rows;
  std::optional<double> rank_correlation;  // Spearman, average ranks for ties
};

/// `stated[i]` holds the tiers the agent stated for case i. Rows cover the
/// attributes that appear in any stated mapping, in encoding cue order.
StatedBehavioralTable stated_vs_behavioral(const std::vector<StatedTiers>& stated, const PolicyVector& policy);

void write_stated_csv(std::ostream& out, const StatedBehavioralTable& table);

/// Spearman correlation with average ranks; nullopt when either side is constant.
std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace calm
