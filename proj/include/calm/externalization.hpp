#pragma once

// Guidance text built from fitted policies: the organization's tiered cue
// weighting, and divergence feedback comparing an agent's own baseline
// policy with the organization's.

#include "calm/audit.hpp"
#include "calm/case_data.hpp"
#include "calm/ridge_logit.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace calm {

enum class Direction { positive, negative };

struct CueTier {
  std::string cue;
  Tier tier = Tier::medium;
  Direction direction = Direction::positive;
  double magnitude = 0.0;     // sum of |coefficient| over the cue's columns
  std::string dominant_level;  // level of the largest-|coefficient| column, "numeric" for numeric cues
};

inline constexpr std::string_view kOrgTemplateVersion = "calm-org-v1";
inline constexpr std::string_view kIntrospectiveTemplateVersion = "calm-introspective-v1";
inline constexpr std::string_view kTierRule =
    "tertiles of per-cue magnitude by percentile rank k/(m-1): HIGH > 2/3, MEDIUM > 1/3, else LOW; "
    "equal magnitudes ordered by cue name; boundary ranks fall to the lower tier";

/// Tiers for magnitudes by percentile rank. Cues are ordered by descending
/// magnitude with ties broken by ascending name; fewer than three nonzero
/// magnitudes yields all MEDIUM.
std::vector<Tier> tertile_tiers(const std::vector<double>& magnitudes, const std::vector<std::string>& names);

/// One entry per cue of the policy's encoding, ordered by descending
/// magnitude (ties by name).
std::vector<CueTier> tier_assignment(const PolicyVector& policy);

enum class GuidanceKind { org_externalized, introspective };
std::string_view to_string(GuidanceKind kind);

struct GuidanceArtifact {
  GuidanceKind kind = GuidanceKind::org_externalized;
  std::string body;
  nlohmann::ordered_json provenance;
};

std::vector<std::string> tier_lines_for(const std::vector<CueTier>& tiers, const CueSchema& schema);

/// One line per schema cue, HIGH to LOW then by name.
GuidanceArtifact render_org_externalization(const std::vector<CueTier>& tiers, const CueSchema& schema,
                                            const std::string& policy_fingerprint = {});

struct IntrospectiveOptions {
  /// Benchmark approval rate to compare against; defaults to the positive
  /// rate of the organization policy's fitting set.
  std::optional<double> reference_base_rate;
  double material_divergence = 0.01;
  double material_rate_gap = 0.05;
};

struct CueDivergence {
  std::string cue;
  double divergence = 0.0;  // L1 distance of the unit-normalized coefficients on the cue's columns
  double agent_share = 0.0;
  double org_share = 0.0;
  bool direction_disagrees = false;
};

/// Per-cue divergences, largest first (ties by name).
std::vector<CueDivergence> cue_divergences(const PolicyVector& org_policy, const PolicyVector& agent_policy);

GuidanceArtifact render_introspective(const PolicyVector& org_policy, const PolicyVector& agent_baseline_policy,
                                      const CueSchema& schema, const IntrospectiveOptions& options = {});

/// A directive recovered from a guidance line.
struct GuidanceDirective {
  std::string cue;
  std::string level;  // categorical level, or "numeric"
  Tier tier = Tier::medium;
  Direction direction = Direction::positive;
};

/// Parses every "- cue[ = level][ (higher values)]: ... <strength> indicator
/// of <label>" line. Throws ValidationError("UnparseableGuidance") when no
/// line parses or a line names an unknown cue, level or label.
std::vector<GuidanceDirective> parse_guidance(const std::string& body, const CueSchema& schema);

/// Writes <stem>.txt and <stem>.provenance.json under `dir`.
void write_artifact(const std::filesystem::path& dir, const std::string& stem, const GuidanceArtifact& artifact);

}  // namespace calm
