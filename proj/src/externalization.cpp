#include "calm/externalization.hpp"

#include "calm/errors.hpp"
#include "calm/io.hpp"
#include "calm/log.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <regex>
#include <sstream>

namespace calm {

std::vector<Tier> tertile_tiers(const std::vector<double>& magnitudes, const std::vector<std::string>& names) {
  const std::size_t m = magnitudes.size();
  std::vector<Tier> tiers(m, Tier::medium);
  const auto nonzero = std::count_if(magnitudes.begin(), magnitudes.end(), [](double v) { return v > 0.0; });
  if (nonzero < 3) {
    logger().warn("tiering needs at least 3 cues with nonzero weight ({} found); all cues set to MEDIUM", nonzero);
    return tiers;
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (magnitudes[a] != magnitudes[b]) return magnitudes[a] > magnitudes[b];
    return names[a] < names[b];
  });
  const std::size_t top = m - 1;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t rank = top - i;  // ascending percentile rank rank/top
    tiers[order[i]] = 3 * rank > 2 * top ? Tier::high : 3 * rank > top ? Tier::medium : Tier::low;
  }
  return tiers;
}

std::vector<CueTier> tier_assignment(const PolicyVector& policy) {
  const EncodingMap& enc = *policy.encoding;
  std::vector<CueTier> cues;
  std::vector<double> dominant;
  for (const auto& name : enc.cue_names()) {
    CueTier t;
    t.cue = name;
    cues.push_back(t);
    dominant.push_back(-1.0);
  }
  for (const auto& c : enc.columns()) {
    if (c.level != "numeric") continue;
    auto it = std::find_if(cues.begin(), cues.end(), [&](const CueTier& t) { return t.cue == c.cue; });
    it->dominant_level = "numeric";
  }
  std::size_t pos = 0;
  for (std::size_t j = 0; j < enc.retained_count(); ++j) {
    const auto& col = enc.retained_column(j);
    while (cues[pos].cue != col.cue) ++pos;
    const double b = policy.coefficients(static_cast<Eigen::Index>(j));
    cues[pos].magnitude += std::abs(b);
    if (std::abs(b) > dominant[pos]) {
      dominant[pos] = std::abs(b);
      cues[pos].dominant_level = col.level;
      cues[pos].direction = b < 0.0 ? Direction::negative : Direction::positive;
    }
  }
  // Cues with every column dropped still need a level for rendering.
  for (auto& t : cues) {
    if (t.dominant_level.empty()) {
      auto it = std::find_if(enc.columns().begin(), enc.columns().end(), [&](const EncodedColumn& c) { return c.cue == t.cue; });
      t.dominant_level = it->level;
    }
  }
  std::vector<double> mags;
  std::vector<std::string> names;
  for (const auto& t : cues) {
    mags.push_back(t.magnitude);
    names.push_back(t.cue);
  }
  const auto tiers = tertile_tiers(mags, names);
  for (std::size_t i = 0; i < cues.size(); ++i) cues[i].tier = tiers[i];
  std::sort(cues.begin(), cues.end(), [](const CueTier& a, const CueTier& b) {
    if (a.magnitude != b.magnitude) return a.magnitude > b.magnitude;
    return a.cue < b.cue;
  });
  return cues;
}

std::string_view to_string(GuidanceKind kind) {
  return kind == GuidanceKind::org_externalized ? "org_externalized" : "introspective";
}

namespace {

std::string_view strength(Tier tier) {
  switch (tier) {
    case Tier::high: return "strong";
    case Tier::medium: return "moderate";
    case Tier::low: return "weak";
  }
  return "moderate";
}

int tier_order(Tier t) { return t == Tier::high ? 0 : t == Tier::medium ? 1 : 2; }

std::string cue_head(const CueTier& t) {
  if (t.dominant_level == "numeric") return t.cue + " (higher values)";
  return t.cue + " = " + t.dominant_level;
}

std::string indicator_phrase(const CueTier& t, const CueSchema& schema) {
  return fmt::format("{} indicator of {}", strength(t.tier),
                     t.direction == Direction::positive ? schema.positive_label() : schema.negative_label());
}

const CueTier& find_tier(const std::vector<CueTier>& tiers, const std::string& cue) {
  auto it = std::find_if(tiers.begin(), tiers.end(), [&](const CueTier& t) { return t.cue == cue; });
  if (it == tiers.end()) throw ValidationError("TierSchemaMismatch", "no tier for cue '" + cue + "'");
  return *it;
}

}  // namespace

std::vector<std::string> tier_lines_for(const std::vector<CueTier>& tiers, const CueSchema& schema) {
  for (const auto& t : tiers) {
    if (!schema.find(t.cue)) throw ValidationError("TierSchemaMismatch", "tier for cue '" + t.cue + "' is not in the schema");
  }
  std::vector<const CueTier*> ordered;
  for (const auto& cue : schema.cues()) ordered.push_back(&find_tier(tiers, cue.name));
  std::sort(ordered.begin(), ordered.end(), [](const CueTier* a, const CueTier* b) {
    if (tier_order(a->tier) != tier_order(b->tier)) return tier_order(a->tier) < tier_order(b->tier);
    return a->cue < b->cue;
  });
  std::vector<std::string> lines;
  for (const CueTier* t : ordered) {
    if (t->magnitude > 0.0) {
      lines.push_back("- " + cue_head(*t) + ": " + indicator_phrase(*t, schema));
    } else {
      lines.push_back("- " + t->cue + ": no measurable weight in the organization's decisions");
    }
  }
  return lines;
}

GuidanceArtifact render_org_externalization(const std::vector<CueTier>& tiers, const CueSchema& schema,
                                            const std::string& policy_fingerprint) {
  std::ostringstream body;
  body << "ORGANIZATIONAL DECISION GUIDANCE\n"
       << "The organization's historical decisions weight the case information as follows. "
       << "Apply this weighting when deciding between \"" << schema.positive_label() << "\" and \""
       << schema.negative_label() << "\".\n\n";
  for (const auto& line : tier_lines_for(tiers, schema)) body << line << '\n';
  body << "\nStrong indicators carry the most weight, moderate indicators less, weak indicators little.\n";

  GuidanceArtifact a;
  a.kind = GuidanceKind::org_externalized;
  a.body = body.str();
  a.provenance["kind"] = std::string(to_string(a.kind));
  a.provenance["template_version"] = std::string(kOrgTemplateVersion);
  a.provenance["policy_fingerprints"] = nlohmann::ordered_json::array();
  if (!policy_fingerprint.empty()) a.provenance["policy_fingerprints"].push_back(policy_fingerprint);
  a.provenance["tier_rule"] = std::string(kTierRule);
  return a;
}

std::vector<CueDivergence> cue_divergences(const PolicyVector& org, const PolicyVector& agent) {
  const EncodingMap& enc = *org.encoding;
  bool same = enc.retained_count() == agent.encoding->retained_count();
  for (std::size_t j = 0; same && j < enc.retained_count(); ++j) {
    same = EncodingMap::column_key(enc.retained_column(j)) == EncodingMap::column_key(agent.encoding->retained_column(j));
  }
  if (!same) throw ValidationError("EncodingMismatch", "introspective feedback needs policies on one encoding");
  const double on = org.coefficients.lpNorm<1>();
  const double an = agent.coefficients.lpNorm<1>();
  if (!(on > 0.0) || !(an > 0.0)) throw NumericalError("ZeroVector", "divergence undefined for an all-zero policy");

  std::vector<CueDivergence> out;
  std::vector<double> org_dominant;
  std::vector<double> org_sign, agent_at_dominant;
  for (const auto& name : enc.cue_names()) {
    out.push_back({name});
    org_dominant.push_back(-1.0);
    org_sign.push_back(0.0);
    agent_at_dominant.push_back(0.0);
  }
  std::size_t pos = 0;
  for (std::size_t j = 0; j < enc.retained_count(); ++j) {
    const auto& col = enc.retained_column(j);
    while (out[pos].cue != col.cue) ++pos;
    const double o = org.coefficients(static_cast<Eigen::Index>(j)) / on;
    const double a = agent.coefficients(static_cast<Eigen::Index>(j)) / an;
    out[pos].divergence += std::abs(a - o);
    out[pos].org_share += std::abs(o);
    out[pos].agent_share += std::abs(a);
    if (std::abs(o) > org_dominant[pos]) {
      org_dominant[pos] = std::abs(o);
      org_sign[pos] = o;
      agent_at_dominant[pos] = a;
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].direction_disagrees = org_sign[i] != 0.0 && org_sign[i] * agent_at_dominant[i] < 0.0;
  }
  std::sort(out.begin(), out.end(), [](const CueDivergence& a, const CueDivergence& b) {
    if (a.divergence != b.divergence) return a.divergence > b.divergence;
    return a.cue < b.cue;
  });
  return out;
}

GuidanceArtifact render_introspective(const PolicyVector& org_policy, const PolicyVector& agent_policy,
                                      const CueSchema& schema, const IntrospectiveOptions& options) {
  const auto divergences = cue_divergences(org_policy, agent_policy);
  const auto tiers = tier_assignment(org_policy);
  const double reference = options.reference_base_rate.value_or(org_policy.diagnostics.positive_rate);
  const double agent_rate = agent_policy.diagnostics.positive_rate;
  const double gap = agent_rate - reference;

  std::ostringstream body;
  body << "SELF-CORRECTION FEEDBACK\n"
       << "Your earlier decisions on these cases were compared with the organization's historical decisions, "
       << "aggregated over all cases.\n\n";
  body << fmt::format("Approval: you decided \"{}\" in {:.1f}% of cases; the organization's base rate is {:.1f}%. ",
                      schema.positive_label(), 100.0 * agent_rate, 100.0 * reference);
  if (gap < -options.material_rate_gap) {
    body << "You under-approve relative to the organization's base rate.\n\n";
  } else if (gap > options.material_rate_gap) {
    body << "You over-approve relative to the organization's base rate.\n\n";
  } else {
    body << "Your approval rate is in line with the organization's base rate.\n\n";
  }

  const bool any_material = std::any_of(divergences.begin(), divergences.end(), [&](const CueDivergence& d) {
    return d.divergence >= options.material_divergence || d.direction_disagrees;
  });
  body << "Cue weighting, largest divergence first:\n";
  for (const auto& d : divergences) {
    const CueTier& t = find_tier(tiers, d.cue);
    body << "- " << cue_head(t) << ": ";
    if (d.divergence >= options.material_divergence || d.direction_disagrees) {
      body << fmt::format("divergence {:.3f}", d.divergence);
    } else {
      body << "no material divergence";
    }
    body << fmt::format("; your weight share {:.3f} vs organization {:.3f}", d.agent_share, d.org_share);
    if (d.direction_disagrees) body << "; direction disagrees";
    if (t.magnitude > 0.0) body << "; organization reads it as a " << indicator_phrase(t, schema);
    body << '\n';
  }
  body << '\n';
  if (!any_material) body << "There is no material divergence between your cue weighting and the organization's.\n";
  body << "Correct your decisions so that your use of each cue matches the organization's weighting and your "
          "approval rate moves toward the organization's base rate.\n";

  GuidanceArtifact a;
  a.kind = GuidanceKind::introspective;
  a.body = body.str();
  a.provenance["kind"] = std::string(to_string(a.kind));
  a.provenance["template_version"] = std::string(kIntrospectiveTemplateVersion);
  a.provenance["policy_fingerprints"] = {policy_fingerprint(org_policy), policy_fingerprint(agent_policy)};
  a.provenance["tier_rule"] = std::string(kTierRule);
  a.provenance["divergence_order"] = "descending L1 distance of unit-normalized coefficients per cue";
  a.provenance["material_divergence"] = options.material_divergence;
  a.provenance["material_rate_gap"] = options.material_rate_gap;
  a.provenance["reference_base_rate"] = reference;
  return a;
}

std::vector<GuidanceDirective> parse_guidance(const std::string& body, const CueSchema& schema) {
  static const std::regex line_re(
      R"(^- ([^=:(]+?)(?: = ([^:]+?))?(?: \(higher values\))?: .*\b(strong|moderate|weak) indicator of (.+?)\s*$)");
  std::vector<GuidanceDirective> out;
  std::istringstream in(body);
  std::string line;
  while (std::getline(in, line)) {
    std::smatch m;
    if (!std::regex_match(line, m, line_re)) continue;
    GuidanceDirective d;
    d.cue = m[1].str();
    const auto idx = schema.find(d.cue);
    if (!idx) throw ValidationError("UnparseableGuidance", "guidance names unknown cue '" + d.cue + "'");
    const CueDef& cue = schema[*idx];
    if (cue.kind == CueKind::categorical) {
      d.level = m[2].str();
      if (std::find(cue.levels.begin(), cue.levels.end(), d.level) == cue.levels.end()) {
        throw ValidationError("UnparseableGuidance", "guidance names unknown level '" + d.level + "' of '" + d.cue + "'");
      }
    } else {
      if (m[2].matched) throw ValidationError("UnparseableGuidance", "numeric cue '" + d.cue + "' given a level");
      d.level = "numeric";
    }
    const std::string s = m[3].str();
    d.tier = s == "strong" ? Tier::high : s == "moderate" ? Tier::medium : Tier::low;
    const std::string label = m[4].str();
    if (label == schema.positive_label()) {
      d.direction = Direction::positive;
    } else if (label == schema.negative_label()) {
      d.direction = Direction::negative;
    } else {
      throw ValidationError("UnparseableGuidance", "guidance names unknown label '" + label + "'");
    }
    out.push_back(std::move(d));
  }
  if (out.empty()) throw ValidationError("UnparseableGuidance", "guidance contains no cue directives");
  return out;
}

void write_artifact(const std::filesystem::path& dir, const std::string& stem, const GuidanceArtifact& artifact) {
  write_file_atomic(dir / (stem + ".txt"), artifact.body);
  write_file_atomic(dir / (stem + ".provenance.json"), artifact.provenance.dump(2) + "\n");
}

}  // namespace calm
