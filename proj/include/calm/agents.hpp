#pragma once

// Decision-makers the pipeline can run: synthetic linear agents with known
// policies, replayed decision files, and external processes speaking a
// line-delimited JSON protocol.

#include "calm/audit.hpp"
#include "calm/case_data.hpp"
#include "calm/externalization.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace calm {

/// Linear agent over standardized design columns:
/// P(positive | x) = sigmoid((intercept + x . coefficients) / temperature).
struct SyntheticAgentSpec {
  double intercept = 0.0;
  Eigen::VectorXd coefficients;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  double steer_alpha = 0.0;  // guidance uptake, 0 ignores guidance

  void validate() const;
};

/// Bernoulli draw with uniform u = f(seed, case_index), so the outcome for a
/// case never depends on evaluation order.
bool synthetic_decide(const SyntheticAgentSpec& spec, const Eigen::VectorXd& encoded_case, std::size_t case_index);

inline constexpr double kTierMagnitudeHigh = 1.0;
inline constexpr double kTierMagnitudeMedium = 0.5;
inline constexpr double kTierMagnitudeLow = 0.1;

/// Coefficients implied by guidance directives: tier magnitude with the
/// directive's sign on the numeric column or the named level's column.
/// Directives whose column was dropped from the encoding are skipped.
Eigen::VectorXd guidance_coefficients(const std::vector<GuidanceDirective>& directives, const EncodingMap& encoding);

/// coefficients' = (1 - alpha) beta + alpha beta_g, with beta_g rescaled to
/// |beta|. The intercept is kept. Throws ValidationError("UnparseableGuidance").
SyntheticAgentSpec steer(const SyntheticAgentSpec& spec, const GuidanceArtifact& guidance, const EncodingMap& encoding,
                         const CueSchema& schema);

enum class Condition { baseline, org_ext, introspective };
std::string_view to_string(Condition condition);
Condition parse_condition(std::string_view text);

struct DecisionSet {
  std::string agent;
  Condition condition = Condition::baseline;
  std::vector<std::string> case_ids;
  std::vector<bool> decisions;
  std::vector<StatedTiers> stated_tiers;  // empty, or one entry per case

  std::size_t size() const noexcept { return case_ids.size(); }
  bool has_stated_tiers() const noexcept { return !stated_tiers.empty(); }
};

/// One line per case: {"case_id", "decision": <label>, "stated_tiers"?}.
void write_decisions_jsonl(std::ostream& out, const DecisionSet& set, const CueSchema& schema);

/// Accepts label strings, booleans or 0/1 for "decision".
DecisionSet read_decisions_jsonl(std::istream& in, const CueSchema& schema, const std::string& agent,
                                 Condition condition);

/// `dataset` relabeled with the set's decisions. Throws
/// ValidationError("MissingDecision") when a case is not covered.
Dataset apply_decisions(const Dataset& dataset, const DecisionSet& set);

struct SyntheticAgent {
  SyntheticAgentSpec spec;
  /// Also report per-case tiers from each cue's share of the linear score.
  bool emit_stated_tiers = false;
};

struct ReplayAgent {
  std::map<Condition, DecisionSet> sets;
};

/// Child process started with /bin/sh -c <command>; one request line per
/// case on stdin, one reply line per case on stdout.
struct ExternalAgent {
  std::string command;
  std::chrono::milliseconds timeout{30000};  // per reply
};

inline constexpr std::string_view kAgentProtocol = "calm-agent/1";

using Agent = std::variant<SyntheticAgent, ReplayAgent, ExternalAgent>;

/// Decisions of `agent` on every case of `dataset`, in dataset order.
/// `design` supplies the encoded cases for synthetic agents and must list
/// the dataset's cases in order. Synthetic agents are steered by `guidance`
/// in the non-baseline conditions; external agents receive its text.
DecisionSet run_agent(const Dataset& dataset, const DesignMatrix& design, const Agent& agent, Condition condition,
                      const std::string& name, const GuidanceArtifact* guidance = nullptr);

}  // namespace calm
