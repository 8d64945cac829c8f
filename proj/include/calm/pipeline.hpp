#pragma once

// Manifest-driven experiment runs: benchmark fit, guidance, agent decisions,
// alignment comparison, audit, figure and summary report.
//
// Output layout under RunManifest::output_dir:
//   manifest.json        effective manifest (after flag overrides)
//   metadata.json        command, overrides and wall-clock times
//   cases/               working case set
//   policies/            fitted policies
//   guidance/            guidance text and provenance
//   decisions/           agent decisions per condition
//   tables/              .csv, .jsonl, .json and .md tables
//   figures/             alignment_vs_accuracy.svg
//   logs/                warnings, one file per command
// Everything except metadata.json depends only on the manifest.

#include "calm/agents.hpp"
#include "calm/audit.hpp"
#include "calm/case_data.hpp"
#include "calm/externalization.hpp"
#include "calm/inference.hpp"
#include "calm/metrics.hpp"
#include "calm/ridge_logit.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace calm {

struct SubsampleSpec {
  std::size_t n_per_class = 0;
  std::int64_t seed = 0;
};

/// Generated case set: numeric cues x01..xNN, independent standard normal.
struct SyntheticDataSpec {
  std::size_t n_cases = 600;
  int n_cues = 8;
  std::uint64_t seed = 0;
  std::vector<std::string> protected_cues;
};

/// How a synthetic agent's coefficients are set.
struct BetaSpec {
  enum class Kind { from_org, random, columns };
  Kind kind = Kind::from_org;
  double scale = 1.0;                     // from_org: multiple of the fitted benchmark coefficients
  std::uint64_t seed = 0;                 // random: generator seed
  double norm = 1.0;                      // random: L2 norm
  std::map<std::string, double> columns;  // columns: "cue" or "cue=level" -> coefficient
  bool mask_protected = false;            // zero every protected cue's columns
};

struct AgentEntry {
  std::string name;
  std::string kind;  // synthetic | replay | external
  // synthetic
  BetaSpec beta;
  std::optional<double> intercept;  // default: scaled benchmark intercept for from_org, else 0
  double temperature = 1.0;
  std::uint64_t seed = 0;
  double steer_alpha = 0.0;
  bool emit_stated_tiers = false;
  // replay
  std::map<Condition, std::filesystem::path> replay;
  // external
  std::string command;
  int timeout_ms = 30000;
  // Conditions this agent runs; empty means the manifest's list (replay
  // agents default to the conditions they have files for).
  std::vector<Condition> conditions;
};

struct RunManifest {
  std::filesystem::path source;  // manifest file; relative paths resolve against its directory
  std::filesystem::path schema;
  std::filesystem::path dataset;
  std::optional<SyntheticDataSpec> synthetic_data;
  std::optional<SubsampleSpec> subsample;
  std::optional<AgentEntry> benchmark_agent;  // synthetic decisions replacing the dataset's
  FitConfig fit;
  std::vector<double> lambda_grid;  // empty: use fit.lambda
  int folds = 5;
  std::int64_t cv_seed = 0;
  ResampleConfig resample;
  bool bootstrap_ci = false;
  std::vector<AgentEntry> agents;
  std::vector<Condition> conditions{Condition::baseline, Condition::org_ext, Condition::introspective};
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;
  std::optional<double> reference_base_rate;
  nlohmann::ordered_json overrides = nlohmann::ordered_json::object();

  nlohmann::ordered_json to_json() const;
};

/// Reads a manifest; paths are resolved relative to its directory. Sub-seeds
/// that are not given default to the master seed.
RunManifest load_manifest(const std::filesystem::path& path);
RunManifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir);

struct Overrides {
  std::optional<std::uint64_t> seed;  // master and every sub-seed
  std::optional<double> lambda;       // also disables the lambda grid
  std::optional<int> folds;
  std::optional<int> resamples;
  std::optional<std::filesystem::path> out;
};

void apply_overrides(RunManifest& manifest, const Overrides& overrides);

/// One compare-table cell: a finite number or a marker.
using Cell = std::variant<double, std::string>;

inline constexpr std::string_view kExcluded = "excluded";
inline constexpr std::string_view kUndefined = "undefined";
inline constexpr std::string_view kNotApplicable = "NA";

struct CompareRow {
  std::string agent;
  Condition condition = Condition::baseline;
  std::string status;  // ok | warn_extreme | degenerate | no_baseline_policy
  Cell r_cos, acc, auc, good_pct, kappa, pearson_coeff, propensity_corr;
  Cell delta_r_cos, p_value, ci_low, ci_high;
  Cell boot_ci_low, boot_ci_high;
  std::size_t n_cases = 0;
};

struct CorrelationSummary {
  std::optional<double> r;
  std::size_t n = 0;
  std::optional<double> p_value;  // two-sided, t distribution with n - 2 df
};

/// Pearson correlation of the numeric (r_cos, acc) pairs of the rows.
CorrelationSummary alignment_accuracy_correlation(const std::vector<CompareRow>& rows);

/// Lazily computes and caches each stage; commands write their outputs.
class Pipeline {
 public:
  explicit Pipeline(RunManifest manifest);
  ~Pipeline();

  const RunManifest& manifest() const;

  void cmd_subsample();
  void cmd_fit();
  void cmd_externalize();
  void cmd_run_agent();
  void cmd_compare();
  void cmd_audit();
  /// Reads tables/compare.jsonl and tables/cv.json from the output directory.
  void cmd_plot();
  void cmd_report();

  const Dataset& full_dataset();
  const Dataset& working_dataset();
  const DesignMatrix& design();
  const PolicyVector& org_policy();
  const CvResult& org_cv();
  const std::vector<CompareRow>& compare_rows();

  /// Human-readable summary lines written to `out` by the commands.
  void set_console(std::ostream* out);

 private:
  struct State;
  std::unique_ptr<State> state_;
};

/// CLI entry: runs `verb` and returns the process exit status, printing
/// diagnostics to `err`.
int run_command(const std::string& verb, const std::filesystem::path& manifest_path, const Overrides& overrides,
                std::ostream& out, std::ostream& err);

inline const std::vector<std::string> kCommands{"fit",     "subsample", "externalize", "run-agent",
                                                "compare", "audit",     "plot",        "report"};

}  // namespace calm
