#pragma once

// Cue schema, decision datasets, and the standardized one-hot design matrix.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace calm {

enum class CueKind { binary, categorical, numeric };

std::string_view to_string(CueKind kind);

struct CueDef {
  std::string name;
  CueKind kind = CueKind::numeric;
  std::vector<std::string> levels;  // categorical only
  std::optional<std::string> family;
  bool is_protected = false;
};

/// Level name given to missing categorical values when the loader is asked
/// to keep them instead of rejecting the row.
inline constexpr std::string_view kMissingLevel = "__missing__";

class CueSchema {
 public:
  /// Validates: at least one cue, unique non-empty names, categorical cues
  /// with >= 2 unique levels, distinct non-empty decision labels.
  CueSchema(std::vector<CueDef> cues, std::string positive_label, std::string negative_label);

  const std::vector<CueDef>& cues() const noexcept { return cues_; }
  std::size_t size() const noexcept { return cues_.size(); }
  const CueDef& operator[](std::size_t i) const { return cues_[i]; }

  std::optional<std::size_t> find(std::string_view name) const;
  const CueDef& cue(std::string_view name) const;

  const std::string& positive_label() const noexcept { return positive_label_; }
  const std::string& negative_label() const noexcept { return negative_label_; }

  /// Copy with kMissingLevel appended to the named categorical cue.
  CueSchema with_missing_level(std::string_view cue_name) const;

  friend bool operator==(const CueSchema& a, const CueSchema& b);

 private:
  std::vector<CueDef> cues_;
  std::string positive_label_;
  std::string negative_label_;
  std::unordered_map<std::string, std::size_t> index_;
};

CueSchema load_schema(std::istream& in);
CueSchema load_schema_file(const std::filesystem::path& path);
void write_schema(std::ostream& out, const CueSchema& schema);

/// Numeric value (numeric and binary cues) or level text (categorical cues).
using CueValue = std::variant<double, std::string>;

struct CaseRecord {
  std::string case_id;
  std::vector<CueValue> cue_values;  // aligned with schema cue order
  bool decision = false;             // true = positive label
  std::optional<double> propensity;
};

/// Ordered, id-keyed collection of validated records. Iteration order is
/// load order.
class Dataset {
 public:
  Dataset(std::shared_ptr<const CueSchema> schema, std::vector<CaseRecord> records);

  const CueSchema& schema() const noexcept { return *schema_; }
  const std::shared_ptr<const CueSchema>& schema_ptr() const noexcept { return schema_; }

  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  const std::vector<CaseRecord>& records() const noexcept { return records_; }
  const CaseRecord& operator[](std::size_t i) const { return records_[i]; }

  std::optional<std::size_t> index_of(std::string_view case_id) const;
  const CaseRecord& at(std::string_view case_id) const;

  std::vector<std::string> case_ids() const;
  std::vector<bool> decisions() const;

  /// Same cases and cue values with the decisions replaced, in this
  /// dataset's order. `decisions[i]` belongs to record i.
  Dataset with_decisions(const std::vector<bool>& decisions) const;

 private:
  std::shared_ptr<const CueSchema> schema_;
  std::vector<CaseRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct LoadOptions {
  /// Map missing categorical values to kMissingLevel instead of rejecting.
  bool missing_as_level = false;
  char delimiter = ',';
};

/// Delimited table: header row with every cue name plus "decision"; an
/// optional "case_id" column (otherwise 1-based row numbers are used) and an
/// optional "propensity" column.
Dataset load_cases_csv(std::istream& in, const CueSchema& schema, const LoadOptions& options = {});

/// One JSON object per line: {"case_id", "cue_values": {...}, "decision",
/// optional "propensity"}.
Dataset load_cases_jsonl(std::istream& in, const CueSchema& schema, const LoadOptions& options = {});

/// Dispatches on extension: .jsonl/.ndjson are line records, anything else
/// is a delimited table.
Dataset load_cases_file(const std::filesystem::path& path, const CueSchema& schema,
                        const LoadOptions& options = {});

void write_cases_csv(std::ostream& out, const Dataset& dataset);
void write_cases_jsonl(std::ostream& out, const Dataset& dataset);

double base_rate(const Dataset& dataset);

/// Exactly n_per_class records of each class, drawn without replacement by a
/// per-class Fisher-Yates shuffle seeded from `seed`. Output is sorted by
/// case id (numeric ids compare numerically).
Dataset balanced_subsample(const Dataset& dataset, std::size_t n_per_class, std::int64_t seed);

/// Natural case-id ordering used wherever output is "sorted by case id".
bool case_id_less(std::string_view a, std::string_view b);

struct EncodedColumn {
  std::string cue;
  std::string level;  // categorical level, or "numeric" for numeric/binary cues
  double mean = 0.0;
  double std = 1.0;
  bool dropped = false;

  friend bool operator==(const EncodedColumn&, const EncodedColumn&) = default;
};

class EncodingMap {
 public:
  explicit EncodingMap(std::vector<EncodedColumn> columns);

  const std::vector<EncodedColumn>& columns() const noexcept { return columns_; }
  /// Indices (into columns()) of the non-dropped columns, in order.
  const std::vector<std::size_t>& retained() const noexcept { return retained_; }
  std::size_t retained_count() const noexcept { return retained_.size(); }
  const EncodedColumn& retained_column(std::size_t j) const { return columns_[retained_[j]]; }

  /// Cue names in column order, each listed once.
  std::vector<std::string> cue_names() const;

  /// "cue" for numeric columns, "cue=level" for one-hot columns.
  static std::string column_key(const EncodedColumn& column);

  /// FNV-1a over the canonical text form of the columns.
  std::string fingerprint() const;

  friend bool operator==(const EncodingMap& a, const EncodingMap& b) { return a.columns_ == b.columns_; }

 private:
  std::vector<EncodedColumn> columns_;
  std::vector<std::size_t> retained_;
};

struct DesignMatrix {
  Eigen::MatrixXd rows;    // n_cases x retained columns, z-scored
  Eigen::VectorXd labels;  // 1 = positive label
  std::shared_ptr<const EncodingMap> encoding;
  std::vector<std::string> case_ids;
  std::vector<std::string> warnings;

  Eigen::Index n_cases() const { return rows.rows(); }
  Eigen::Index n_columns() const { return rows.cols(); }
};

/// Column skeleton for a schema (statistics unset): one column per
/// categorical level, one per numeric or binary cue.
std::vector<EncodedColumn> schema_columns(const CueSchema& schema);

/// Unstandardized one-hot matrix, one column per schema_columns() entry.
Eigen::MatrixXd raw_design(const Dataset& dataset, const CueSchema& schema);

/// Z-score statistics of `raw` over the given rows (all rows when empty).
/// Columns with zero variance are marked dropped. Uses the n-1 denominator.
EncodingMap fit_standardization(const Eigen::MatrixXd& raw, const std::vector<EncodedColumn>& skeleton,
                                const std::vector<Eigen::Index>& rows = {});

/// Retained columns of `raw` standardized with the frozen statistics.
Eigen::MatrixXd apply_standardization(const Eigen::MatrixXd& raw, const EncodingMap& encoding);

/// Encode and standardize over this dataset.
DesignMatrix encode(const Dataset& dataset, const CueSchema& schema);
DesignMatrix encode(const Dataset& dataset);

/// Encode held-out cases with statistics frozen from a fitting set.
DesignMatrix apply_encoding(const Dataset& dataset, const CueSchema& schema,
                            std::shared_ptr<const EncodingMap> encoding);

}  // namespace calm
