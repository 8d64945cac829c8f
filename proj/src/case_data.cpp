#include "calm/case_data.hpp"

#include "calm/errors.hpp"
#include "calm/io.hpp"
#include "calm/log.hpp"
#include "calm/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace calm {

using nlohmann::json;

std::string_view to_string(CueKind kind) {
  switch (kind) {
    case CueKind::binary: return "binary";
    case CueKind::categorical: return "categorical";
    case CueKind::numeric: return "numeric";
  }
  return "numeric";
}

// ---------------------------------------------------------------------------
// Schema

CueSchema::CueSchema(std::vector<CueDef> cues, std::string positive_label, std::string negative_label)
    : cues_(std::move(cues)), positive_label_(std::move(positive_label)), negative_label_(std::move(negative_label)) {
  if (cues_.empty()) throw ValidationError("EmptySchema", "schema must define at least one cue");
  if (positive_label_.empty() || negative_label_.empty() || positive_label_ == negative_label_) {
    throw ValidationError("InvalidLabels", "positive and negative labels must be distinct and non-empty");
  }
  for (std::size_t i = 0; i < cues_.size(); ++i) {
    const CueDef& cue = cues_[i];
    if (cue.name.empty()) throw ValidationError("EmptyCueName", "cue #" + std::to_string(i) + " has an empty name");
    if (cue.name == "decision" || cue.name == "case_id" || cue.name == "propensity") {
      throw ValidationError("ReservedCueName", "cue name '" + cue.name + "' is reserved");
    }
    if (!index_.emplace(cue.name, i).second) {
      throw ValidationError("DuplicateCue", "DuplicateCue(\"" + cue.name + "\")");
    }
    if (cue.kind == CueKind::categorical) {
      if (cue.levels.size() < 2) {
        throw ValidationError("TooFewLevels", "categorical cue '" + cue.name + "' needs at least 2 levels");
      }
      std::set<std::string> seen;
      for (const auto& level : cue.levels) {
        if (level.empty()) throw ValidationError("EmptyLevel", "cue '" + cue.name + "' has an empty level");
        if (!seen.insert(level).second) {
          throw ValidationError("DuplicateLevel", "cue '" + cue.name + "' repeats level '" + level + "'");
        }
      }
    } else if (!cue.levels.empty()) {
      throw ValidationError("UnexpectedLevels", "non-categorical cue '" + cue.name + "' lists levels");
    }
  }
}

std::optional<std::size_t> CueSchema::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const CueDef& CueSchema::cue(std::string_view name) const {
  auto i = find(name);
  if (!i) throw ValidationError("UnknownCue", "unknown cue '" + std::string(name) + "'");
  return cues_[*i];
}

CueSchema CueSchema::with_missing_level(std::string_view cue_name) const {
  std::vector<CueDef> cues = cues_;
  CueDef& cue = cues[*find(cue_name)];
  if (std::find(cue.levels.begin(), cue.levels.end(), kMissingLevel) == cue.levels.end()) {
    cue.levels.emplace_back(kMissingLevel);
  }
  return CueSchema(std::move(cues), positive_label_, negative_label_);
}

bool operator==(const CueSchema& a, const CueSchema& b) {
  if (a.positive_label_ != b.positive_label_ || a.negative_label_ != b.negative_label_) return false;
  if (a.cues_.size() != b.cues_.size()) return false;
  for (std::size_t i = 0; i < a.cues_.size(); ++i) {
    const auto& x = a.cues_[i];
    const auto& y = b.cues_[i];
    if (x.name != y.name || x.kind != y.kind || x.levels != y.levels || x.family != y.family ||
        x.is_protected != y.is_protected) {
      return false;
    }
  }
  return true;
}

namespace {

CueKind parse_kind(const std::string& text, const std::string& cue) {
  if (text == "binary") return CueKind::binary;
  if (text == "categorical") return CueKind::categorical;
  if (text == "numeric") return CueKind::numeric;
  throw ValidationError("UnknownKind", "cue '" + cue + "' has unknown kind '" + text + "'");
}

}  // namespace

CueSchema load_schema(std::istream& in) {
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("MalformedSchema", std::string("schema is not valid JSON: ") + e.what());
  }
  try {
    std::vector<CueDef> cues;
    for (const auto& item : doc.at("cues")) {
      CueDef cue;
      cue.name = item.at("name").get<std::string>();
      cue.kind = parse_kind(item.at("kind").get<std::string>(), cue.name);
      if (item.contains("levels")) cue.levels = item["levels"].get<std::vector<std::string>>();
      if (cue.kind == CueKind::categorical && !item.contains("levels")) {
        throw ValidationError("TooFewLevels", "categorical cue '" + cue.name + "' needs at least 2 levels");
      }
      if (item.contains("family") && !item["family"].is_null()) cue.family = item["family"].get<std::string>();
      cue.is_protected = item.value("protected", false);
      cues.push_back(std::move(cue));
    }
    return CueSchema(std::move(cues), doc.at("positive_label").get<std::string>(),
                     doc.at("negative_label").get<std::string>());
  } catch (const json::exception& e) {
    throw ValidationError("MalformedSchema", std::string("schema field error: ") + e.what());
  }
}

CueSchema load_schema_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("FileNotFound", "cannot open schema '" + path.string() + "'");
  return load_schema(in);
}

void write_schema(std::ostream& out, const CueSchema& schema) {
  json doc;
  doc["positive_label"] = schema.positive_label();
  doc["negative_label"] = schema.negative_label();
  doc["cues"] = json::array();
  for (const auto& cue : schema.cues()) {
    json item{{"name", cue.name}, {"kind", std::string(to_string(cue.kind))}, {"protected", cue.is_protected}};
    if (cue.kind == CueKind::categorical) item["levels"] = cue.levels;
    if (cue.family) item["family"] = *cue.family;
    doc["cues"].push_back(std::move(item));
  }
  out << dump_json(doc);
}

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(std::shared_ptr<const CueSchema> schema, std::vector<CaseRecord> records)
    : schema_(std::move(schema)), records_(std::move(records)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const CaseRecord& r = records_[i];
    if (r.cue_values.size() != schema_->size()) {
      throw ValidationError("CueCountMismatch", "case '" + r.case_id + "' does not carry every schema cue");
    }
    if (r.propensity && !(*r.propensity >= 0.0 && *r.propensity <= 1.0)) {
      throw ValidationError("InvalidPropensity", "case '" + r.case_id + "' has propensity outside [0,1]");
    }
    if (!index_.emplace(r.case_id, i).second) {
      throw ValidationError("DuplicateCaseId", "duplicate case id '" + r.case_id + "'");
    }
  }
}

std::optional<std::size_t> Dataset::index_of(std::string_view case_id) const {
  auto it = index_.find(std::string(case_id));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const CaseRecord& Dataset::at(std::string_view case_id) const {
  auto i = index_of(case_id);
  if (!i) throw ValidationError("UnknownCaseId", "unknown case id '" + std::string(case_id) + "'");
  return records_[*i];
}

std::vector<std::string> Dataset::case_ids() const {
  std::vector<std::string> ids;
  ids.reserve(records_.size());
  for (const auto& r : records_) ids.push_back(r.case_id);
  return ids;
}

std::vector<bool> Dataset::decisions() const {
  std::vector<bool> out;
  out.reserve(records_.size());
  for (const auto& r : records_) out.push_back(r.decision);
  return out;
}

Dataset Dataset::with_decisions(const std::vector<bool>& decisions) const {
  if (decisions.size() != records_.size()) {
    throw ValidationError("DimensionMismatch", "decision count does not match dataset size");
  }
  std::vector<CaseRecord> records = records_;
  for (std::size_t i = 0; i < records.size(); ++i) {
    records[i].decision = decisions[i];
    records[i].propensity.reset();
  }
  return Dataset(schema_, std::move(records));
}

// ---------------------------------------------------------------------------
// Loading

namespace {

std::optional<double> parse_double(std::string_view text) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || !std::isfinite(value)) return std::nullopt;
  return value;
}

bool is_missing_text(std::string_view text) { return text.empty() || text == "NA"; }

std::string describe(const std::string& case_id, const CueDef& cue) {
  return "(" + case_id + ", " + cue.name + ")";
}

// Converts a raw textual value into a validated CueValue. `schema` may be
// replaced by a copy with a missing level added.
CueValue parse_cue_text(const std::string& case_id, std::string_view text, std::size_t cue_index,
                        std::shared_ptr<CueSchema>& schema, const LoadOptions& options) {
  const CueDef& cue = (*schema)[cue_index];
  if (is_missing_text(text)) {
    if (cue.kind == CueKind::categorical && options.missing_as_level) {
      if (std::find(cue.levels.begin(), cue.levels.end(), kMissingLevel) == cue.levels.end()) {
        schema = std::make_shared<CueSchema>(schema->with_missing_level(cue.name));
      }
      return std::string(kMissingLevel);
    }
    throw ValidationError("MissingValue", "MissingValue" + describe(case_id, cue));
  }
  switch (cue.kind) {
    case CueKind::categorical: {
      if (std::find(cue.levels.begin(), cue.levels.end(), text) == cue.levels.end()) {
        throw ValidationError("UnknownLevel", "UnknownLevel" + describe(case_id, cue) + ": level '" +
                                                  std::string(text) + "' is not in the schema");
      }
      return std::string(text);
    }
    case CueKind::binary: {
      auto v = parse_double(text);
      if (!v || (*v != 0.0 && *v != 1.0)) {
        throw ValidationError("InvalidBinary", "InvalidBinary" + describe(case_id, cue) + ": value '" +
                                                   std::string(text) + "' is not 0 or 1");
      }
      return *v;
    }
    case CueKind::numeric: {
      auto v = parse_double(text);
      if (!v) {
        throw ValidationError("InvalidNumber", "InvalidNumber" + describe(case_id, cue) + ": value '" +
                                                   std::string(text) + "' is not a finite number");
      }
      return *v;
    }
  }
  return 0.0;
}

bool parse_decision(const std::string& case_id, std::string_view text, const CueSchema& schema) {
  if (text == schema.positive_label()) return true;
  if (text == schema.negative_label()) return false;
  throw ValidationError("UnknownDecision", "case '" + case_id + "' has unknown decision label '" +
                                               std::string(text) + "'");
}

// RFC 4180 style record splitting: quoted fields may contain delimiters and
// doubled quotes. Embedded newlines are not supported.
std::vector<std::string> split_record(const std::string& line, char delimiter) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delimiter) {
      fields.push_back(std::move(field));
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  fields.push_back(std::move(field));
  return fields;
}

bool getline_trimmed(std::istream& in, std::string& line) {
  if (!std::getline(in, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

Dataset finish(std::shared_ptr<CueSchema> schema, std::vector<CaseRecord> records) {
  if (records.empty()) throw ValidationError("EmptyDataset", "EmptyDataset: no case records");
  return Dataset(std::move(schema), std::move(records));
}

}  // namespace

Dataset load_cases_csv(std::istream& in, const CueSchema& schema_in, const LoadOptions& options) {
  auto schema = std::make_shared<CueSchema>(schema_in);
  std::string line;
  if (!getline_trimmed(in, line)) throw ValidationError("EmptyDataset", "EmptyDataset: no header row");
  const auto header = split_record(line, options.delimiter);

  std::vector<std::optional<std::size_t>> column_cue(header.size());
  std::optional<std::size_t> decision_col, id_col, propensity_col;
  std::vector<bool> covered(schema->size(), false);
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto& name = header[c];
    if (name == "decision") {
      decision_col = c;
    } else if (name == "case_id") {
      id_col = c;
    } else if (name == "propensity") {
      propensity_col = c;
    } else if (auto i = schema->find(name)) {
      if (covered[*i]) throw ValidationError("DuplicateColumn", "column '" + name + "' appears twice");
      covered[*i] = true;
      column_cue[c] = *i;
    } else {
      throw ValidationError("UnknownCue", "column '" + name + "' is not a schema cue");
    }
  }
  if (!decision_col) throw ValidationError("MissingDecisionColumn", "header has no 'decision' column");
  for (std::size_t i = 0; i < covered.size(); ++i) {
    if (!covered[i]) throw ValidationError("MissingCue", "header lacks cue '" + (*schema)[i].name + "'");
  }

  std::vector<CaseRecord> records;
  std::size_t row = 0;
  while (getline_trimmed(in, line)) {
    if (line.empty()) continue;
    ++row;
    const auto fields = split_record(line, options.delimiter);
    if (fields.size() != header.size()) {
      throw ValidationError("RaggedRow", "row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                                             " fields, header has " + std::to_string(header.size()));
    }
    CaseRecord rec;
    rec.case_id = id_col ? fields[*id_col] : std::to_string(row);
    if (rec.case_id.empty()) throw ValidationError("MissingCaseId", "row " + std::to_string(row) + " has no case id");
    rec.cue_values.resize(schema->size());
    for (std::size_t c = 0; c < fields.size(); ++c) {
      if (column_cue[c]) rec.cue_values[*column_cue[c]] = parse_cue_text(rec.case_id, fields[c], *column_cue[c], schema, options);
    }
    rec.decision = parse_decision(rec.case_id, fields[*decision_col], *schema);
    if (propensity_col && !fields[*propensity_col].empty()) {
      auto p = parse_double(fields[*propensity_col]);
      if (!p || *p < 0.0 || *p > 1.0) {
        throw ValidationError("InvalidPropensity", "case '" + rec.case_id + "' has propensity outside [0,1]");
      }
      rec.propensity = *p;
    }
    records.push_back(std::move(rec));
  }
  return finish(std::move(schema), std::move(records));
}

Dataset load_cases_jsonl(std::istream& in, const CueSchema& schema_in, const LoadOptions& options) {
  auto schema = std::make_shared<CueSchema>(schema_in);
  std::vector<CaseRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (getline_trimmed(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError("MalformedRecord", "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!obj.is_object() || !obj.contains("case_id") || !obj.contains("cue_values") || !obj.contains("decision")) {
      throw ValidationError("MalformedRecord", "line " + std::to_string(line_no) +
                                                   ": expected case_id, cue_values and decision");
    }
    CaseRecord rec;
    rec.case_id = obj["case_id"].is_string() ? obj["case_id"].get<std::string>() : obj["case_id"].dump();
    const json& values = obj["cue_values"];
    if (!values.is_object()) throw ValidationError("MalformedRecord", "case '" + rec.case_id + "': cue_values must be an object");
    for (auto it = values.begin(); it != values.end(); ++it) {
      if (!schema->find(it.key())) {
        throw ValidationError("UnknownCue", "case '" + rec.case_id + "' has unknown cue '" + it.key() + "'");
      }
    }
    rec.cue_values.resize(schema->size());
    for (std::size_t i = 0; i < schema->size(); ++i) {
      const std::string name = (*schema)[i].name;
      std::string text;
      if (values.contains(name)) {
        const json& v = values[name];
        if (v.is_null()) {
          text.clear();
        } else if (v.is_string()) {
          text = v.get<std::string>();
        } else if (v.is_boolean()) {
          text = v.get<bool>() ? "1" : "0";
        } else if (v.is_number()) {
          if ((*schema)[i].kind == CueKind::categorical) {
            text = v.dump();
          } else {
            rec.cue_values[i] = v.get<double>();
            continue;
          }
        } else {
          throw ValidationError("MalformedRecord", "case '" + rec.case_id + "': cue '" + name + "' has a non-scalar value");
        }
      }
      rec.cue_values[i] = parse_cue_text(rec.case_id, text, i, schema, options);
    }
    if (!obj["decision"].is_string()) {
      throw ValidationError("UnknownDecision", "case '" + rec.case_id + "' decision must be a label string");
    }
    rec.decision = parse_decision(rec.case_id, obj["decision"].get<std::string>(), *schema);
    if (obj.contains("propensity") && !obj["propensity"].is_null()) {
      const double p = obj["propensity"].get<double>();
      if (!(p >= 0.0 && p <= 1.0)) {
        throw ValidationError("InvalidPropensity", "case '" + rec.case_id + "' has propensity outside [0,1]");
      }
      rec.propensity = p;
    }
    records.push_back(std::move(rec));
  }
  return finish(std::move(schema), std::move(records));
}

Dataset load_cases_file(const std::filesystem::path& path, const CueSchema& schema, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw ValidationError("FileNotFound", "cannot open dataset '" + path.string() + "'");
  const auto ext = path.extension().string();
  if (ext == ".jsonl" || ext == ".ndjson") return load_cases_jsonl(in, schema, options);
  return load_cases_csv(in, schema, options);
}

namespace {

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

std::string value_text(const CueValue& v) {
  if (const auto* d = std::get_if<double>(&v)) return format_exact(*d);
  return std::get<std::string>(v);
}

}  // namespace

void write_cases_csv(std::ostream& out, const Dataset& dataset) {
  const CueSchema& schema = dataset.schema();
  bool any_propensity = std::any_of(dataset.records().begin(), dataset.records().end(),
                                    [](const CaseRecord& r) { return r.propensity.has_value(); });
  out << "case_id";
  for (const auto& cue : schema.cues()) out << ',' << csv_escape(cue.name);
  out << ",decision";
  if (any_propensity) out << ",propensity";
  out << '\n';
  for (const auto& r : dataset.records()) {
    out << csv_escape(r.case_id);
    for (const auto& v : r.cue_values) out << ',' << csv_escape(value_text(v));
    out << ',' << csv_escape(r.decision ? schema.positive_label() : schema.negative_label());
    if (any_propensity) out << ',' << (r.propensity ? format_exact(*r.propensity) : std::string());
    out << '\n';
  }
}

void write_cases_jsonl(std::ostream& out, const Dataset& dataset) {
  const CueSchema& schema = dataset.schema();
  for (const auto& r : dataset.records()) {
    json values = json::object();
    for (std::size_t i = 0; i < schema.size(); ++i) {
      if (const auto* d = std::get_if<double>(&r.cue_values[i])) values[schema[i].name] = *d;
      else values[schema[i].name] = std::get<std::string>(r.cue_values[i]);
    }
    json obj{{"case_id", r.case_id},
             {"cue_values", std::move(values)},
             {"decision", r.decision ? schema.positive_label() : schema.negative_label()}};
    if (r.propensity) obj["propensity"] = *r.propensity;
    out << obj.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Summaries and sampling

double base_rate(const Dataset& dataset) {
  if (dataset.empty()) throw ValidationError("EmptyDataset", "EmptyDataset: base rate of an empty dataset");
  const auto positives = std::count_if(dataset.records().begin(), dataset.records().end(),
                                       [](const CaseRecord& r) { return r.decision; });
  return static_cast<double>(positives) / static_cast<double>(dataset.size());
}

bool case_id_less(std::string_view a, std::string_view b) {
  auto is_integer = [](std::string_view s) {
    return !s.empty() && s.size() < 19 && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
  };
  if (is_integer(a) && is_integer(b)) {
    long long x = 0, y = 0;
    std::from_chars(a.data(), a.data() + a.size(), x);
    std::from_chars(b.data(), b.data() + b.size(), y);
    if (x != y) return x < y;
  }
  return a < b;
}

Dataset balanced_subsample(const Dataset& dataset, std::size_t n_per_class, std::int64_t seed) {
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset[i].decision ? 1 : 0].push_back(i);

  std::vector<std::size_t> chosen;
  chosen.reserve(2 * n_per_class);
  // Positive class first, then negative; each with its own stream.
  for (int cls : {1, 0}) {
    auto& pool = by_class[cls];
    if (pool.size() < n_per_class) {
      throw ValidationError("ClassTooSmall", "class '" +
                                                 (cls ? dataset.schema().positive_label() : dataset.schema().negative_label()) +
                                                 "' has " + std::to_string(pool.size()) + " records, " +
                                                 std::to_string(n_per_class) + " requested");
    }
    Rng rng(derive_seed(static_cast<std::uint64_t>(seed), static_cast<std::uint64_t>(cls)));
    // Partial Fisher-Yates: the first n_per_class slots are the sample.
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_per_class));
  }
  std::sort(chosen.begin(), chosen.end(),
            [&](std::size_t a, std::size_t b) { return case_id_less(dataset[a].case_id, dataset[b].case_id); });
  std::vector<CaseRecord> records;
  records.reserve(chosen.size());
  for (auto i : chosen) records.push_back(dataset[i]);
  if (records.empty()) throw ValidationError("EmptyDataset", "EmptyDataset: n_per_class must be positive");
  return Dataset(dataset.schema_ptr(), std::move(records));
}

// ---------------------------------------------------------------------------
// Encoding

EncodingMap::EncodingMap(std::vector<EncodedColumn> columns) : columns_(std::move(columns)) {
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    if (columns_[i].dropped) continue;
    if (!(columns_[i].std > 0.0) || !std::isfinite(columns_[i].std) || !std::isfinite(columns_[i].mean)) {
      throw ValidationError("InvalidEncoding", "retained column '" + column_key(columns_[i]) + "' needs finite std > 0");
    }
    retained_.push_back(i);
  }
}

std::vector<std::string> EncodingMap::cue_names() const {
  std::vector<std::string> names;
  for (const auto& c : columns_) {
    if (names.empty() || names.back() != c.cue) names.push_back(c.cue);
  }
  return names;
}

std::string EncodingMap::column_key(const EncodedColumn& column) {
  return column.level == "numeric" ? column.cue : column.cue + "=" + column.level;
}

std::string EncodingMap::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    h ^= 0x1f;
    h *= 0x100000001b3ULL;
  };
  for (const auto& c : columns_) {
    feed(c.cue);
    feed(c.level);
    feed(format_exact(c.mean));
    feed(format_exact(c.std));
    feed(c.dropped ? "1" : "0");
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

std::vector<EncodedColumn> schema_columns(const CueSchema& schema) {
  std::vector<EncodedColumn> cols;
  for (const auto& cue : schema.cues()) {
    if (cue.kind == CueKind::categorical) {
      for (const auto& level : cue.levels) cols.push_back({cue.name, level});
    } else {
      cols.push_back({cue.name, "numeric"});
    }
  }
  return cols;
}

Eigen::MatrixXd raw_design(const Dataset& dataset, const CueSchema& schema) {
  const auto n = static_cast<Eigen::Index>(dataset.size());
  const auto skeleton = schema_columns(schema);
  Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(skeleton.size()));

  // Column offset of each cue, plus dataset cue index for each schema cue.
  std::vector<Eigen::Index> offset(schema.size());
  std::vector<std::size_t> source(schema.size());
  Eigen::Index col = 0;
  for (std::size_t c = 0; c < schema.size(); ++c) {
    offset[c] = col;
    const CueDef& cue = schema[c];
    col += cue.kind == CueKind::categorical ? static_cast<Eigen::Index>(cue.levels.size()) : 1;
    auto src = dataset.schema().find(cue.name);
    if (!src) throw ValidationError("SchemaMismatch", "dataset lacks cue '" + cue.name + "'");
    source[c] = *src;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const CaseRecord& rec = dataset[static_cast<std::size_t>(i)];
    for (std::size_t c = 0; c < schema.size(); ++c) {
      const CueDef& cue = schema[c];
      const CueValue& v = rec.cue_values[source[c]];
      if (cue.kind == CueKind::categorical) {
        const auto* level = std::get_if<std::string>(&v);
        if (!level) throw ValidationError("SchemaMismatch", "case '" + rec.case_id + "' has a number for categorical cue '" + cue.name + "'");
        auto it = std::find(cue.levels.begin(), cue.levels.end(), *level);
        if (it == cue.levels.end()) {
          throw ValidationError("UnknownLevel", "UnknownLevel(" + rec.case_id + ", " + cue.name + ")");
        }
        raw(i, offset[c] + (it - cue.levels.begin())) = 1.0;
      } else {
        const auto* d = std::get_if<double>(&v);
        if (!d) throw ValidationError("SchemaMismatch", "case '" + rec.case_id + "' has text for numeric cue '" + cue.name + "'");
        raw(i, offset[c]) = *d;
      }
    }
  }
  return raw;
}

EncodingMap fit_standardization(const Eigen::MatrixXd& raw, const std::vector<EncodedColumn>& skeleton,
                                const std::vector<Eigen::Index>& rows) {
  std::vector<EncodedColumn> cols = skeleton;
  const Eigen::Index n = rows.empty() ? raw.rows() : static_cast<Eigen::Index>(rows.size());
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    auto value = [&](Eigen::Index k) { return rows.empty() ? raw(k, j) : raw(rows[static_cast<std::size_t>(k)], j); };
    double mean = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) mean += value(k);
    mean /= static_cast<double>(std::max<Eigen::Index>(n, 1));
    double ss = 0.0;
    double max_dev = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      const double d = value(k) - mean;
      ss += d * d;
      max_dev = std::max(max_dev, std::abs(d));
    }
    auto& c = cols[static_cast<std::size_t>(j)];
    c.mean = mean;
    c.std = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
    // Rounding in the mean can leave a constant column with a tiny spread.
    c.dropped = !(c.std > 0.0) || max_dev <= 1e-12 * std::max(1.0, std::abs(mean));
    if (c.dropped) c.std = 0.0;
  }
  return EncodingMap(std::move(cols));
}

Eigen::MatrixXd apply_standardization(const Eigen::MatrixXd& raw, const EncodingMap& encoding) {
  if (static_cast<std::size_t>(raw.cols()) != encoding.columns().size()) {
    throw ValidationError("EncodingMismatch", "raw matrix width does not match the encoding");
  }
  Eigen::MatrixXd z(raw.rows(), static_cast<Eigen::Index>(encoding.retained_count()));
  for (std::size_t j = 0; j < encoding.retained_count(); ++j) {
    const auto src = static_cast<Eigen::Index>(encoding.retained()[j]);
    const auto& c = encoding.columns()[encoding.retained()[j]];
    z.col(static_cast<Eigen::Index>(j)) = (raw.col(src).array() - c.mean) / c.std;
  }
  return z;
}

namespace {

DesignMatrix assemble(const Dataset& dataset, const Eigen::MatrixXd& raw, std::shared_ptr<const EncodingMap> encoding) {
  DesignMatrix dm;
  dm.rows = apply_standardization(raw, *encoding);
  dm.labels.resize(static_cast<Eigen::Index>(dataset.size()));
  for (std::size_t i = 0; i < dataset.size(); ++i) dm.labels(static_cast<Eigen::Index>(i)) = dataset[i].decision ? 1.0 : 0.0;
  dm.case_ids = dataset.case_ids();
  dm.encoding = std::move(encoding);
  return dm;
}

}  // namespace

DesignMatrix encode(const Dataset& dataset, const CueSchema& schema) {
  const Eigen::MatrixXd raw = raw_design(dataset, schema);
  auto encoding = std::make_shared<const EncodingMap>(fit_standardization(raw, schema_columns(schema)));
  std::vector<std::string> warnings;
  for (const auto& c : encoding->columns()) {
    if (c.dropped) {
      warnings.push_back("zero-variance column '" + EncodingMap::column_key(c) + "' dropped");
      logger().warn("{}", warnings.back());
    }
  }
  DesignMatrix dm = assemble(dataset, raw, std::move(encoding));
  dm.warnings = std::move(warnings);
  return dm;
}

DesignMatrix encode(const Dataset& dataset) { return encode(dataset, dataset.schema()); }

DesignMatrix apply_encoding(const Dataset& dataset, const CueSchema& schema, std::shared_ptr<const EncodingMap> encoding) {
  const Eigen::MatrixXd raw = raw_design(dataset, schema);
  const auto skeleton = schema_columns(schema);
  if (skeleton.size() != encoding->columns().size()) {
    throw ValidationError("EncodingMismatch", "schema does not match the frozen encoding");
  }
  for (std::size_t j = 0; j < skeleton.size(); ++j) {
    if (skeleton[j].cue != encoding->columns()[j].cue || skeleton[j].level != encoding->columns()[j].level) {
      throw ValidationError("EncodingMismatch", "schema column '" + EncodingMap::column_key(skeleton[j]) +
                                                    "' does not match the frozen encoding");
    }
  }
  return assemble(dataset, raw, std::move(encoding));
}

}  // namespace calm
