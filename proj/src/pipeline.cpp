#include "calm/pipeline.hpp"

#include "calm/errors.hpp"
#include "calm/io.hpp"
#include "calm/log.hpp"
#include "calm/rng.hpp"
#include "calm/svg_plot.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/ostream_sink.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace calm {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------- manifest

namespace {

[[noreturn]] void manifest_error(const std::string& message) { throw ValidationError("InvalidManifest", message); }

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) manifest_error(where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) manifest_error("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback, const std::string& where) {
  if (!obj.contains(key) || obj[key].is_null()) return fallback;
  try {
    return obj[key].get<T>();
  } catch (const json::exception&) {
    manifest_error("'" + key + "' in " + where + " has the wrong type");
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal();
}

std::vector<Condition> parse_conditions(const json& arr, const std::string& where) {
  if (!arr.is_array()) manifest_error(where + " must be a list");
  std::vector<Condition> out;
  for (const auto& c : arr) {
    if (!c.is_string()) manifest_error(where + " entries must be condition names");
    const Condition cond = parse_condition(c.get<std::string>());
    if (std::find(out.begin(), out.end(), cond) != out.end()) manifest_error("duplicate condition in " + where);
    out.push_back(cond);
  }
  return out;
}

AgentEntry parse_agent(const json& a, const fs::path& base, std::uint64_t master, const std::string& where) {
  check_keys(a,
             {"name", "kind", "beta", "intercept", "temperature", "seed", "steer_alpha", "emit_stated_tiers", "decisions",
              "command", "timeout_ms", "conditions"},
             where);
  AgentEntry e;
  e.name = get_or<std::string>(a, "name", "", where);
  if (e.name.empty()) manifest_error(where + " needs a name");
  if (e.name.find_first_of("/\\ ") != std::string::npos) manifest_error("agent name '" + e.name + "' must not contain separators");
  e.kind = get_or<std::string>(a, "kind", "synthetic", where);
  if (a.contains("conditions")) e.conditions = parse_conditions(a["conditions"], where + ".conditions");
  if (e.kind == "synthetic") {
    e.temperature = get_or<double>(a, "temperature", 1.0, where);
    e.seed = get_or<std::uint64_t>(a, "seed", master, where);
    e.steer_alpha = get_or<double>(a, "steer_alpha", 0.0, where);
    e.emit_stated_tiers = get_or<bool>(a, "emit_stated_tiers", false, where);
    if (a.contains("intercept")) e.intercept = get_or<double>(a, "intercept", 0.0, where);
    const json beta = a.value("beta", json::object());
    check_keys(beta, {"from_org", "random", "columns", "mask_protected"}, where + ".beta");
    const int given = static_cast<int>(beta.contains("from_org")) + static_cast<int>(beta.contains("random")) +
                      static_cast<int>(beta.contains("columns"));
    if (given > 1) manifest_error(where + ".beta takes one of from_org, random, columns");
    e.beta.mask_protected = get_or<bool>(beta, "mask_protected", false, where + ".beta");
    if (beta.contains("random")) {
      const json& r = beta["random"];
      check_keys(r, {"seed", "norm"}, where + ".beta.random");
      e.beta.kind = BetaSpec::Kind::random;
      e.beta.seed = get_or<std::uint64_t>(r, "seed", master, where + ".beta.random");
      e.beta.norm = get_or<double>(r, "norm", 1.0, where + ".beta.random");
    } else if (beta.contains("columns")) {
      e.beta.kind = BetaSpec::Kind::columns;
      if (!beta["columns"].is_object()) manifest_error(where + ".beta.columns must be an object");
      for (const auto& [k, v] : beta["columns"].items()) {
        if (!v.is_number()) manifest_error(where + ".beta.columns values must be numbers");
        e.beta.columns[k] = v.get<double>();
      }
    } else {
      e.beta.kind = BetaSpec::Kind::from_org;
      e.beta.scale = get_or<double>(beta, "from_org", 1.0, where + ".beta");
    }
  } else if (e.kind == "replay") {
    if (!a.contains("decisions") || !a["decisions"].is_object()) manifest_error(where + " needs a decisions object");
    for (const auto& [cond, path] : a["decisions"].items()) {
      if (!path.is_string()) manifest_error(where + ".decisions values must be paths");
      e.replay[parse_condition(cond)] = resolve(base, path.get<std::string>());
    }
    if (e.conditions.empty()) {
      for (const auto& [cond, path] : e.replay) e.conditions.push_back(cond);
    }
  } else if (e.kind == "external") {
    e.command = get_or<std::string>(a, "command", "", where);
    if (e.command.empty()) manifest_error(where + " needs a command");
    e.timeout_ms = get_or<int>(a, "timeout_ms", 30000, where);
    if (e.timeout_ms <= 0) manifest_error(where + ".timeout_ms must be positive");
  } else {
    manifest_error("unknown agent kind '" + e.kind + "' in " + where);
  }
  return e;
}

ojson agent_to_json(const AgentEntry& e) {
  ojson j;
  j["name"] = e.name;
  j["kind"] = e.kind;
  if (e.kind == "synthetic") {
    ojson beta;
    switch (e.beta.kind) {
      case BetaSpec::Kind::from_org: beta["from_org"] = e.beta.scale; break;
      case BetaSpec::Kind::random: beta["random"] = {{"seed", e.beta.seed}, {"norm", e.beta.norm}}; break;
      case BetaSpec::Kind::columns: beta["columns"] = e.beta.columns; break;
    }
    beta["mask_protected"] = e.beta.mask_protected;
    j["beta"] = beta;
    if (e.intercept) j["intercept"] = *e.intercept;
    j["temperature"] = e.temperature;
    j["seed"] = e.seed;
    j["steer_alpha"] = e.steer_alpha;
    j["emit_stated_tiers"] = e.emit_stated_tiers;
  } else if (e.kind == "replay") {
    ojson d = ojson::object();
    for (const auto& [cond, path] : e.replay) d[std::string(to_string(cond))] = path.generic_string();
    j["decisions"] = d;
  } else {
    j["command"] = e.command;
    j["timeout_ms"] = e.timeout_ms;
  }
  if (!e.conditions.empty()) {
    j["conditions"] = ojson::array();
    for (auto c : e.conditions) j["conditions"].push_back(std::string(to_string(c)));
  }
  return j;
}

}  // namespace

RunManifest parse_manifest(const json& doc, const fs::path& base_dir) {
  check_keys(doc,
             {"schema", "dataset", "synthetic_data", "subsample", "benchmark_agent", "fit", "cv", "resample", "agents",
              "conditions", "output_dir", "seed", "reference_base_rate", "description"},
             "manifest");
  RunManifest m;
  m.seed = get_or<std::uint64_t>(doc, "seed", 0, "manifest");
  const auto master_signed = static_cast<std::int64_t>(m.seed);

  if (doc.contains("synthetic_data")) {
    const json& s = doc["synthetic_data"];
    check_keys(s, {"n_cases", "n_cues", "seed", "protected"}, "synthetic_data");
    SyntheticDataSpec spec;
    spec.n_cases = get_or<std::size_t>(s, "n_cases", 600, "synthetic_data");
    spec.n_cues = get_or<int>(s, "n_cues", 8, "synthetic_data");
    spec.seed = get_or<std::uint64_t>(s, "seed", m.seed, "synthetic_data");
    spec.protected_cues = get_or<std::vector<std::string>>(s, "protected", {}, "synthetic_data");
    if (spec.n_cases < 10 || spec.n_cues < 1 || spec.n_cues > 99) manifest_error("synthetic_data sizes out of range");
    m.synthetic_data = spec;
    if (doc.contains("schema") || doc.contains("dataset")) manifest_error("synthetic_data replaces schema and dataset");
  } else {
    if (!doc.contains("schema") || !doc.contains("dataset")) manifest_error("manifest needs schema and dataset paths");
    m.schema = resolve(base_dir, get_or<std::string>(doc, "schema", "", "manifest"));
    m.dataset = resolve(base_dir, get_or<std::string>(doc, "dataset", "", "manifest"));
  }
  if (doc.contains("subsample") && !doc["subsample"].is_null()) {
    const json& s = doc["subsample"];
    check_keys(s, {"n_per_class", "seed"}, "subsample");
    SubsampleSpec spec;
    spec.n_per_class = get_or<std::size_t>(s, "n_per_class", 0, "subsample");
    spec.seed = get_or<std::int64_t>(s, "seed", master_signed, "subsample");
    if (spec.n_per_class == 0) manifest_error("subsample.n_per_class must be positive");
    m.subsample = spec;
  }
  if (doc.contains("benchmark_agent")) {
    m.benchmark_agent = parse_agent(doc["benchmark_agent"], base_dir, m.seed, "benchmark_agent");
    if (m.benchmark_agent->kind != "synthetic" || m.benchmark_agent->beta.kind == BetaSpec::Kind::from_org) {
      manifest_error("benchmark_agent must be synthetic with random or columns coefficients");
    }
  } else if (m.synthetic_data) {
    manifest_error("synthetic_data needs a benchmark_agent to make the benchmark decisions");
  }
  if (doc.contains("fit")) {
    const json& f = doc["fit"];
    check_keys(f, {"lambda", "lambda_grid", "max_iterations", "gradient_tolerance", "penalize_intercept"}, "fit");
    m.fit.lambda = get_or<double>(f, "lambda", 1.0, "fit");
    m.fit.max_iterations = get_or<int>(f, "max_iterations", 100, "fit");
    m.fit.gradient_tolerance = get_or<double>(f, "gradient_tolerance", 1e-8, "fit");
    m.fit.penalize_intercept = get_or<bool>(f, "penalize_intercept", false, "fit");
    m.lambda_grid = get_or<std::vector<double>>(f, "lambda_grid", {}, "fit");
  }
  m.fit.validate();
  m.cv_seed = master_signed;
  if (doc.contains("cv")) {
    const json& c = doc["cv"];
    check_keys(c, {"folds", "seed"}, "cv");
    m.folds = get_or<int>(c, "folds", 5, "cv");
    m.cv_seed = get_or<std::int64_t>(c, "seed", master_signed, "cv");
  }
  m.resample.seed = m.seed;
  if (doc.contains("resample")) {
    const json& r = doc["resample"];
    check_keys(r, {"n_resamples", "seed", "confidence", "side", "threads", "bootstrap_ci"}, "resample");
    m.resample.n_resamples = get_or<int>(r, "n_resamples", 1000, "resample");
    m.resample.seed = get_or<std::uint64_t>(r, "seed", m.seed, "resample");
    m.resample.confidence = get_or<double>(r, "confidence", 0.95, "resample");
    m.resample.side = parse_side(get_or<std::string>(r, "side", "greater", "resample"));
    m.resample.threads = get_or<int>(r, "threads", 1, "resample");
    m.bootstrap_ci = get_or<bool>(r, "bootstrap_ci", false, "resample");
  }
  m.resample.validate();
  if (doc.contains("conditions")) m.conditions = parse_conditions(doc["conditions"], "conditions");
  if (std::find(m.conditions.begin(), m.conditions.end(), Condition::baseline) == m.conditions.end()) {
    m.conditions.insert(m.conditions.begin(), Condition::baseline);
  }
  if (doc.contains("agents")) {
    if (!doc["agents"].is_array()) manifest_error("agents must be a list");
    std::set<std::string> names;
    for (std::size_t i = 0; i < doc["agents"].size(); ++i) {
      AgentEntry e = parse_agent(doc["agents"][i], base_dir, m.seed, "agents[" + std::to_string(i) + "]");
      if (e.name == "org" || !names.insert(e.name).second) manifest_error("agent name '" + e.name + "' is reserved or repeated");
      m.agents.push_back(std::move(e));
    }
  }
  if (doc.contains("output_dir")) {
    m.output_dir = resolve(base_dir, get_or<std::string>(doc, "output_dir", "", "manifest"));
  } else {
    m.output_dir = (base_dir / "runs" / "default").lexically_normal();
  }
  if (doc.contains("reference_base_rate")) {
    const double r = get_or<double>(doc, "reference_base_rate", 0.0, "manifest");
    if (!(r >= 0.0 && r <= 1.0)) manifest_error("reference_base_rate must lie in [0, 1]");
    m.reference_base_rate = r;
  }
  return m;
}

RunManifest load_manifest(const fs::path& path) {
  const std::string text = read_file(path);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError("InvalidJson", "manifest '" + path.string() + "': " + e.what());
  }
  RunManifest m = parse_manifest(doc, path.parent_path().empty() ? fs::path(".") : path.parent_path());
  m.source = path;
  return m;
}

ojson RunManifest::to_json() const {
  ojson j;
  j["seed"] = seed;
  if (synthetic_data) {
    j["synthetic_data"] = {{"n_cases", synthetic_data->n_cases},
                           {"n_cues", synthetic_data->n_cues},
                           {"seed", synthetic_data->seed},
                           {"protected", synthetic_data->protected_cues}};
  } else {
    j["schema"] = schema.generic_string();
    j["dataset"] = dataset.generic_string();
  }
  if (subsample) j["subsample"] = {{"n_per_class", subsample->n_per_class}, {"seed", subsample->seed}};
  if (benchmark_agent) j["benchmark_agent"] = agent_to_json(*benchmark_agent);
  j["fit"] = {{"lambda", fit.lambda},
              {"lambda_grid", lambda_grid},
              {"max_iterations", fit.max_iterations},
              {"gradient_tolerance", fit.gradient_tolerance},
              {"penalize_intercept", fit.penalize_intercept}};
  j["cv"] = {{"folds", folds}, {"seed", cv_seed}};
  j["resample"] = {{"n_resamples", resample.n_resamples},
                   {"seed", resample.seed},
                   {"confidence", resample.confidence},
                   {"side", std::string(to_string(resample.side))},
                   {"threads", resample.threads},
                   {"bootstrap_ci", bootstrap_ci}};
  j["conditions"] = ojson::array();
  for (auto c : conditions) j["conditions"].push_back(std::string(to_string(c)));
  j["agents"] = ojson::array();
  for (const auto& a : agents) j["agents"].push_back(agent_to_json(a));
  if (reference_base_rate) j["reference_base_rate"] = *reference_base_rate;
  return j;
}

void apply_overrides(RunManifest& m, const Overrides& o) {
  if (o.seed) {
    m.seed = *o.seed;
    const auto s = static_cast<std::int64_t>(*o.seed);
    if (m.subsample) m.subsample->seed = s;
    m.cv_seed = s;
    m.resample.seed = *o.seed;
    m.overrides["seed"] = *o.seed;
  }
  if (o.lambda) {
    m.fit.lambda = *o.lambda;
    m.lambda_grid.clear();
    m.fit.validate();
    m.overrides["lambda"] = *o.lambda;
  }
  if (o.folds) {
    m.folds = *o.folds;
    m.overrides["folds"] = *o.folds;
  }
  if (o.resamples) {
    m.resample.n_resamples = *o.resamples;
    m.resample.validate();
    m.overrides["resamples"] = *o.resamples;
  }
  if (o.out) {
    m.output_dir = *o.out;
    m.overrides["out"] = o.out->generic_string();
  }
}

// ------------------------------------------------------------ correlation

CorrelationSummary alignment_accuracy_correlation(const std::vector<CompareRow>& rows) {
  std::vector<double> xs, ys;
  for (const auto& r : rows) {
    if (std::holds_alternative<double>(r.r_cos) && std::holds_alternative<double>(r.acc)) {
      xs.push_back(std::get<double>(r.r_cos));
      ys.push_back(std::get<double>(r.acc));
    }
  }
  CorrelationSummary s;
  s.n = xs.size();
  if (s.n < 3) return s;
  try {
    const double r = pearson(Eigen::Map<const Eigen::VectorXd>(xs.data(), static_cast<Eigen::Index>(xs.size())),
                             Eigen::Map<const Eigen::VectorXd>(ys.data(), static_cast<Eigen::Index>(ys.size())));
    s.r = r;
    const double df = static_cast<double>(s.n) - 2.0;
    if (std::abs(r) >= 1.0) {
      s.p_value = 0.0;
    } else {
      const double t = r * std::sqrt(df / (1.0 - r * r));
      boost::math::students_t dist(df);
      s.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    }
  } catch (const NumericalError&) {
    // A constant column leaves the correlation undefined.
  }
  return s;
}

// ---------------------------------------------------------------- pipeline

namespace {

struct AgentRuns {
  std::map<Condition, DecisionSet> decisions;
  std::optional<PolicyVector> baseline_policy;  // for introspective guidance
  std::optional<GuidanceArtifact> introspective;
  bool introspective_unavailable = false;
};

std::string cell_text(const Cell& c) {
  return std::holds_alternative<double>(c) ? format_real(std::get<double>(c)) : std::get<std::string>(c);
}

ojson cell_json(const Cell& c) {
  return std::holds_alternative<double>(c) ? ojson(std::get<double>(c)) : ojson(std::get<std::string>(c));
}

Cell marker(std::string_view m) { return Cell(std::string(m)); }

std::string stamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

struct Pipeline::State {
  RunManifest m;
  std::ostream* console = nullptr;

  std::shared_ptr<const CueSchema> schema;
  std::optional<Dataset> full;
  std::optional<Dataset> working;
  std::optional<DesignMatrix> design;
  std::optional<Eigen::VectorXd> benchmark_truth;
  std::optional<LambdaSelection> lambda_selection;
  FitConfig fit_config;
  std::optional<PolicyVector> org;
  std::optional<CvResult> cv;
  std::optional<GuidanceArtifact> org_guidance;
  std::map<std::string, AgentRuns> runs;
  std::optional<std::vector<CompareRow>> rows;
  std::vector<std::pair<PolicyKey, PolicyVector>> policies;
  std::vector<ojson> significance;
  std::vector<std::string> written;

  explicit State(RunManifest manifest) : m(std::move(manifest)), fit_config(m.fit) {}

  void say(const std::string& line) {
    if (console) *console << line << '\n';
  }

  void write(const fs::path& rel, std::string_view contents) {
    write_file_atomic(m.output_dir / rel, contents);
    written.push_back(rel.generic_string());
  }

  // ---- data

  void load_full() {
    if (full) return;
    if (m.synthetic_data) {
      const auto& s = *m.synthetic_data;
      std::vector<CueDef> cues;
      for (int j = 1; j <= s.n_cues; ++j) {
        CueDef c;
        c.name = fmt::format("x{:02d}", j);
        c.kind = CueKind::numeric;
        c.is_protected = std::find(s.protected_cues.begin(), s.protected_cues.end(), c.name) != s.protected_cues.end();
        cues.push_back(std::move(c));
      }
      for (const auto& p : s.protected_cues) {
        if (std::none_of(cues.begin(), cues.end(), [&](const CueDef& c) { return c.name == p; })) {
          manifest_error("synthetic_data.protected names unknown cue '" + p + "'");
        }
      }
      schema = std::make_shared<const CueSchema>(std::move(cues), "Good", "Bad");
      Rng rng(s.seed);
      std::vector<CaseRecord> records;
      for (std::size_t i = 0; i < s.n_cases; ++i) {
        CaseRecord r;
        r.case_id = std::to_string(i + 1);
        for (int j = 0; j < s.n_cues; ++j) r.cue_values.emplace_back(rng.normal());
        records.push_back(std::move(r));
      }
      full.emplace(schema, std::move(records));
    } else {
      schema = std::make_shared<const CueSchema>(load_schema_file(m.schema));
      full.emplace(load_cases_file(m.dataset, *schema));
    }
  }

  void load_working() {
    if (working) return;
    load_full();
    if (m.benchmark_agent && !benchmark_truth) {
      // Synthetic benchmark decisions replace the dataset's on every case,
      // before any subsampling.
      const DesignMatrix d = encode(*full, *schema);
      SyntheticAgentSpec spec = build_spec(*m.benchmark_agent, *d.encoding, nullptr);
      benchmark_truth = spec.coefficients;
      const DecisionSet set = run_agent(*full, d, SyntheticAgent{spec, false}, Condition::baseline, "org");
      full.emplace(apply_decisions(*full, set));
    }
    working.emplace(m.subsample ? balanced_subsample(*full, m.subsample->n_per_class, m.subsample->seed) : *full);
  }

  const DesignMatrix& get_design() {
    if (!design) {
      load_working();
      design.emplace(encode(*working, *schema));
    }
    return *design;
  }

  // ---- benchmark

  void fit_org() {
    if (org) return;
    const DesignMatrix& d = get_design();
    if (!m.lambda_grid.empty()) {
      lambda_selection = select_lambda(d, d.labels, m.lambda_grid, m.folds, m.fit, m.cv_seed);
      fit_config.lambda = lambda_selection->lambda;
    }
    org = fit(d, d.labels, fit_config);
    cv = cross_validate(d, d.labels, m.folds, fit_config, m.cv_seed);
  }

  /// Cosine between the fitted benchmark and the generating coefficients,
  /// when both live on the same columns.
  std::optional<double> recovery_cosine() {
    if (!benchmark_truth || !org || benchmark_truth->size() != org->coefficients.size()) return std::nullopt;
    return cosine_similarity(org->coefficients, *benchmark_truth);
  }

  // ---- agents

  SyntheticAgentSpec build_spec(const AgentEntry& e, const EncodingMap& enc, const PolicyVector* org_policy) {
    SyntheticAgentSpec spec;
    spec.temperature = e.temperature;
    spec.seed = e.seed;
    spec.steer_alpha = e.steer_alpha;
    const auto p = static_cast<Eigen::Index>(enc.retained_count());
    switch (e.beta.kind) {
      case BetaSpec::Kind::from_org:
        if (!org_policy) manifest_error("agent '" + e.name + "' needs the benchmark policy");
        spec.coefficients = e.beta.scale * org_policy->coefficients;
        spec.intercept = e.intercept.value_or(e.beta.scale * org_policy->intercept);
        break;
      case BetaSpec::Kind::random: {
        Rng rng(e.beta.seed);
        spec.coefficients.resize(p);
        for (Eigen::Index j = 0; j < p; ++j) spec.coefficients(j) = rng.normal();
        const double n = spec.coefficients.norm();
        if (n > 0.0) spec.coefficients *= e.beta.norm / n;
        spec.intercept = e.intercept.value_or(0.0);
        break;
      }
      case BetaSpec::Kind::columns: {
        spec.coefficients = Eigen::VectorXd::Zero(p);
        for (const auto& [key, value] : e.beta.columns) {
          bool found = false;
          for (std::size_t j = 0; j < enc.retained_count(); ++j) {
            if (EncodingMap::column_key(enc.retained_column(j)) == key) {
              spec.coefficients(static_cast<Eigen::Index>(j)) = value;
              found = true;
            }
          }
          if (!found) {
            const bool dropped = std::any_of(enc.columns().begin(), enc.columns().end(), [&](const EncodedColumn& c) {
              return EncodingMap::column_key(c) == key;
            });
            if (!dropped) manifest_error("agent '" + e.name + "' names unknown column '" + key + "'");
            logger().warn("agent '{}' column '{}' was dropped from the encoding; ignored", e.name, key);
          }
        }
        spec.intercept = e.intercept.value_or(0.0);
        break;
      }
    }
    if (e.beta.mask_protected) {
      for (std::size_t j = 0; j < enc.retained_count(); ++j) {
        if (schema->cue(enc.retained_column(j).cue).is_protected) spec.coefficients(static_cast<Eigen::Index>(j)) = 0.0;
      }
    }
    spec.validate();
    return spec;
  }

  std::vector<Condition> conditions_of(const AgentEntry& e) const {
    std::vector<Condition> out{Condition::baseline};
    const auto& list = e.conditions.empty() ? m.conditions : e.conditions;
    for (auto c : list) {
      if (c != Condition::baseline) out.push_back(c);
    }
    return out;
  }

  bool lists_condition(const AgentEntry& e, Condition c) const {
    const auto& list = e.conditions.empty() ? m.conditions : e.conditions;
    return std::find(list.begin(), list.end(), c) != list.end();
  }

  Agent make_agent(const AgentEntry& e) {
    if (e.kind == "synthetic") return SyntheticAgent{build_spec(e, *get_design().encoding, &*org), e.emit_stated_tiers};
    if (e.kind == "replay") {
      ReplayAgent agent;
      for (const auto& [cond, path] : e.replay) {
        std::ifstream in(path);
        if (!in) throw ValidationError("FileNotFound", "cannot open replay file '" + path.string() + "'");
        agent.sets[cond] = read_decisions_jsonl(in, *schema, e.name, cond);
      }
      return agent;
    }
    return ExternalAgent{e.command, std::chrono::milliseconds(e.timeout_ms)};
  }

  const GuidanceArtifact& org_guidance_artifact() {
    if (!org_guidance) {
      fit_org();
      org_guidance = render_org_externalization(tier_assignment(*org), *schema, policy_fingerprint(*org));
    }
    return *org_guidance;
  }

  AgentRuns& run_agent_entry(const AgentEntry& e) {
    auto it = runs.find(e.name);
    if (it != runs.end()) return it->second;
    fit_org();
    const DesignMatrix& d = get_design();
    const Agent agent = make_agent(e);
    AgentRuns r;
    for (Condition cond : conditions_of(e)) {
      const GuidanceArtifact* guidance = nullptr;
      if (cond == Condition::org_ext) {
        guidance = &org_guidance_artifact();
      } else if (cond == Condition::introspective) {
        if (!r.introspective) {
          if (!r.baseline_policy) {
            r.introspective_unavailable = true;
            logger().warn("agent '{}': no baseline policy, introspective condition skipped", e.name);
            continue;
          }
          IntrospectiveOptions opts;
          opts.reference_base_rate = m.reference_base_rate;
          r.introspective = render_introspective(*org, *r.baseline_policy, *schema, opts);
        }
        guidance = &*r.introspective;
      }
      DecisionSet set = run_agent(*working, d, agent, cond, e.name, guidance);
      if (cond == Condition::baseline) {
        Eigen::VectorXd y(static_cast<Eigen::Index>(set.size()));
        for (std::size_t i = 0; i < set.size(); ++i) y(static_cast<Eigen::Index>(i)) = set.decisions[i] ? 1.0 : 0.0;
        try {
          r.baseline_policy = fit(d, y, fit_config);
        } catch (const NumericalError& err) {
          logger().warn("agent '{}': baseline policy not fitted ({})", e.name, err.code());
        }
      }
      r.decisions.emplace(cond, std::move(set));
    }
    return runs.emplace(e.name, std::move(r)).first->second;
  }

  // ---- compare

  void compute_rows() {
    if (rows) return;
    fit_org();
    const DesignMatrix& d = get_design();
    rows.emplace();
    policies.clear();
    significance.clear();
    policies.emplace_back(PolicyKey{"org", "baseline"}, *org);
    const CvSpec cvspec{m.folds, m.cv_seed};
    std::size_t row_index = 0;
    for (const auto& e : m.agents) {
      AgentRuns& r = run_agent_entry(e);
      std::optional<Dataset> base_data;
      std::optional<double> base_cos;
      bool base_degenerate = false;
      for (Condition cond : conditions_of(e)) {
        CompareRow row;
        row.agent = e.name;
        row.condition = cond;
        row.n_cases = working->size();
        const std::uint64_t row_seed = derive_seed(m.resample.seed, row_index++);
        auto found = r.decisions.find(cond);
        if (found == r.decisions.end()) {
          row.status = "no_baseline_policy";
          for (Cell* c : {&row.r_cos, &row.acc, &row.auc, &row.good_pct, &row.kappa, &row.pearson_coeff,
                          &row.propensity_corr, &row.delta_r_cos, &row.p_value, &row.ci_low, &row.ci_high,
                          &row.boot_ci_low, &row.boot_ci_high}) {
            *c = marker(kNotApplicable);
          }
          rows->push_back(std::move(row));
          continue;
        }
        const Dataset data = apply_decisions(*working, found->second);
        const std::vector<bool> pred = data.decisions();
        const std::vector<bool> truth = working->decisions();
        const DegenerateFlag flag = degenerate_check(pred);
        row.status = std::string(to_string(flag.status));
        row.acc = accuracy(pred, truth);
        row.good_pct = 100.0 * flag.positive_rate;
        row.delta_r_cos = row.p_value = row.ci_low = row.ci_high = marker(kNotApplicable);
        row.boot_ci_low = row.boot_ci_high = marker(kNotApplicable);
        const bool degenerate = flag.status == DegenerateStatus::degenerate;
        if (degenerate) {
          for (Cell* c : {&row.r_cos, &row.auc, &row.kappa, &row.pearson_coeff, &row.propensity_corr}) {
            *c = marker(kExcluded);
          }
          logger().warn("agent '{}' {}: degenerate output ({:.1f}% positive), excluded", e.name, to_string(cond),
                        100.0 * flag.positive_rate);
        } else {
          const AlignmentAnalysis a = analyze_alignment(*org, data, d, fit_config, cvspec);
          row.r_cos = a.report.cosine;
          row.auc = a.report.auc;
          row.kappa = a.report.kappa ? Cell(*a.report.kappa) : marker(kUndefined);
          row.pearson_coeff = a.report.pearson_coeff;
          row.propensity_corr = a.report.propensity_corr;
          for (const auto& w : a.report.warnings) logger().warn("agent '{}' {}: {}", e.name, to_string(cond), w);
          policies.emplace_back(PolicyKey{e.name, std::string(to_string(cond))}, a.agent_policy);
          if (m.bootstrap_ci) {
            ResampleConfig rc = m.resample;
            rc.seed = derive_seed(row_seed, 1);
            const SignificanceResult b = bootstrap_cosine_ci(*working, data, *schema, fit_config, rc);
            row.boot_ci_low = b.ci_low;
            row.boot_ci_high = b.ci_high;
            ojson j = significance_to_json(b);
            j["agent"] = e.name;
            j["condition"] = std::string(to_string(cond));
            significance.push_back(std::move(j));
          }
        }
        if (cond == Condition::baseline) {
          base_data = data;
          base_degenerate = degenerate;
          if (!degenerate) base_cos = std::get<double>(row.r_cos);
        } else if (degenerate || base_degenerate) {
          row.delta_r_cos = row.p_value = row.ci_low = row.ci_high = marker(kExcluded);
        } else if (base_data && base_cos) {
          ResampleConfig rc = m.resample;
          rc.seed = derive_seed(row_seed, 0);
          const SignificanceResult s = permutation_delta_test(*base_data, data, *org, *schema, fit_config, rc);
          row.delta_r_cos = s.observed_delta;
          row.p_value = s.p_value;
          row.ci_low = s.ci_low;
          row.ci_high = s.ci_high;
          ojson j = significance_to_json(s);
          j["agent"] = e.name;
          j["condition"] = std::string(to_string(cond));
          j["compared_with"] = "baseline";
          significance.push_back(std::move(j));
        }
        if (cond == Condition::baseline && !lists_condition(e, Condition::baseline)) continue;
        rows->push_back(std::move(row));
      }
    }
  }

  // ---- writers

  void write_cases() {
    std::ostringstream out;
    write_cases_csv(out, *working);
    write("cases/working.csv", out.str());
  }

  void write_base_rates() {
    ojson j;
    j["n_full"] = full->size();
    j["full_base_rate"] = base_rate(*full);
    j["n_working"] = working->size();
    j["working_base_rate"] = base_rate(*working);
    j["subsample"] = m.subsample ? ojson({{"n_per_class", m.subsample->n_per_class}, {"seed", m.subsample->seed}})
                                 : ojson(nullptr);
    j["benchmark"] = m.benchmark_agent ? "synthetic benchmark_agent decisions" : "dataset decisions";
    write("tables/base_rates.json", j.dump(2) + "\n");
  }

  void write_fit() {
    write("policies/org.json", dump_json(policy_to_json(*org)));
    json cvj = cv_to_json(*cv);
    cvj.erase("held_out_propensity");
    if (lambda_selection) {
      json sel = json::array();
      for (const auto& [lambda, ll] : lambda_selection->log_likelihood) sel.push_back({{"lambda", lambda}, {"log_likelihood", ll}});
      cvj["lambda_selection"] = {{"selected", lambda_selection->lambda}, {"grid", sel}};
    }
    write("tables/cv.json", dump_json(cvj));
    std::ostringstream csv;
    csv << "n_cases,base_rate,lambda,folds,cv_accuracy,cv_auc,cv_log_likelihood,converged,iterations\n"
        << working->size() << ',' << format_real(base_rate(*working)) << ',' << format_real(fit_config.lambda) << ','
        << m.folds << ',' << format_real(cv->accuracy) << ',' << format_real(cv->auc) << ','
        << format_real(cv->log_likelihood) << ',' << (org->diagnostics.converged ? "true" : "false") << ','
        << org->diagnostics.iterations << '\n';
    write("tables/fit.csv", csv.str());
    std::ostringstream folds;
    folds << "fold,accuracy,auc\n";
    for (std::size_t f = 0; f < cv->per_fold.size(); ++f) {
      folds << f << ',' << format_real(cv->per_fold[f].accuracy) << ',' << format_real(cv->per_fold[f].auc) << '\n';
    }
    write("tables/cv_folds.csv", folds.str());
  }

  void write_guidance() {
    write_artifact_rel("org_externalized", org_guidance_artifact());
    for (const auto& e : m.agents) {
      if (!lists_condition(e, Condition::introspective)) continue;
      AgentRuns& r = run_agent_entry(e);
      if (r.introspective) write_artifact_rel("introspective_" + e.name, *r.introspective);
    }
  }

  void write_artifact_rel(const std::string& stem, const GuidanceArtifact& a) {
    write(fs::path("guidance") / (stem + ".txt"), a.body);
    write(fs::path("guidance") / (stem + ".provenance.json"), a.provenance.dump(2) + "\n");
  }

  void write_decisions() {
    for (const auto& e : m.agents) {
      AgentRuns& r = run_agent_entry(e);
      for (const auto& [cond, set] : r.decisions) {
        std::ostringstream out;
        write_decisions_jsonl(out, set, *schema);
        write(fs::path("decisions") / (e.name + "_" + std::string(to_string(cond)) + ".jsonl"), out.str());
      }
    }
  }

  void write_compare() {
    compute_rows();
    static const std::vector<std::string> header{
        "agent",           "condition",   "status",  "r_cos",   "acc",         "auc",
        "good_pct",        "kappa",       "pearson_coeff", "propensity_corr", "delta_r_cos", "p_value",
        "ci_low",          "ci_high",     "boot_ci_low",   "boot_ci_high",    "n_cases"};
    std::ostringstream csv, jsonl;
    for (std::size_t i = 0; i < header.size(); ++i) csv << (i ? "," : "") << header[i];
    csv << '\n';
    for (const auto& r : *rows) {
      const std::vector<const Cell*> cells{&r.r_cos,       &r.acc,     &r.auc,        &r.good_pct,
                                           &r.kappa,       &r.pearson_coeff, &r.propensity_corr, &r.delta_r_cos,
                                           &r.p_value,     &r.ci_low,  &r.ci_high,    &r.boot_ci_low,
                                           &r.boot_ci_high};
      csv << r.agent << ',' << to_string(r.condition) << ',' << r.status;
      for (const Cell* c : cells) csv << ',' << cell_text(*c);
      csv << ',' << r.n_cases << '\n';
      ojson j;
      j["agent"] = r.agent;
      j["condition"] = std::string(to_string(r.condition));
      j["status"] = r.status;
      for (std::size_t k = 0; k < cells.size(); ++k) j[header[3 + k]] = cell_json(*cells[k]);
      j["n_cases"] = r.n_cases;
      jsonl << j.dump() << '\n';
    }
    write("tables/compare.csv", csv.str());
    write("tables/compare.jsonl", jsonl.str());
    write("tables/compare.md", compare_markdown());

    std::ostringstream sig;
    for (const auto& s : significance) sig << s.dump() << '\n';
    write("tables/significance.jsonl", sig.str());

    const CorrelationSummary c = alignment_accuracy_correlation(*rows);
    ojson cj;
    cj["x"] = "r_cos";
    cj["y"] = "acc";
    cj["method"] = "pearson";
    cj["r"] = c.r ? ojson(*c.r) : ojson(std::string(kUndefined));
    cj["n"] = c.n;
    cj["p_value"] = c.p_value ? ojson(*c.p_value) : ojson(std::string(kUndefined));
    write("tables/correlation.json", cj.dump(2) + "\n");

    for (const auto& [key, policy] : policies) {
      if (key.decision_maker == "org") continue;
      write(fs::path("policies") / (key.decision_maker + "_" + key.condition + ".json"), dump_json(policy_to_json(policy)));
    }
    say(fmt::format("compare: {} rows, r(r_cos, acc) = {} (n = {})", rows->size(),
                    c.r ? fmt::format("{:.3f}", *c.r) : std::string(kUndefined), c.n));
  }

  std::string md_cell(const Cell& c, int digits) const {
    if (std::holds_alternative<double>(c)) return fmt::format("{:.{}f}", std::get<double>(c), digits);
    const auto& s = std::get<std::string>(c);
    return s == kExcluded ? "excluded†" : s;
  }

  std::string compare_markdown() const {
    std::ostringstream md;
    md << "| Agent | Condition | r_cos | Acc | AUC | Good% | kappa | Δr_cos | p | status |\n"
       << "|---|---|---:|---:|---:|---:|---:|---:|---:|---|\n";
    bool any_excluded = false;
    for (const auto& r : *rows) {
      any_excluded = any_excluded || r.status == "degenerate";
      md << "| " << r.agent << " | " << to_string(r.condition) << " | " << md_cell(r.r_cos, 3) << " | "
         << md_cell(r.acc, 3) << " | " << md_cell(r.auc, 3) << " | " << md_cell(r.good_pct, 1) << " | "
         << md_cell(r.kappa, 3) << " | " << md_cell(r.delta_r_cos, 3) << " | " << md_cell(r.p_value, 3) << " | "
         << r.status << " |\n";
    }
    if (any_excluded) {
      md << "\n† degenerate output (positive rate at or above 99% or at or below 1%); policy metrics excluded.\n";
    }
    return md.str();
  }

  void write_audit() {
    compute_rows();
    const AuditReport report = protected_attribute_report(policies, *schema);
    std::ostringstream csv, jsonl;
    write_audit_csv(csv, report);
    write_audit_jsonl(jsonl, report);
    write("tables/audit.csv", csv.str());
    write("tables/audit.jsonl", jsonl.str());

    std::ostringstream md;
    md << "| Decision-maker | Condition | Attribute | Share | Δ vs org | Δ vs baseline |\n|---|---|---|---:|---:|---:|\n";
    for (const auto& r : report.rows) {
      if (!r.is_protected) continue;
      md << "| " << r.decision_maker << " | " << r.condition << " | " << r.attribute << " | "
         << fmt::format("{:.3f}", r.share) << " | " << fmt::format("{:+.3f}", r.delta_vs_org) << " | "
         << (r.delta_vs_baseline ? fmt::format("{:+.3f}", *r.delta_vs_baseline) : std::string(kNotApplicable))
         << " |\n";
    }
    write("tables/audit_protected.md", md.str());

    for (const auto& e : m.agents) {
      AgentRuns& r = run_agent_entry(e);
      for (const auto& [cond, set] : r.decisions) {
        if (!set.has_stated_tiers()) continue;
        const std::string cond_name(to_string(cond));
        auto p = std::find_if(policies.begin(), policies.end(), [&](const auto& kp) {
          return kp.first.decision_maker == e.name && kp.first.condition == cond_name;
        });
        if (p == policies.end()) continue;
        std::ostringstream out;
        write_stated_csv(out, stated_vs_behavioral(set.stated_tiers, p->second));
        write(fs::path("tables") / ("stated_vs_behavioral_" + e.name + "_" + cond_name + ".csv"), out.str());
      }
    }
    say(fmt::format("audit: {} policies, {} rows", policies.size(), report.rows.size()));
  }

  void plot() {
    const fs::path compare_path = m.output_dir / "tables" / "compare.jsonl";
    const fs::path cv_path = m.output_dir / "tables" / "cv.json";
    std::istringstream in(read_file(compare_path));
    std::vector<ScatterPoint> points;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      if (j["r_cos"].is_number() && j["acc"].is_number()) {
        points.push_back({j["agent"].get<std::string>() + "/" + j["condition"].get<std::string>(),
                          j["r_cos"].get<double>(), j["acc"].get<double>()});
      }
    }
    const json cvj = json::parse(read_file(cv_path));
    const double ceiling = cvj.at("accuracy").get<double>();
    write("figures/alignment_vs_accuracy.svg", render_alignment_scatter(points, ceiling));
    say(fmt::format("plot: {} points, ceiling {:.3f}", points.size(), ceiling));
  }

  void write_report() {
    std::ostringstream md;
    md << "# Alignment report\n\n";
    md << "## Benchmark\n\n";
    md << fmt::format("- cases: {} (base rate {:.3f}; full dataset {} cases, base rate {:.3f})\n", working->size(),
                      base_rate(*working), full->size(), base_rate(*full));
    md << fmt::format("- lambda: {}\n", format_real(fit_config.lambda));
    md << fmt::format("- {}-fold CV: accuracy {:.3f}, AUC {:.3f}\n", m.folds, cv->accuracy, cv->auc);
    if (const auto rc = recovery_cosine()) {
      md << fmt::format("- recovery cosine vs. generating coefficients: {:.4f}\n", *rc);
    }
    md << "\n## Alignment\n\n" << compare_markdown();
    const CorrelationSummary c = alignment_accuracy_correlation(*rows);
    md << "\n";
    if (c.r) {
      md << fmt::format("Correlation of r_cos and accuracy: r = {:.3f}, n = {}, p = {:.4f}\n", *c.r, c.n,
                        c.p_value.value_or(std::nan("")));
    } else {
      md << fmt::format("Correlation of r_cos and accuracy: undefined (n = {})\n", c.n);
    }
    md << "\n## Protected attributes\n\nSee tables/audit_protected.md and tables/audit.csv.\n";
    md << "\n## Figure\n\nfigures/alignment_vs_accuracy.svg\n";
    write("tables/report.md", md.str());
  }
};

Pipeline::Pipeline(RunManifest manifest) : state_(std::make_unique<State>(std::move(manifest))) {}
Pipeline::~Pipeline() = default;

const RunManifest& Pipeline::manifest() const { return state_->m; }
void Pipeline::set_console(std::ostream* out) { state_->console = out; }

const Dataset& Pipeline::full_dataset() {
  state_->load_full();
  return *state_->full;
}
const Dataset& Pipeline::working_dataset() {
  state_->load_working();
  return *state_->working;
}
const DesignMatrix& Pipeline::design() { return state_->get_design(); }
const PolicyVector& Pipeline::org_policy() {
  state_->fit_org();
  return *state_->org;
}
const CvResult& Pipeline::org_cv() {
  state_->fit_org();
  return *state_->cv;
}
const std::vector<CompareRow>& Pipeline::compare_rows() {
  state_->compute_rows();
  return *state_->rows;
}

void Pipeline::cmd_subsample() {
  State& s = *state_;
  s.load_working();
  s.write_cases();
  s.write_base_rates();
  s.say(fmt::format("subsample: {} of {} cases, base rate {:.3f} (full {:.3f})", s.working->size(), s.full->size(),
                    base_rate(*s.working), base_rate(*s.full)));
}

void Pipeline::cmd_fit() {
  State& s = *state_;
  s.fit_org();
  s.write_fit();
  s.say(fmt::format("fit: n = {}, lambda = {}, CV accuracy = {:.3f}, AUC = {:.3f}", s.working->size(),
                    format_real(s.fit_config.lambda), s.cv->accuracy, s.cv->auc));
  if (const auto rc = s.recovery_cosine()) s.say(fmt::format("fit: recovery cosine = {:.4f}", *rc));
}

void Pipeline::cmd_externalize() {
  State& s = *state_;
  s.write_guidance();
  s.say("externalize: guidance written to " + (s.m.output_dir / "guidance").string());
}

void Pipeline::cmd_run_agent() {
  State& s = *state_;
  s.write_guidance();
  s.write_decisions();
  s.say(fmt::format("run-agent: {} agents", s.m.agents.size()));
}

void Pipeline::cmd_compare() {
  State& s = *state_;
  s.fit_org();
  s.write_fit();
  s.write_decisions();
  s.write_compare();
}

void Pipeline::cmd_audit() {
  State& s = *state_;
  s.write_audit();
}

void Pipeline::cmd_plot() { state_->plot(); }

void Pipeline::cmd_report() {
  State& s = *state_;
  cmd_subsample();
  cmd_fit();
  s.write_guidance();
  s.write_decisions();
  s.write_compare();
  s.write_audit();
  s.plot();
  s.write_report();
  s.say("report: " + (s.m.output_dir / "tables" / "report.md").string());
}

int run_command(const std::string& verb, const fs::path& manifest_path, const Overrides& overrides, std::ostream& out,
                std::ostream& err) {
  std::ostringstream log_text;
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(log_text);
  sink->set_pattern("[%l] %v");
  auto& log = logger();
  log.sinks().push_back(sink);
  struct SinkGuard {
    spdlog::logger& log;
    ~SinkGuard() { log.sinks().pop_back(); }
  } guard{log};

  auto fail = [&](int status, const std::string& code, const std::string& message) {
    err << "calm " << verb << ": error [" << code << "]: " << message << '\n';
    return status;
  };
  try {
    if (std::find(kCommands.begin(), kCommands.end(), verb) == kCommands.end()) {
      throw UsageError("UnknownCommand", "unknown command '" + verb + "'");
    }
    const std::string started = stamp();
    RunManifest m = load_manifest(manifest_path);
    apply_overrides(m, overrides);
    Pipeline p(m);
    p.set_console(&out);
    if (verb == "fit") p.cmd_fit();
    else if (verb == "subsample") p.cmd_subsample();
    else if (verb == "externalize") p.cmd_externalize();
    else if (verb == "run-agent") p.cmd_run_agent();
    else if (verb == "compare") p.cmd_compare();
    else if (verb == "audit") p.cmd_audit();
    else if (verb == "plot") p.cmd_plot();
    else p.cmd_report();

    log.flush();
    write_file_atomic(m.output_dir / "manifest.json", m.to_json().dump(2) + "\n");
    write_file_atomic(m.output_dir / "logs" / (verb + ".log"), log_text.str());
    ojson meta;
    meta["command"] = verb;
    meta["manifest_source"] = manifest_path.generic_string();
    meta["started_at"] = started;
    meta["finished_at"] = stamp();
    meta["overrides"] = m.overrides;
    meta["inference"] = {
        {"bootstrap", "paired case resampling with replacement, re-standardized and refitted per resample, percentile CI"},
        {"permutation", "case-level swap of baseline and treated decisions with probability 1/2, both policies refitted"},
        {"permutation_alternative", "decision-level permutation pooled over conditions (not used)"},
        {"refit_lambda", "same lambda as the full-sample fit"}};
    meta["cosine"] = "intercept excluded";
    write_file_atomic(m.output_dir / "metadata.json", meta.dump(2) + "\n");
    return 0;
  } catch (const Error& e) {
    return fail(e.exit_status(), e.code(), e.what());
  } catch (const json::exception& e) {
    return fail(2, "InvalidJson", e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(2, "FilesystemError", e.what());
  } catch (const std::exception& e) {
    return fail(3, "InternalError", e.what());
  }
}

}  // namespace calm
