#include "calm/errors.hpp"
#include "calm/io.hpp"
#include "calm/pipeline.hpp"

#include <catch_amalgamated.hpp>
#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

using namespace calm;
using nlohmann::json;
namespace fs = std::filesystem;
using Catch::Matchers::ContainsSubstring;

namespace {

const fs::path kDataDir = CALM_DATA_DIR;
const fs::path kManifestDir = CALM_MANIFEST_DIR;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("calm_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_manifest(const fs::path& dir, const json& doc) {
  const fs::path path = dir / "manifest.json";
  std::ofstream(path) << doc.dump(2);
  return path;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

const json* find_row(const std::vector<json>& rows, const std::string& agent, const std::string& condition) {
  for (const auto& r : rows)
    if (r["agent"] == agent && r["condition"] == condition) return &r;
  return nullptr;
}

int run(const std::string& verb, const fs::path& manifest, std::string* err_text = nullptr, Overrides o = {}) {
  std::ostringstream out, err;
  const int status = run_command(verb, manifest, o, out, err);
  if (err_text) *err_text = err.str();
  return status;
}

// Small all-synthetic study: benchmark with known coefficients and agents at
// increasing guidance uptake.
json synthetic_manifest(const fs::path& out_dir) {
  return json{
      {"synthetic_data", {{"n_cases", 300}, {"n_cues", 6}, {"seed", 5}, {"protected", {"x06"}}}},
      {"benchmark_agent",
       {{"name", "org"},
        {"temperature", 0.5},
        {"seed", 6},
        {"beta", {{"columns", {{"x01", 1.2}, {"x02", -1.0}, {"x03", 0.7}, {"x04", 0.4}, {"x05", -0.2}, {"x06", 0.3}}}}}}},
      {"seed", 8},
      {"resample", {{"n_resamples", 100}, {"bootstrap_ci", true}}},
      {"conditions", {"baseline", "org_ext"}},
      {"agents",
       {
           {{"name", "a0"}, {"beta", {{"from_org", -1.0}}}, {"temperature", 0.5}, {"seed", 31}, {"steer_alpha", 0.0}},
           {{"name", "a5"}, {"beta", {{"from_org", -1.0}}}, {"temperature", 0.5}, {"seed", 31}, {"steer_alpha", 0.5}},
           {{"name", "a10"}, {"beta", {{"from_org", -1.0}}}, {"temperature", 0.5}, {"seed", 31}, {"steer_alpha", 1.0}},
           {{"name", "masked"},
            {"beta", {{"from_org", 1.0}, {"mask_protected", true}}},
            {"seed", 32},
            {"emit_stated_tiers", true}},
           {{"name", "yes_man"}, {"beta", {{"random", {{"seed", 2}, {"norm", 0.1}}}}}, {"intercept", 9.0}, {"seed", 33}},
       }},
      {"output_dir", out_dir.string()},
  };
}

}  // namespace

TEST_CASE("CLI reports a missing dataset by path", "[pipeline]") {
  const fs::path dir = scratch("missing");
  const json doc{{"schema", (kDataDir / "german_credit/schema.json").string()},
                 {"dataset", "/nonexistent/cases.csv"},
                 {"output_dir", (dir / "out").string()}};
  const fs::path manifest = write_manifest(dir, doc);
  const std::string cmd = std::string(CALM_CLI_PATH) + " fit --manifest " + manifest.string() + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe);
  std::string output;
  std::array<char, 256> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) output += buf.data();
  const int status = ::pclose(pipe);
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 2);
  CHECK_THAT(output, ContainsSubstring("/nonexistent/cases.csv"));
  CHECK_FALSE(fs::exists(dir / "out" / "tables" / "compare.csv"));
}

TEST_CASE("CLI usage errors exit with status 1", "[pipeline]") {
  const std::string cli = CALM_CLI_PATH;
  CHECK(WEXITSTATUS(std::system((cli + " fit >/dev/null 2>&1").c_str())) == 1);
  CHECK(WEXITSTATUS(std::system((cli + " frobnicate -m x.json >/dev/null 2>&1").c_str())) == 1);
  CHECK(WEXITSTATUS(std::system((cli + " --help >/dev/null 2>&1").c_str())) == 0);
}

TEST_CASE("manifest validation", "[pipeline]") {
  const fs::path dir = scratch("manifest");
  auto code = [&](const json& doc) {
    try {
      parse_manifest(doc, dir);
    } catch (const Error& e) {
      return e.code();
    }
    return std::string();
  };
  CHECK(code({{"schema", "s.json"}, {"dataset", "d.csv"}, {"bogus", 1}}) == "InvalidManifest");
  CHECK(code({{"schema", "s.json"}}) == "InvalidManifest");
  CHECK(code({{"schema", "s.json"}, {"dataset", "d.csv"}, {"resample", {{"n_resamples", 10}}}}) == "TooFewResamples");
  const RunManifest m = parse_manifest({{"schema", "s.json"}, {"dataset", "d.csv"}, {"seed", 77}}, dir);
  CHECK(m.schema == dir / "s.json");
  CHECK(m.cv_seed == 77);
  CHECK(m.resample.seed == 77);
  CHECK(m.conditions.front() == Condition::baseline);

  RunManifest o = m;
  Overrides ov;
  ov.seed = 5;
  ov.folds = 3;
  ov.lambda = 0.1;
  apply_overrides(o, ov);
  CHECK(o.seed == 5);
  CHECK(o.cv_seed == 5);
  CHECK(o.folds == 3);
  CHECK(o.fit.lambda == 0.1);
  CHECK(o.overrides.contains("seed"));
}

TEST_CASE("replaying the benchmark decisions gives perfect alignment", "[pipeline]") {
  const fs::path dir = scratch("replay");
  {
    const CueSchema schema = load_schema_file(kDataDir / "german_credit/schema.json");
    const Dataset full = load_cases_file(kDataDir / "german_credit/german_credit.csv", schema);
    std::ofstream out(dir / "org_decisions.jsonl");
    for (const auto& r : full.records())
      out << json{{"case_id", r.case_id}, {"decision", r.decision ? "Good" : "Bad"}}.dump() << '\n';
  }
  const json doc{{"schema", (kDataDir / "german_credit/schema.json").string()},
                 {"dataset", (kDataDir / "german_credit/german_credit.csv").string()},
                 {"subsample", {{"n_per_class", 300}, {"seed", 42}}},
                 {"seed", 42},
                 {"resample", {{"n_resamples", 100}}},
                 {"agents", {{{"name", "mirror"}, {"kind", "replay"}, {"decisions", {{"baseline", "org_decisions.jsonl"}}}}}},
                 {"output_dir", "out"}};
  const fs::path manifest = write_manifest(dir, doc);
  std::string err;
  REQUIRE(run("compare", manifest, &err) == 0);
  const auto rows = read_jsonl(dir / "out/tables/compare.jsonl");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0]["status"] == "ok");
  CHECK(std::abs(rows[0]["r_cos"].get<double>() - 1.0) <= 1e-12);
  CHECK(rows[0]["kappa"].get<double>() == 1.0);
  CHECK(rows[0]["acc"].get<double>() == 1.0);
  CHECK(rows[0]["n_cases"] == 600);

  REQUIRE(run("subsample", manifest) == 0);
  const json base_rates = json::parse(slurp(dir / "out/tables/base_rates.json"));
  CHECK(base_rates["full_base_rate"] == 0.7);
  CHECK(base_rates["working_base_rate"] == 0.5);
  CHECK(base_rates["n_working"] == 600);
}

TEST_CASE("synthetic study end to end", "[pipeline]") {
  const fs::path dir = scratch("synthetic");
  const fs::path manifest = write_manifest(dir, synthetic_manifest(dir / "out"));
  std::string err;
  REQUIRE(run("report", manifest, &err) == 0);
  const fs::path out = dir / "out";
  const auto rows = read_jsonl(out / "tables/compare.jsonl");

  SECTION("delta grows with guidance uptake") {
    const double d0 = (*find_row(rows, "a0", "org_ext"))["delta_r_cos"].get<double>();
    const double d5 = (*find_row(rows, "a5", "org_ext"))["delta_r_cos"].get<double>();
    const double d10 = (*find_row(rows, "a10", "org_ext"))["delta_r_cos"].get<double>();
    CHECK(d0 == 0.0);
    CHECK(d5 > d0);
    CHECK(d10 > d5);
    CHECK(d10 >= 0.3);
    CHECK((*find_row(rows, "a10", "org_ext"))["p_value"].get<double>() <= 0.05);
  }
  SECTION("degenerate agent is excluded from alignment") {
    const json& row = *find_row(rows, "yes_man", "baseline");
    CHECK(row["status"] == "degenerate");
    CHECK(row["r_cos"] == "excluded");
    CHECK(row["kappa"] == "excluded");
    const std::string md = slurp(out / "tables/compare.md");
    CHECK_THAT(md, ContainsSubstring("yes_man"));
    CHECK_THAT(md, ContainsSubstring("excluded"));
  }
  SECTION("masked agent puts no weight on the protected cue") {
    const std::string audit = slurp(out / "tables/audit.csv");
    CHECK_THAT(audit, ContainsSubstring("org,baseline,x06,true"));
    CHECK(fs::exists(out / "tables/stated_vs_behavioral_masked_baseline.csv"));
  }
  SECTION("figure marks every plottable row and the accuracy ceiling") {
    const std::string svg = slurp(out / "figures/alignment_vs_accuracy.svg");
    const json cv = json::parse(slurp(out / "tables/cv.json"));
    std::size_t numeric = 0;
    for (const auto& r : rows) numeric += r["r_cos"].is_number() && r["acc"].is_number();
    const std::regex point_re("<circle class=\"point\"");
    const auto circles = std::distance(std::sregex_iterator(svg.begin(), svg.end(), point_re), std::sregex_iterator());
    CHECK(static_cast<std::size_t>(circles) == numeric);
    std::smatch m;
    REQUIRE(std::regex_search(svg, m, std::regex("class=\"ceiling\"[^>]*data-accuracy=\"([0-9.]+)\"")));
    CHECK(std::abs(std::stod(m[1].str()) - cv["accuracy"].get<double>()) <= 1e-6);
    CHECK_THAT(svg, ContainsSubstring("Policy alignment (cosine similarity)"));
    CHECK_THAT(svg, ContainsSubstring("Output accuracy"));
  }
  SECTION("report and guidance artifacts") {
    CHECK(fs::exists(out / "tables/report.md"));
    CHECK(fs::exists(out / "guidance/org_externalized.txt"));
    CHECK(fs::exists(out / "guidance/org_externalized.provenance.json"));
    CHECK(fs::exists(out / "policies/org.json"));
    CHECK(fs::exists(out / "decisions/a10_org_ext.jsonl"));
    CHECK(fs::exists(out / "manifest.json"));
    const json meta = json::parse(slurp(out / "metadata.json"));
    CHECK(meta["command"] == "report");
  }
}

TEST_CASE("plotting with nothing to plot", "[pipeline]") {
  const fs::path dir = scratch("empty_plot");
  json doc = synthetic_manifest(dir / "out");
  doc["agents"] = json::array({doc["agents"][4]});  // only the degenerate agent
  const fs::path manifest = write_manifest(dir, doc);
  REQUIRE(run("compare", manifest) == 0);
  std::string err;
  CHECK(run("plot", manifest, &err) == 2);
  CHECK_THAT(err, ContainsSubstring("EmptyCompare"));
}

TEST_CASE("runs are reproducible from the manifest", "[pipeline]") {
  const fs::path dir = scratch("repro");
  const fs::path manifest = write_manifest(dir, synthetic_manifest(dir / "unused"));
  Overrides a, b;
  a.out = dir / "run_a";
  b.out = dir / "run_b";
  REQUIRE(run("report", manifest, nullptr, a) == 0);
  REQUIRE(run("report", manifest, nullptr, b) == 0);
  std::size_t compared = 0;
  for (const char* sub : {"tables", "policies", "figures", "guidance", "decisions"}) {
    for (const auto& entry : fs::directory_iterator(dir / "run_a" / sub)) {
      const fs::path other = dir / "run_b" / sub / entry.path().filename();
      REQUIRE(fs::exists(other));
      CHECK(slurp(entry.path()) == slurp(other));
      ++compared;
    }
  }
  CHECK(compared > 20);
  SECTION("a different seed changes the decisions") {
    Overrides c = a;
    c.out = dir / "run_c";
    c.seed = 999;
    REQUIRE(run("report", manifest, nullptr, c) == 0);
    CHECK(slurp(dir / "run_a/tables/compare.csv") != slurp(dir / "run_c/tables/compare.csv"));
  }
}

TEST_CASE("correlation of alignment and accuracy", "[pipeline]") {
  std::vector<CompareRow> rows(5);
  const double cos[] = {0.1, 0.3, 0.5, 0.7, 0.9};
  const double acc[] = {0.52, 0.55, 0.61, 0.66, 0.71};
  for (int i = 0; i < 5; ++i) {
    rows[i].r_cos = cos[i];
    rows[i].acc = acc[i];
  }
  CompareRow excluded;
  excluded.r_cos = std::string(kExcluded);
  excluded.acc = 0.5;
  rows.push_back(excluded);
  const CorrelationSummary s = alignment_accuracy_correlation(rows);
  CHECK(s.n == 5);
  REQUIRE(s.r.has_value());
  CHECK(*s.r > 0.98);
  REQUIRE(s.p_value.has_value());
  CHECK(*s.p_value < 0.01);
}
