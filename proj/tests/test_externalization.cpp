#include "calm/errors.hpp"
#include "calm/externalization.hpp"

#include "support.hpp"

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace calm;
using Catch::Matchers::ContainsSubstring;

namespace {

PolicyVector policy_on(std::shared_ptr<const CueSchema> schema, const std::vector<double>& coef) {
  const DesignMatrix dm = encode(testing::normal_cases(std::move(schema), 20, 1));
  PolicyVector p;
  p.coefficients = Eigen::Map<const Eigen::VectorXd>(coef.data(), static_cast<Eigen::Index>(coef.size()));
  p.encoding = dm.encoding;
  p.diagnostics.positive_rate = 0.7;
  return p;
}

Dataset german() {
  const CueSchema schema = load_schema_file(std::string(CALM_DATA_DIR) + "/german_credit/schema.json");
  return load_cases_file(std::string(CALM_DATA_DIR) + "/german_credit/german_credit.csv", schema);
}

std::vector<std::string> body_lines(const std::string& body) {
  std::vector<std::string> out;
  std::istringstream in(body);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("- ", 0) == 0) out.push_back(line);
  return out;
}

// Independent statement of the tier rule: percentile rank k/(m-1) of each
// cue in ascending-magnitude order.
std::vector<Tier> oracle_tiers(const std::vector<double>& mags) {
  const std::size_t m = mags.size();
  std::vector<Tier> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t below = 0;
    for (std::size_t j = 0; j < m; ++j) below += mags[j] < mags[i];
    const double pct = static_cast<double>(below) / static_cast<double>(m - 1);
    out[i] = pct > 2.0 / 3.0 ? Tier::high : pct > 1.0 / 3.0 ? Tier::medium : Tier::low;
  }
  return out;
}

}  // namespace

TEST_CASE("tertile tier rule", "[externalization]") {
  const std::vector<std::string> names9{"a", "b", "c", "d", "e", "f", "g", "h", "i"};
  const std::vector<double> mags9{9, 8, 7, 6, 5, 4, 3, 2, 1};
  const auto t9 = tertile_tiers(mags9, names9);
  CHECK(std::count(t9.begin(), t9.end(), Tier::high) == 3);
  CHECK(std::count(t9.begin(), t9.end(), Tier::medium) == 3);
  CHECK(std::count(t9.begin(), t9.end(), Tier::low) == 3);
  CHECK(t9 == oracle_tiers(mags9));

  SECTION("distinct magnitudes agree with the percentile oracle") {
    for (std::size_t m = 3; m <= 25; ++m) {
      std::vector<double> mags;
      std::vector<std::string> names;
      for (std::size_t i = 0; i < m; ++i) {
        mags.push_back(static_cast<double>((i * 7919) % 101 + 1) + 0.001 * static_cast<double>(i));
        names.push_back("c" + std::to_string(100 + i));
      }
      CHECK(tertile_tiers(mags, names) == oracle_tiers(mags));
    }
  }
  SECTION("ties are ordered by name") {
    const auto t = tertile_tiers({1, 1, 1}, {"c", "a", "b"});
    CHECK(t[1] == Tier::high);  // "a" ranks first among equals
    CHECK(t[2] == Tier::medium);
    CHECK(t[0] == Tier::low);
  }
  SECTION("fewer than three nonzero magnitudes") {
    const auto t = tertile_tiers({2.0, 0.0, 1.0, 0.0}, {"a", "b", "c", "d"});
    CHECK(std::all_of(t.begin(), t.end(), [](Tier x) { return x == Tier::medium; }));
  }
}

TEST_CASE("tier assignment pools categorical columns", "[externalization]") {
  const Dataset d = german();
  const DesignMatrix dm = encode(d);
  PolicyVector p;
  p.coefficients = Eigen::VectorXd::Zero(dm.n_columns());
  p.encoding = dm.encoding;
  const EncodingMap& enc = *dm.encoding;
  for (std::size_t j = 0; j < enc.retained_count(); ++j) {
    const auto& c = enc.retained_column(j);
    if (c.cue == "checking_account") p.coefficients(j) = c.level == "A14" ? 2.0 : -0.5;
    if (c.cue == "duration") p.coefficients(j) = -1.0;
    if (c.cue == "age_years") p.coefficients(j) = 0.2;
  }
  const auto tiers = tier_assignment(p);
  REQUIRE(tiers.size() == 20);
  CHECK(tiers[0].cue == "checking_account");
  CHECK(tiers[0].magnitude == Catch::Approx(3.5));
  CHECK(tiers[0].dominant_level == "A14");
  CHECK(tiers[0].direction == Direction::positive);
  CHECK(tiers[0].tier == Tier::high);
  CHECK(tiers[1].cue == "duration");
  CHECK(tiers[1].direction == Direction::negative);
  CHECK(tiers[1].dominant_level == "numeric");

  const GuidanceArtifact g = render_org_externalization(tiers, d.schema(), policy_fingerprint(p));
  const auto lines = body_lines(g.body);
  CHECK(lines.size() == 20);
  for (const auto& cue : d.schema().cues()) {
    CHECK(std::count_if(lines.begin(), lines.end(), [&](const std::string& l) {
            return l.rfind("- " + cue.name + " ", 0) == 0 || l.rfind("- " + cue.name + ":", 0) == 0;
          }) == 1);
  }
  // Three weighted cues are all HIGH and listed by name.
  CHECK(lines[0] == "- age_years (higher values): strong indicator of Good");
  CHECK(lines[1] == "- checking_account = A14: strong indicator of Good");
  CHECK(std::find(lines.begin(), lines.end(), "- duration (higher values): strong indicator of Bad") != lines.end());
  CHECK(std::find(lines.begin(), lines.end(), "- purpose: no measurable weight in the organization's decisions") != lines.end());
  CHECK(g.provenance["kind"] == "org_externalized");
  CHECK(g.provenance["policy_fingerprints"].size() == 1);
  CHECK(g.provenance["tier_rule"] == std::string(kTierRule));
}

TEST_CASE("org guidance covers every cue and parses back", "[externalization]") {
  auto schema = testing::numeric_schema(6);
  const PolicyVector p = policy_on(schema, {1.2, -0.9, 0.6, 0.3, -0.2, 0.05});
  const auto tiers = tier_assignment(p);
  const GuidanceArtifact g = render_org_externalization(tiers, *schema);
  CHECK(g.body.rfind("ORGANIZATIONAL DECISION GUIDANCE\n", 0) == 0);
  const auto directives = parse_guidance(g.body, *schema);
  REQUIRE(directives.size() == 6);
  std::set<std::string> seen;
  for (const auto& dir : directives) {
    seen.insert(dir.cue);
    const auto it = std::find_if(tiers.begin(), tiers.end(), [&](const CueTier& t) { return t.cue == dir.cue; });
    CHECK(dir.tier == it->tier);
    CHECK(dir.direction == it->direction);
    CHECK(dir.level == "numeric");
  }
  CHECK(seen.size() == 6);
  const auto lines = body_lines(g.body);
  CHECK(lines[0] == "- x1 (higher values): strong indicator of Good");
  CHECK(lines[1] == "- x2 (higher values): strong indicator of Bad");
  CHECK(lines.back() == "- x6 (higher values): weak indicator of Good");
}

TEST_CASE("guidance parsing rejects unknown names", "[externalization]") {
  auto schema = testing::numeric_schema(2);
  auto code = [&](const std::string& body) {
    try {
      parse_guidance(body, *schema);
    } catch (const ValidationError& e) {
      return e.code();
    }
    return std::string();
  };
  CHECK(code("nothing to see here\n") == "UnparseableGuidance");
  CHECK(code("- x9 (higher values): strong indicator of Good\n") == "UnparseableGuidance");
  CHECK(code("- x1 (higher values): strong indicator of Maybe\n") == "UnparseableGuidance");
  CHECK(code("- x1 = A11: strong indicator of Good\n") == "UnparseableGuidance");
  CHECK(parse_guidance("- x2 (higher values): weak indicator of Bad\n", *schema)[0].tier == Tier::low);
}

TEST_CASE("introspective feedback for an agent identical to the organization", "[externalization]") {
  auto schema = testing::numeric_schema(4);
  const PolicyVector org = policy_on(schema, {1.0, -0.5, 0.25, 0.1});
  PolicyVector agent = org;
  agent.coefficients *= 3.0;  // same direction, different scale
  const GuidanceArtifact g = render_introspective(org, agent, *schema);
  CHECK(g.body.rfind("SELF-CORRECTION FEEDBACK\n", 0) == 0);
  CHECK_THAT(g.body, ContainsSubstring("no material divergence between your cue weighting"));
  CHECK_THAT(g.body, ContainsSubstring("in line with the organization's base rate"));
  for (const auto& d : cue_divergences(org, agent)) CHECK(d.divergence <= 1e-12);
  CHECK(g.provenance["kind"] == "introspective");
  CHECK(g.provenance["policy_fingerprints"].size() == 2);
  CHECK(g.provenance["reference_base_rate"] == 0.7);
}

TEST_CASE("introspective feedback names the approval gap and the largest divergence", "[externalization]") {
  auto schema = testing::numeric_schema(4);
  const PolicyVector org = policy_on(schema, {2.0, -0.5, 0.25, 0.1});
  PolicyVector agent = policy_on(schema, {-2.0, -0.5, 0.25, 0.1});
  agent.diagnostics.positive_rate = 0.375;
  IntrospectiveOptions opts;
  opts.reference_base_rate = 0.70;
  const GuidanceArtifact g = render_introspective(org, agent, *schema, opts);
  CHECK_THAT(g.body, ContainsSubstring("37.5% of cases"));
  CHECK_THAT(g.body, ContainsSubstring("70.0%"));
  CHECK_THAT(g.body, ContainsSubstring("You under-approve"));
  const auto lines = body_lines(g.body);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0].rfind("- x1 (higher values): divergence ", 0) == 0);
  CHECK_THAT(lines[0], ContainsSubstring("direction disagrees"));
  CHECK_THAT(lines[0], ContainsSubstring("strong indicator of Good"));

  const auto div = cue_divergences(org, agent);
  CHECK(div[0].cue == "x1");
  CHECK(div[0].direction_disagrees);
  CHECK(div[0].divergence == Catch::Approx(4.0 / 2.85));
  for (const auto& d : div) {
    if (d.cue != "x1") CHECK_FALSE(d.direction_disagrees);
  }
  agent.diagnostics.positive_rate = 0.9;
  CHECK_THAT(render_introspective(org, agent, *schema, opts).body, ContainsSubstring("You over-approve"));
}

TEST_CASE("introspective feedback needs one encoding", "[externalization]") {
  const PolicyVector a = policy_on(testing::numeric_schema(3), {1, 2, 3});
  const PolicyVector b = policy_on(testing::numeric_schema(2), {1, 2});
  CHECK_THROWS_AS(cue_divergences(a, b), ValidationError);
}

TEST_CASE("artifacts are written with provenance", "[externalization]") {
  auto schema = testing::numeric_schema(3);
  const PolicyVector p = policy_on(schema, {1, 2, 3});
  const auto dir = std::filesystem::temp_directory_path() / "calm_test_artifacts";
  std::filesystem::remove_all(dir);
  write_artifact(dir, "org_externalized", render_org_externalization(tier_assignment(p), *schema));
  CHECK(std::filesystem::exists(dir / "org_externalized.txt"));
  std::ifstream prov(dir / "org_externalized.provenance.json");
  const auto doc = nlohmann::json::parse(prov);
  CHECK(doc["template_version"] == std::string(kOrgTemplateVersion));
  std::filesystem::remove_all(dir);
}
