#pragma once

// Shared fixtures: small synthetic case sets over numeric cues.

#include "calm/case_data.hpp"
#include "calm/rng.hpp"

#include <memory>
#include <string>
#include <vector>

namespace calm::testing {

inline std::shared_ptr<const CueSchema> numeric_schema(int n_cues, std::vector<std::string> protected_cues = {}) {
  std::vector<CueDef> cues;
  for (int j = 0; j < n_cues; ++j) {
    CueDef c;
    c.name = "x" + std::to_string(j + 1);
    c.kind = CueKind::numeric;
    for (const auto& p : protected_cues) c.is_protected = c.is_protected || p == c.name;
    cues.push_back(std::move(c));
  }
  return std::make_shared<const CueSchema>(std::move(cues), "Good", "Bad");
}

/// Independent standard normal cues; decisions all false.
inline Dataset normal_cases(std::shared_ptr<const CueSchema> schema, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CaseRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    CaseRecord r;
    r.case_id = std::to_string(i + 1);
    for (std::size_t j = 0; j < schema->size(); ++j) r.cue_values.emplace_back(rng.normal());
    records.push_back(std::move(r));
  }
  return Dataset(std::move(schema), std::move(records));
}

}  // namespace calm::testing
