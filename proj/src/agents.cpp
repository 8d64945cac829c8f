#include "calm/agents.hpp"

#include "calm/errors.hpp"
#include "calm/log.hpp"
#include "calm/rng.hpp"
#include "calm/ridge_logit.hpp"

#include <nlohmann/json.hpp>

#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <set>

namespace calm {

void SyntheticAgentSpec::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ValidationError("InvalidTemperature", "synthetic agent temperature must be > 0");
  }
  if (!(steer_alpha >= 0.0 && steer_alpha <= 1.0)) {
    throw ValidationError("InvalidSteerAlpha", "steer_alpha must lie in [0, 1]");
  }
  if (!std::isfinite(intercept) || !coefficients.allFinite()) {
    throw ValidationError("NonFiniteCoefficient", "synthetic agent coefficients must be finite");
  }
}

bool synthetic_decide(const SyntheticAgentSpec& spec, const Eigen::VectorXd& encoded_case, std::size_t case_index) {
  if (encoded_case.size() != spec.coefficients.size()) {
    throw ValidationError("DimensionMismatch", "encoded case has " + std::to_string(encoded_case.size()) +
                                                   " columns, agent has " + std::to_string(spec.coefficients.size()));
  }
  const double score = spec.intercept + encoded_case.dot(spec.coefficients);
  const double u = unit_uniform(derive_seed(spec.seed, case_index));
  return u < sigmoid(score / spec.temperature);
}

Eigen::VectorXd guidance_coefficients(const std::vector<GuidanceDirective>& directives, const EncodingMap& encoding) {
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(encoding.retained_count()));
  for (const auto& d : directives) {
    bool placed = false;
    for (std::size_t j = 0; j < encoding.retained_count(); ++j) {
      const auto& col = encoding.retained_column(j);
      if (col.cue != d.cue || col.level != d.level) continue;
      const double magnitude = d.tier == Tier::high     ? kTierMagnitudeHigh
                               : d.tier == Tier::medium ? kTierMagnitudeMedium
                                                        : kTierMagnitudeLow;
      beta(static_cast<Eigen::Index>(j)) = d.direction == Direction::positive ? magnitude : -magnitude;
      placed = true;
    }
    if (!placed) logger().warn("guidance column '{}={}' is not in the agent's encoding; skipped", d.cue, d.level);
  }
  return beta;
}

SyntheticAgentSpec steer(const SyntheticAgentSpec& spec, const GuidanceArtifact& guidance, const EncodingMap& encoding,
                         const CueSchema& schema) {
  spec.validate();
  if (spec.coefficients.size() != static_cast<Eigen::Index>(encoding.retained_count())) {
    throw ValidationError("DimensionMismatch", "agent coefficients do not match the encoding");
  }
  const auto directives = parse_guidance(guidance.body, schema);
  Eigen::VectorXd beta_g = guidance_coefficients(directives, encoding);
  const double g = beta_g.norm();
  if (g > 0.0) beta_g *= spec.coefficients.norm() / g;
  SyntheticAgentSpec out = spec;
  out.coefficients = (1.0 - spec.steer_alpha) * spec.coefficients + spec.steer_alpha * beta_g;
  return out;
}

std::string_view to_string(Condition condition) {
  switch (condition) {
    case Condition::baseline: return "baseline";
    case Condition::org_ext: return "org_ext";
    case Condition::introspective: return "introspective";
  }
  return "baseline";
}

Condition parse_condition(std::string_view text) {
  if (text == "baseline") return Condition::baseline;
  if (text == "org_ext") return Condition::org_ext;
  if (text == "introspective") return Condition::introspective;
  throw ValidationError("UnknownCondition", "unknown condition '" + std::string(text) + "'");
}

namespace {

bool parse_decision_value(const nlohmann::json& v, const CueSchema& schema, const std::string& where,
                          ErrorCategory category) {
  auto fail = [&](const std::string& msg) -> bool {
    if (category == ErrorCategory::agent) throw AgentError("MalformedReply", where + ": " + msg);
    throw ValidationError("UnknownDecision", where + ": " + msg);
  };
  if (v.is_string()) {
    const auto& s = v.get_ref<const std::string&>();
    if (s == schema.positive_label()) return true;
    if (s == schema.negative_label()) return false;
    return fail("decision '" + s + "' is neither '" + schema.positive_label() + "' nor '" + schema.negative_label() +
                "'");
  }
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_number_integer() || v.is_number_unsigned()) {
    const auto n = v.get<long long>();
    if (n == 0 || n == 1) return n == 1;
  }
  return fail("decision must be a label, a boolean or 0/1");
}

StatedTiers parse_stated(const nlohmann::json& v, const std::string& where, ErrorCategory category) {
  StatedTiers out;
  if (!v.is_object()) {
    if (category == ErrorCategory::agent) throw AgentError("MalformedReply", where + ": stated_tiers must be an object");
    throw ValidationError("InvalidStatedTiers", where + ": stated_tiers must be an object");
  }
  for (const auto& [attr, tier] : v.items()) {
    if (!tier.is_string()) {
      if (category == ErrorCategory::agent) throw AgentError("MalformedReply", where + ": tier must be text");
      throw ValidationError("InvalidStatedTiers", where + ": tier must be text");
    }
    parse_tier(tier.get_ref<const std::string&>());
    out[attr] = tier.get<std::string>();
  }
  return out;
}

}  // namespace

void write_decisions_jsonl(std::ostream& out, const DecisionSet& set, const CueSchema& schema) {
  for (std::size_t i = 0; i < set.size(); ++i) {
    nlohmann::ordered_json j;
    j["case_id"] = set.case_ids[i];
    j["decision"] = set.decisions[i] ? schema.positive_label() : schema.negative_label();
    if (set.has_stated_tiers()) j["stated_tiers"] = set.stated_tiers[i];
    out << j.dump() << '\n';
  }
}

DecisionSet read_decisions_jsonl(std::istream& in, const CueSchema& schema, const std::string& agent,
                                 Condition condition) {
  DecisionSet set;
  set.agent = agent;
  set.condition = condition;
  std::set<std::string> seen;
  std::vector<std::optional<StatedTiers>> stated;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "decisions line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("InvalidJson", where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("case_id") || !j.contains("decision")) {
      throw ValidationError("InvalidRecord", where + ": needs case_id and decision");
    }
    std::string id = j["case_id"].is_string() ? j["case_id"].get<std::string>() : j["case_id"].dump();
    if (!seen.insert(id).second) throw ValidationError("DuplicateCaseId", where + ": duplicate case '" + id + "'");
    set.case_ids.push_back(id);
    set.decisions.push_back(parse_decision_value(j["decision"], schema, where, ErrorCategory::validation));
    if (j.contains("stated_tiers") && !j["stated_tiers"].is_null()) {
      stated.push_back(parse_stated(j["stated_tiers"], where, ErrorCategory::validation));
    } else {
      stated.emplace_back();
    }
  }
  if (std::any_of(stated.begin(), stated.end(), [](const auto& s) { return s.has_value(); })) {
    for (auto& s : stated) set.stated_tiers.push_back(s.value_or(StatedTiers{}));
  }
  return set;
}

Dataset apply_decisions(const Dataset& dataset, const DecisionSet& set) {
  std::unordered_map<std::string, bool> by_id;
  for (std::size_t i = 0; i < set.size(); ++i) by_id.emplace(set.case_ids[i], set.decisions[i]);
  std::vector<bool> decisions;
  decisions.reserve(dataset.size());
  for (const auto& r : dataset.records()) {
    auto it = by_id.find(r.case_id);
    if (it == by_id.end()) {
      throw ValidationError("MissingDecision", "agent '" + set.agent + "' has no " + std::string(to_string(set.condition)) +
                                                   " decision for case '" + r.case_id + "'");
    }
    decisions.push_back(it->second);
  }
  return dataset.with_decisions(decisions);
}

namespace {

StatedTiers contribution_tiers(const SyntheticAgentSpec& spec, const Eigen::VectorXd& x, const EncodingMap& enc) {
  const auto names = enc.cue_names();
  std::vector<double> contrib(names.size(), 0.0);
  std::size_t pos = 0;
  for (std::size_t j = 0; j < enc.retained_count(); ++j) {
    const auto& col = enc.retained_column(j);
    while (names[pos] != col.cue) ++pos;
    contrib[pos] += x(static_cast<Eigen::Index>(j)) * spec.coefficients(static_cast<Eigen::Index>(j));
  }
  for (auto& c : contrib) c = std::abs(c);
  const auto tiers = tertile_tiers(contrib, names);
  StatedTiers out;
  for (std::size_t i = 0; i < names.size(); ++i) out[names[i]] = std::string(to_string(tiers[i]));
  return out;
}

DecisionSet run_synthetic(const Dataset& dataset, const DesignMatrix& design, const SyntheticAgent& agent,
                          Condition condition, const GuidanceArtifact* guidance) {
  SyntheticAgentSpec spec = agent.spec;
  spec.validate();
  if (condition != Condition::baseline) {
    if (!guidance) {
      throw ValidationError("MissingGuidance", "condition " + std::string(to_string(condition)) + " needs guidance");
    }
    spec = steer(spec, *guidance, *design.encoding, dataset.schema());
  }
  if (spec.coefficients.size() != design.n_columns()) {
    throw ValidationError("DimensionMismatch", "agent has " + std::to_string(spec.coefficients.size()) +
                                                   " coefficients, design has " + std::to_string(design.n_columns()) +
                                                   " columns");
  }
  DecisionSet set;
  set.case_ids = dataset.case_ids();
  set.decisions.resize(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Eigen::VectorXd x = design.rows.row(static_cast<Eigen::Index>(i)).transpose();
    set.decisions[i] = synthetic_decide(spec, x, i);
    if (agent.emit_stated_tiers) set.stated_tiers.push_back(contribution_tiers(spec, x, *design.encoding));
  }
  return set;
}

DecisionSet run_replay(const Dataset& dataset, const ReplayAgent& agent, Condition condition,
                       const std::string& name) {
  auto it = agent.sets.find(condition);
  if (it == agent.sets.end()) {
    throw ValidationError("MissingReplay", "agent '" + name + "' has no replay file for condition " +
                                               std::string(to_string(condition)));
  }
  const DecisionSet& src = it->second;
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < src.size(); ++i) by_id.emplace(src.case_ids[i], i);
  DecisionSet set;
  for (const auto& r : dataset.records()) {
    auto f = by_id.find(r.case_id);
    if (f == by_id.end()) {
      throw ValidationError("MissingDecision", "replay for agent '" + name + "' lacks case '" + r.case_id + "'");
    }
    set.case_ids.push_back(r.case_id);
    set.decisions.push_back(src.decisions[f->second]);
    if (src.has_stated_tiers()) set.stated_tiers.push_back(src.stated_tiers[f->second]);
  }
  return set;
}

/// Child process with piped stdin/stdout; killed on destruction if still
/// running.
class ChildProcess {
 public:
  explicit ChildProcess(const std::string& command) {
    static const bool sigpipe_ignored = [] {
      ::signal(SIGPIPE, SIG_IGN);
      return true;
    }();
    (void)sigpipe_ignored;
    int in_pipe[2], out_pipe[2];
    if (::pipe(in_pipe) != 0) throw AgentError("SpawnFailed", std::string("pipe: ") + std::strerror(errno));
    if (::pipe(out_pipe) != 0) {
      ::close(in_pipe[0]);
      ::close(in_pipe[1]);
      throw AgentError("SpawnFailed", std::string("pipe: ") + std::strerror(errno));
    }
    pid_ = ::fork();
    if (pid_ < 0) throw AgentError("SpawnFailed", std::string("fork: ") + std::strerror(errno));
    if (pid_ == 0) {
      ::setpgid(0, 0);  // own group, so the shell's children die with it
      ::dup2(in_pipe[0], STDIN_FILENO);
      ::dup2(out_pipe[1], STDOUT_FILENO);
      ::close(in_pipe[0]);
      ::close(in_pipe[1]);
      ::close(out_pipe[0]);
      ::close(out_pipe[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::setpgid(pid_, pid_);
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
  }

  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  ~ChildProcess() {
    close_stdin();
    if (from_child_ >= 0) ::close(from_child_);
    if (pid_ > 0) {
      ::kill(-pid_, SIGKILL);
      if (!reaped_) ::waitpid(pid_, nullptr, 0);
    }
  }

  void write_line(const std::string& line) {
    std::string data = line + "\n";
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t w = ::write(to_child_, data.data() + off, data.size() - off);
      if (w < 0) {
        if (errno == EINTR) continue;
        throw AgentError("ProcessExited", "external agent closed its input");
      }
      off += static_cast<std::size_t>(w);
    }
  }

  std::string read_line(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      const auto left =
          std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now()).count();
      if (left <= 0) throw AgentError("Timeout", "external agent did not reply within " +
                                                     std::to_string(timeout.count()) + " ms");
      pollfd p{from_child_, POLLIN, 0};
      const int r = ::poll(&p, 1, static_cast<int>(left));
      if (r < 0) {
        if (errno == EINTR) continue;
        throw AgentError("ProtocolError", std::string("poll: ") + std::strerror(errno));
      }
      if (r == 0) continue;
      char chunk[4096];
      const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw AgentError("ProtocolError", std::string("read: ") + std::strerror(errno));
      }
      if (n == 0) throw AgentError("ProcessExited", "external agent exited before replying");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  void close_stdin() {
    if (to_child_ >= 0) {
      ::close(to_child_);
      to_child_ = -1;
    }
  }

  /// Waits up to `grace` for exit, then kills. Returns the exit status, or
  /// -1 when the process had to be killed or died by signal.
  int finish(std::chrono::milliseconds grace) {
    close_stdin();
    const auto deadline = std::chrono::steady_clock::now() + grace;
    int status = 0;
    while (std::chrono::steady_clock::now() < deadline) {
      const pid_t r = ::waitpid(pid_, &status, WNOHANG);
      if (r == pid_) {
        reaped_ = true;
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
      }
      ::usleep(2000);
    }
    ::kill(-pid_, SIGKILL);
    ::waitpid(pid_, nullptr, 0);
    reaped_ = true;
    return -1;
  }

 private:
  pid_t pid_ = -1;
  bool reaped_ = false;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

nlohmann::ordered_json cue_values_json(const CaseRecord& record, const CueSchema& schema) {
  nlohmann::ordered_json values = nlohmann::ordered_json::object();
  for (std::size_t c = 0; c < schema.size(); ++c) {
    const auto& v = record.cue_values[c];
    if (std::holds_alternative<double>(v)) {
      values[schema[c].name] = std::get<double>(v);
    } else {
      values[schema[c].name] = std::get<std::string>(v);
    }
  }
  return values;
}

DecisionSet run_external(const Dataset& dataset, const ExternalAgent& agent, Condition condition,
                         const std::string& name, const GuidanceArtifact* guidance) {
  if (agent.command.empty()) throw AgentError("SpawnFailed", "external agent '" + name + "' has no command");
  const CueSchema& schema = dataset.schema();
  ChildProcess child(agent.command);
  DecisionSet set;
  std::vector<std::optional<StatedTiers>> stated;
  for (const auto& record : dataset.records()) {
    nlohmann::ordered_json request;
    request["protocol"] = std::string(kAgentProtocol);
    request["case_id"] = record.case_id;
    request["condition"] = std::string(to_string(condition));
    request["cue_values"] = cue_values_json(record, schema);
    request["guidance"] = guidance ? nlohmann::ordered_json(guidance->body) : nlohmann::ordered_json(nullptr);
    request["labels"] = {{"positive", schema.positive_label()}, {"negative", schema.negative_label()}};
    child.write_line(request.dump());

    const std::string line = child.read_line(agent.timeout);
    const std::string where = "agent '" + name + "' reply for case '" + record.case_id + "'";
    nlohmann::json reply;
    try {
      reply = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw AgentError("MalformedReply", where + " is not JSON: " + line.substr(0, 200));
    }
    if (!reply.is_object() || !reply.contains("case_id") || !reply.contains("decision")) {
      throw AgentError("MalformedReply", where + " needs case_id and decision");
    }
    const std::string echoed = reply["case_id"].is_string() ? reply["case_id"].get<std::string>() : reply["case_id"].dump();
    if (echoed != record.case_id) {
      throw AgentError("CaseIdMismatch", where + " echoed case_id '" + echoed + "'");
    }
    set.case_ids.push_back(record.case_id);
    set.decisions.push_back(parse_decision_value(reply["decision"], schema, where, ErrorCategory::agent));
    if (reply.contains("stated_tiers") && !reply["stated_tiers"].is_null()) {
      try {
        stated.push_back(parse_stated(reply["stated_tiers"], where, ErrorCategory::agent));
      } catch (const ValidationError& e) {
        throw AgentError("MalformedReply", where + ": " + e.what());
      }
    } else {
      stated.emplace_back();
    }
  }
  const int status = child.finish(std::chrono::milliseconds(2000));
  if (status != 0) logger().warn("external agent '{}' finished with status {}", name, status);
  if (std::any_of(stated.begin(), stated.end(), [](const auto& s) { return s.has_value(); })) {
    for (auto& s : stated) set.stated_tiers.push_back(s.value_or(StatedTiers{}));
  }
  return set;
}

}  // namespace

DecisionSet run_agent(const Dataset& dataset, const DesignMatrix& design, const Agent& agent, Condition condition,
                      const std::string& name, const GuidanceArtifact* guidance) {
  if (design.case_ids.size() != dataset.size()) {
    throw ValidationError("CaseMismatch", "design and dataset cover different cases");
  }
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (design.case_ids[i] != dataset[i].case_id) {
      throw ValidationError("CaseMismatch", "design row " + std::to_string(i) + " is case '" + design.case_ids[i] +
                                                "', dataset has '" + dataset[i].case_id + "'");
    }
  }
  DecisionSet set = std::visit(
      [&](const auto& a) -> DecisionSet {
        using T = std::decay_t<decltype(a)>;
        if constexpr (std::is_same_v<T, SyntheticAgent>) {
          return run_synthetic(dataset, design, a, condition, guidance);
        } else if constexpr (std::is_same_v<T, ReplayAgent>) {
          return run_replay(dataset, a, condition, name);
        } else {
          return run_external(dataset, a, condition, name, guidance);
        }
      },
      agent);
  set.agent = name;
  set.condition = condition;
  return set;
}

}  // namespace calm
