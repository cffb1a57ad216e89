#pragma once

// Shared domain types for the generation/refinement harness. Everything here
// is an immutable value with validation and canonical JSON serialization;
// behavior lives in the other headers.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "solharness/glob.hpp"

namespace solharness {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class ValidationError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Chat messages

enum class Role { system, user, assistant, tool };

inline std::string to_string(Role r) {
    switch (r) {
        case Role::system: return "system";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
        case Role::tool: return "tool";
    }
    throw Error("invalid role enum value");
}

inline Role role_from_string(const std::string& s) {
    if (s == "system") return Role::system;
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    if (s == "tool") return Role::tool;
    throw ValidationError("unknown role: " + s);
}

struct ToolCall {
    std::string id;
    std::string tool_name;
    json arguments = json::object();  // order-independent map

    friend bool operator==(const ToolCall&, const ToolCall&) = default;
};

struct Message {
    Role role = Role::user;
    std::string content;
    std::vector<ToolCall> tool_calls;            // only meaningful on assistant
    std::optional<std::string> tool_call_id;     // required iff role == tool
    // Run-internal annotations (round tags, phase markers). Stripped by the
    // dataset cleaning pass; never part of exported training samples.
    std::map<std::string, std::string> metadata;

    friend bool operator==(const Message&, const Message&) = default;
};

inline Message make_message(Role role, std::string content) {
    Message m;
    m.role = role;
    m.content = std::move(content);
    return m;
}

// Tool messages must reference a tool_call id of a preceding assistant
// message, and tool_call ids must be unique. Single forward pass.
inline void validate_transcript(const std::vector<Message>& transcript) {
    std::set<std::string> known_ids;
    for (std::size_t i = 0; i < transcript.size(); ++i) {
        const Message& m = transcript[i];
        for (const ToolCall& tc : m.tool_calls) {
            if (!known_ids.insert(tc.id).second) {
                throw ValidationError("duplicate tool_call id '" + tc.id + "' at message " + std::to_string(i));
            }
        }
        if (m.role == Role::tool) {
            if (!m.tool_call_id) {
                throw ValidationError("tool message without tool_call_id at index " + std::to_string(i));
            }
            if (!known_ids.contains(*m.tool_call_id)) {
                throw ValidationError("tool message references unknown tool_call id '" + *m.tool_call_id + "'");
            }
        } else if (m.tool_call_id) {
            throw ValidationError("tool_call_id set on non-tool message at index " + std::to_string(i));
        }
    }
}

inline bool transcript_valid(const std::vector<Message>& transcript) {
    try {
        validate_transcript(transcript);
        return true;
    } catch (const ValidationError&) {
        return false;
    }
}

// ---------------------------------------------------------------------------
// Benchmark tasks

struct BenchmarkTask {
    std::string task_id;
    std::filesystem::path repo_root;
    std::filesystem::path target_file;           // repo-relative
    std::string requirement_full;
    std::optional<std::string> requirement_summary;
    std::string test_suite_filter;               // passed to the test runner
    std::vector<std::string> deny_patterns;      // globs the agent may never read
    std::map<std::string, std::string> metadata;
};

// ---------------------------------------------------------------------------
// Verifier feedback

struct ForgeFailure {
    std::string test_name;
    std::string assertion_message;
    std::string trace_excerpt;

    friend bool operator==(const ForgeFailure&, const ForgeFailure&) = default;
};

struct ForgeFeedback {
    bool compiled = false;
    int total_tests = 0;
    int passed_tests = 0;
    std::vector<ForgeFailure> failures;
    std::map<std::string, std::uint64_t> gas_by_test;  // all executed tests

    friend bool operator==(const ForgeFeedback&, const ForgeFeedback&) = default;
};

enum class Severity { High, Medium, Low };

inline std::string to_string(Severity s) {
    switch (s) {
        case Severity::High: return "High";
        case Severity::Medium: return "Medium";
        case Severity::Low: return "Low";
    }
    throw Error("invalid severity enum value");
}

// Returns nullopt for severities outside the three buckets
// (Informational/Optimization are dropped before findings are built).
inline std::optional<Severity> severity_from_string(const std::string& s) {
    if (s == "High") return Severity::High;
    if (s == "Medium") return Severity::Medium;
    if (s == "Low") return Severity::Low;
    return std::nullopt;
}

struct SourceLocation {
    std::string file;
    int line = 1;

    friend bool operator==(const SourceLocation&, const SourceLocation&) = default;
};

struct SlitherFinding {
    std::string detector_id;
    Severity severity = Severity::Low;
    std::string description;
    SourceLocation location;

    friend bool operator==(const SlitherFinding&, const SlitherFinding&) = default;
};

inline bool finding_order(const SlitherFinding& a, const SlitherFinding& b) {
    if (a.location.file != b.location.file) return a.location.file < b.location.file;
    if (a.location.line != b.location.line) return a.location.line < b.location.line;
    return a.detector_id < b.detector_id;
}

struct FeedbackReport {
    int round = 0;
    ForgeFeedback forge;
    std::vector<SlitherFinding> findings;  // sorted by (file, line, detector_id)
    std::string rendered_text;             // deterministic function of (forge, findings)

    friend bool operator==(const FeedbackReport&, const FeedbackReport&) = default;

    double pass_rate() const {
        if (forge.total_tests <= 0) return 0.0;
        return static_cast<double>(forge.passed_tests) / forge.total_tests;
    }

    int severity_count(Severity s) const {
        int n = 0;
        for (const auto& f : findings) {
            if (f.severity == s) ++n;
        }
        return n;
    }
};

// ---------------------------------------------------------------------------
// Candidate scoring

// Ordered lexicographically: compiled desc, pass_rate desc, then High,
// Medium, Low counts ascending, then average gas ascending with absent
// treated as +infinity. Correctness first, security next, gas last.
struct Score {
    bool compiled = false;
    double pass_rate = 0.0;  // 0 when the suite is empty
    int high = 0;
    int medium = 0;
    int low = 0;
    std::optional<double> avg_gas_passed;

    friend bool operator==(const Score&, const Score&) = default;
};

// Three-way comparison; +1 means a is the better score.
inline int compare(const Score& a, const Score& b) {
    if (a.compiled != b.compiled) return a.compiled ? 1 : -1;
    if (a.pass_rate != b.pass_rate) return a.pass_rate > b.pass_rate ? 1 : -1;
    if (a.high != b.high) return a.high < b.high ? 1 : -1;
    if (a.medium != b.medium) return a.medium < b.medium ? 1 : -1;
    if (a.low != b.low) return a.low < b.low ? 1 : -1;
    const double ga = a.avg_gas_passed.value_or(std::numeric_limits<double>::infinity());
    const double gb = b.avg_gas_passed.value_or(std::numeric_limits<double>::infinity());
    if (ga != gb) return ga < gb ? 1 : -1;
    return 0;
}

inline bool better(const Score& a, const Score& b) { return compare(a, b) > 0; }

inline Score score_from_report(const FeedbackReport& report) {
    Score s;
    s.compiled = report.forge.compiled;
    s.pass_rate = report.pass_rate();
    s.high = report.severity_count(Severity::High);
    s.medium = report.severity_count(Severity::Medium);
    s.low = report.severity_count(Severity::Low);
    // Average gas over passed tests only.
    std::set<std::string> failed;
    for (const auto& f : report.forge.failures) failed.insert(f.test_name);
    std::uint64_t total = 0;
    int n = 0;
    for (const auto& [name, gas] : report.forge.gas_by_test) {
        if (!failed.contains(name)) {
            total += gas;
            ++n;
        }
    }
    if (n > 0) s.avg_gas_passed = static_cast<double>(total) / n;
    return s;
}

struct Candidate {
    int round = 0;
    std::string code;                 // exact file content written that round
    std::optional<Score> score;       // known once the candidate is verified

    friend bool operator==(const Candidate&, const Candidate&) = default;
};

// ---------------------------------------------------------------------------
// Token accounting

enum class Phase { coding, refine };

inline std::string to_string(Phase p) {
    return p == Phase::coding ? "coding" : "refine";
}

inline Phase phase_from_string(const std::string& s) {
    if (s == "coding") return Phase::coding;
    if (s == "refine") return Phase::refine;
    throw ValidationError("unknown phase: " + s);
}

struct TokenUsage {
    Phase phase = Phase::coding;
    int round = 0;  // coding only at round 0; refine rounds are >= 1
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;

    friend bool operator==(const TokenUsage&, const TokenUsage&) = default;
};

// ---------------------------------------------------------------------------
// Termination

enum class TerminationKind {
    success,
    stagnation,
    oscillation,
    max_rounds,
    token_budget,
    wall_clock,
    tool_failure_cap,
    llm_error,
    code_hash_repeat,
    empty_output,
    operator_stop,
};

inline std::string to_string(TerminationKind k) {
    switch (k) {
        case TerminationKind::success: return "success";
        case TerminationKind::stagnation: return "stagnation";
        case TerminationKind::oscillation: return "oscillation";
        case TerminationKind::max_rounds: return "max_rounds";
        case TerminationKind::token_budget: return "token_budget";
        case TerminationKind::wall_clock: return "wall_clock";
        case TerminationKind::tool_failure_cap: return "tool_failure_cap";
        case TerminationKind::llm_error: return "llm_error";
        case TerminationKind::code_hash_repeat: return "code_hash_repeat";
        case TerminationKind::empty_output: return "empty_output";
        case TerminationKind::operator_stop: return "operator_stop";
    }
    throw Error("invalid termination kind");
}

inline TerminationKind termination_kind_from_string(const std::string& s) {
    static const std::map<std::string, TerminationKind> table = {
        {"success", TerminationKind::success},
        {"stagnation", TerminationKind::stagnation},
        {"oscillation", TerminationKind::oscillation},
        {"max_rounds", TerminationKind::max_rounds},
        {"token_budget", TerminationKind::token_budget},
        {"wall_clock", TerminationKind::wall_clock},
        {"tool_failure_cap", TerminationKind::tool_failure_cap},
        {"llm_error", TerminationKind::llm_error},
        {"code_hash_repeat", TerminationKind::code_hash_repeat},
        {"empty_output", TerminationKind::empty_output},
        {"operator_stop", TerminationKind::operator_stop},
    };
    auto it = table.find(s);
    if (it == table.end()) throw ValidationError("unknown termination kind: " + s);
    return it->second;
}

struct TerminationReason {
    TerminationKind kind = TerminationKind::operator_stop;
    std::string detail;

    friend bool operator==(const TerminationReason&, const TerminationReason&) = default;
};

// ---------------------------------------------------------------------------
// Run state

struct RunState {
    std::string task_id;
    int round = 0;  // last completed round
    std::vector<Message> transcript;
    std::optional<Candidate> best;
    std::vector<Candidate> candidates;  // one per round, in order
    std::vector<FeedbackReport> history;
    std::vector<TokenUsage> usage;
    std::optional<TerminationReason> terminated;
    bool summary_mode = false;  // seeded with requirement_summary instead of requirement_full
    int tool_failures = 0;
    int schema_version = kSchemaVersion;

    friend bool operator==(const RunState&, const RunState&) = default;

    std::int64_t total_tokens() const {
        std::int64_t n = 0;
        for (const auto& u : usage) n += u.prompt_tokens + u.completion_tokens;
        return n;
    }
};

// ---------------------------------------------------------------------------
// Trajectory samples

struct TrajectorySample {
    std::vector<Message> messages;
    std::string task_id;
    int round = 0;
    std::set<std::string> variant_tags;  // e.g. {"origin:full"} or {"origin:summary"}

    friend bool operator==(const TrajectorySample&, const TrajectorySample&) = default;
};

// ---------------------------------------------------------------------------
// Source metrics

struct FunctionComplexity {
    std::string name;
    int complexity = 1;  // 1 + decision tokens; branchless functions score 1

    friend bool operator==(const FunctionComplexity&, const FunctionComplexity&) = default;
};

struct SourceMetrics {
    int loc = 0;   // lines that are neither blank nor comment-only
    int ploc = 0;  // physical lines, all of them
    std::vector<FunctionComplexity> functions;
    int file_complexity = 0;  // sum over functions + (1 + top-level decision tokens)

    friend bool operator==(const SourceMetrics&, const SourceMetrics&) = default;
};

// ---------------------------------------------------------------------------
// JSON serialization (canonical: object keys are emitted sorted, optional
// fields are omitted when absent)

inline void to_json(json& j, const ToolCall& tc) {
    j = json{{"id", tc.id}, {"tool_name", tc.tool_name}, {"arguments", tc.arguments}};
}

inline void from_json(const json& j, ToolCall& tc) {
    j.at("id").get_to(tc.id);
    j.at("tool_name").get_to(tc.tool_name);
    tc.arguments = j.value("arguments", json::object());
}

inline void to_json(json& j, const Message& m) {
    j = json{{"role", to_string(m.role)}, {"content", m.content}};
    if (!m.tool_calls.empty()) j["tool_calls"] = m.tool_calls;
    if (m.tool_call_id) j["tool_call_id"] = *m.tool_call_id;
    if (!m.metadata.empty()) j["metadata"] = m.metadata;
}

inline void from_json(const json& j, Message& m) {
    m.role = role_from_string(j.at("role").get<std::string>());
    j.at("content").get_to(m.content);
    m.tool_calls = j.contains("tool_calls") ? j.at("tool_calls").get<std::vector<ToolCall>>()
                                            : std::vector<ToolCall>{};
    m.tool_call_id = j.contains("tool_call_id")
                         ? std::optional<std::string>(j.at("tool_call_id").get<std::string>())
                         : std::nullopt;
    m.metadata = j.contains("metadata") ? j.at("metadata").get<std::map<std::string, std::string>>()
                                        : std::map<std::string, std::string>{};
}

inline void to_json(json& j, const BenchmarkTask& t) {
    j = json{{"task_id", t.task_id},
             {"repo_root", t.repo_root.string()},
             {"target_file", t.target_file.string()},
             {"requirement_full", t.requirement_full},
             {"test_suite_filter", t.test_suite_filter},
             {"deny_patterns", t.deny_patterns},
             {"metadata", t.metadata}};
    if (t.requirement_summary) j["requirement_summary"] = *t.requirement_summary;
}

inline void from_json(const json& j, BenchmarkTask& t) {
    j.at("task_id").get_to(t.task_id);
    t.repo_root = j.at("repo_root").get<std::string>();
    t.target_file = j.at("target_file").get<std::string>();
    j.at("requirement_full").get_to(t.requirement_full);
    t.requirement_summary =
        j.contains("requirement_summary") && !j.at("requirement_summary").is_null()
            ? std::optional<std::string>(j.at("requirement_summary").get<std::string>())
            : std::nullopt;
    t.test_suite_filter = j.value("test_suite_filter", std::string{});
    t.deny_patterns = j.value("deny_patterns", std::vector<std::string>{});
    t.metadata = j.value("metadata", std::map<std::string, std::string>{});
}

inline void to_json(json& j, const ForgeFailure& f) {
    j = json{{"test_name", f.test_name},
             {"assertion_message", f.assertion_message},
             {"trace_excerpt", f.trace_excerpt}};
}

inline void from_json(const json& j, ForgeFailure& f) {
    j.at("test_name").get_to(f.test_name);
    f.assertion_message = j.value("assertion_message", std::string{});
    f.trace_excerpt = j.value("trace_excerpt", std::string{});
}

inline void to_json(json& j, const ForgeFeedback& f) {
    j = json{{"compiled", f.compiled},
             {"total_tests", f.total_tests},
             {"passed_tests", f.passed_tests},
             {"failures", f.failures},
             {"gas_by_test", f.gas_by_test}};
}

inline void from_json(const json& j, ForgeFeedback& f) {
    j.at("compiled").get_to(f.compiled);
    j.at("total_tests").get_to(f.total_tests);
    j.at("passed_tests").get_to(f.passed_tests);
    f.failures = j.value("failures", std::vector<ForgeFailure>{});
    f.gas_by_test = j.value("gas_by_test", std::map<std::string, std::uint64_t>{});
}

inline void to_json(json& j, const SlitherFinding& f) {
    j = json{{"detector_id", f.detector_id},
             {"severity", to_string(f.severity)},
             {"description", f.description},
             {"file", f.location.file},
             {"line", f.location.line}};
}

inline void from_json(const json& j, SlitherFinding& f) {
    j.at("detector_id").get_to(f.detector_id);
    auto sev = severity_from_string(j.at("severity").get<std::string>());
    if (!sev) throw ValidationError("severity outside High/Medium/Low: " + j.at("severity").dump());
    f.severity = *sev;
    f.description = j.value("description", std::string{});
    f.location.file = j.value("file", std::string{});
    f.location.line = j.value("line", 1);
}

inline void to_json(json& j, const FeedbackReport& r) {
    j = json{{"round", r.round},
             {"forge", r.forge},
             {"findings", r.findings},
             {"rendered_text", r.rendered_text}};
}

inline void from_json(const json& j, FeedbackReport& r) {
    j.at("round").get_to(r.round);
    j.at("forge").get_to(r.forge);
    r.findings = j.value("findings", std::vector<SlitherFinding>{});
    r.rendered_text = j.value("rendered_text", std::string{});
}

inline void to_json(json& j, const Score& s) {
    j = json{{"compiled", s.compiled},
             {"pass_rate", s.pass_rate},
             {"high", s.high},
             {"medium", s.medium},
             {"low", s.low}};
    if (s.avg_gas_passed) j["avg_gas_passed"] = *s.avg_gas_passed;
}

inline void from_json(const json& j, Score& s) {
    j.at("compiled").get_to(s.compiled);
    j.at("pass_rate").get_to(s.pass_rate);
    j.at("high").get_to(s.high);
    j.at("medium").get_to(s.medium);
    j.at("low").get_to(s.low);
    s.avg_gas_passed = j.contains("avg_gas_passed")
                           ? std::optional<double>(j.at("avg_gas_passed").get<double>())
                           : std::nullopt;
}

inline void to_json(json& j, const Candidate& c) {
    j = json{{"round", c.round}, {"code", c.code}};
    if (c.score) j["score"] = *c.score;
}

inline void from_json(const json& j, Candidate& c) {
    j.at("round").get_to(c.round);
    j.at("code").get_to(c.code);
    c.score = j.contains("score") ? std::optional<Score>(j.at("score").get<Score>()) : std::nullopt;
}

inline void to_json(json& j, const TokenUsage& u) {
    j = json{{"phase", to_string(u.phase)},
             {"round", u.round},
             {"prompt_tokens", u.prompt_tokens},
             {"completion_tokens", u.completion_tokens}};
}

inline void from_json(const json& j, TokenUsage& u) {
    u.phase = phase_from_string(j.at("phase").get<std::string>());
    j.at("round").get_to(u.round);
    j.at("prompt_tokens").get_to(u.prompt_tokens);
    j.at("completion_tokens").get_to(u.completion_tokens);
}

inline void to_json(json& j, const TerminationReason& t) {
    j = json{{"kind", to_string(t.kind)}, {"detail", t.detail}};
}

inline void from_json(const json& j, TerminationReason& t) {
    t.kind = termination_kind_from_string(j.at("kind").get<std::string>());
    t.detail = j.value("detail", std::string{});
}

inline void to_json(json& j, const RunState& s) {
    j = json{{"schema_version", s.schema_version},
             {"task_id", s.task_id},
             {"round", s.round},
             {"transcript", s.transcript},
             {"candidates", s.candidates},
             {"history", s.history},
             {"usage", s.usage},
             {"summary_mode", s.summary_mode},
             {"tool_failures", s.tool_failures}};
    if (s.best) j["best"] = *s.best;
    if (s.terminated) j["terminated"] = *s.terminated;
}

inline void from_json(const json& j, RunState& s) {
    j.at("schema_version").get_to(s.schema_version);
    j.at("task_id").get_to(s.task_id);
    j.at("round").get_to(s.round);
    j.at("transcript").get_to(s.transcript);
    s.candidates = j.value("candidates", std::vector<Candidate>{});
    s.history = j.value("history", std::vector<FeedbackReport>{});
    s.usage = j.value("usage", std::vector<TokenUsage>{});
    s.best = j.contains("best") ? std::optional<Candidate>(j.at("best").get<Candidate>())
                                : std::nullopt;
    s.terminated = j.contains("terminated")
                       ? std::optional<TerminationReason>(j.at("terminated").get<TerminationReason>())
                       : std::nullopt;
    s.summary_mode = j.value("summary_mode", false);
    s.tool_failures = j.value("tool_failures", 0);
}

inline void to_json(json& j, const TrajectorySample& s) {
    j = json{{"messages", s.messages},
             {"task_id", s.task_id},
             {"round", s.round},
             {"variant_tags", s.variant_tags}};
}

inline void from_json(const json& j, TrajectorySample& s) {
    j.at("messages").get_to(s.messages);
    j.at("task_id").get_to(s.task_id);
    j.at("round").get_to(s.round);
    s.variant_tags = j.value("variant_tags", std::set<std::string>{});
}

inline void to_json(json& j, const FunctionComplexity& f) {
    j = json{{"name", f.name}, {"complexity", f.complexity}};
}

inline void from_json(const json& j, FunctionComplexity& f) {
    j.at("name").get_to(f.name);
    j.at("complexity").get_to(f.complexity);
}

inline void to_json(json& j, const SourceMetrics& m) {
    j = json{{"loc", m.loc},
             {"ploc", m.ploc},
             {"functions", m.functions},
             {"file_complexity", m.file_complexity}};
}

inline void from_json(const json& j, SourceMetrics& m) {
    j.at("loc").get_to(m.loc);
    j.at("ploc").get_to(m.ploc);
    m.functions = j.value("functions", std::vector<FunctionComplexity>{});
    j.at("file_complexity").get_to(m.file_complexity);
}

// ---------------------------------------------------------------------------
// Task validation

// Lexical containment check: does `child` stay under `base` once normalized?
inline bool path_under(const std::filesystem::path& base, const std::filesystem::path& child) {
    auto b = base.lexically_normal();
    auto c = child.lexically_normal();
    auto bi = b.begin(), ci = c.begin();
    for (; bi != b.end(); ++bi, ++ci) {
        if (bi->empty() || *bi == ".") continue;  // trailing slash artifacts
        if (ci == c.end() || *ci != *bi) return false;
    }
    return true;
}

inline bool matches_any(const std::vector<std::string>& patterns, const std::string& path) {
    for (const auto& p : patterns) {
        if (glob_match(p, path)) return true;
    }
    return false;
}

inline void validate_task(const BenchmarkTask& task) {
    if (task.task_id.empty()) throw ValidationError("task_id is empty");
    if (task.requirement_full.empty()) {
        throw ValidationError("task " + task.task_id + ": requirement_full is empty");
    }
    const auto target = task.target_file.lexically_normal();
    if (target.is_absolute() ||
        !path_under(task.repo_root, task.repo_root / task.target_file)) {
        throw ValidationError("task " + task.task_id + ": target_file escapes repo_root: " +
                              task.target_file.string());
    }

    // The deny set must cover the paths the agent may never read: the test
    // suite and, when declared, the reference solution.
    std::vector<std::string> probes;
    std::error_code ec;
    const auto test_dir = task.repo_root / "test";
    if (std::filesystem::is_directory(test_dir, ec)) {
        for (const auto& entry :
             std::filesystem::recursive_directory_iterator(test_dir, ec)) {
            if (entry.is_regular_file(ec)) {
                probes.push_back(
                    entry.path().lexically_relative(task.repo_root).generic_string());
            }
        }
    }
    if (probes.empty()) probes.push_back("test/Probe.t.sol");
    if (auto it = task.metadata.find("reference_solution"); it != task.metadata.end()) {
        probes.push_back(it->second);
    }
    for (const auto& probe : probes) {
        if (!matches_any(task.deny_patterns, probe)) {
            throw ValidationError("task " + task.task_id +
                                  ": deny_patterns do not cover '" + probe + "'");
        }
    }
}

}  // namespace solharness
