#pragma once

// The heart of the system: the coding round, the tool-augmented refinement
// loop with its stopping conditions, best-candidate tracking, transcript
// pruning, and atomic checkpoint/resume.
//
// Loop shape: the coding round produces candidate C_0; refinement iteration t
// verifies C_{t-1}, aggregates feedback, breaks on perfect / stagnant /
// looping feedback, and otherwise asks the refining agent for C_t (letting it
// call sandboxed tools along the way). The best candidate is replaced only on
// a strictly better score, so late regressions never lose earlier wins.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "solharness/analysis.hpp"
#include "solharness/llm.hpp"
#include "solharness/model.hpp"
#include "solharness/toolbox.hpp"
#include "solharness/verify.hpp"

namespace solharness {

// ---------------------------------------------------------------------------
// Configuration

enum class SelectionPolicy { best_score, min_vuln };

inline std::string to_string(SelectionPolicy p) {
    return p == SelectionPolicy::best_score ? "best_score" : "min_vuln";
}

inline SelectionPolicy selection_policy_from_string(const std::string& s) {
    if (s == "best_score") return SelectionPolicy::best_score;
    if (s == "min_vuln") return SelectionPolicy::min_vuln;
    throw ValidationError("unknown selection policy: " + s);
}

inline constexpr const char* kDefaultCodingSystemPrompt =
    "You are a senior Solidity engineer. Implement the requested contract completely and "
    "securely. Reply with the full contents of the target file in a single fenced code "
    "block.";

inline constexpr const char* kDefaultRefineInstruction =
    "Fix the issues reported above. You may call the available tools to inspect the "
    "repository before answering. When ready, reply with the complete revised file in a "
    "single fenced code block.";

struct LoopConfig {
    int max_rounds = 50;
    int stagnation_n = 2;
    double similarity_tau = 0.9;
    std::optional<std::int64_t> token_budget;
    std::optional<std::chrono::milliseconds> wall_clock_budget;
    int tool_failure_cap = 3;
    int prune_keep_rounds = 2;
    SelectionPolicy selection_policy = SelectionPolicy::best_score;
    int tool_call_cap = 10;  // per refinement round
    std::string coding_system_prompt = kDefaultCodingSystemPrompt;
    std::string refine_instruction = kDefaultRefineInstruction;
};

inline void validate_loop_config(const LoopConfig& c) {
    if (c.max_rounds <= 0) throw ValidationError("max_rounds must be positive");
    if (c.stagnation_n <= 0) throw ValidationError("stagnation_n must be positive");
    if (!(c.similarity_tau > 0.0 && c.similarity_tau <= 1.0)) {
        throw ValidationError("similarity_tau must lie in (0, 1]");
    }
    if (c.token_budget && *c.token_budget < 0) {
        throw ValidationError("token_budget must be nonnegative");
    }
    if (c.tool_failure_cap <= 0) throw ValidationError("tool_failure_cap must be positive");
    if (c.prune_keep_rounds <= 0) throw ValidationError("prune_keep_rounds must be positive");
    if (c.tool_call_cap <= 0) throw ValidationError("tool_call_cap must be positive");
}

inline void to_json(json& j, const LoopConfig& c) {
    j = json{{"max_rounds", c.max_rounds},
             {"stagnation_n", c.stagnation_n},
             {"similarity_tau", c.similarity_tau},
             {"tool_failure_cap", c.tool_failure_cap},
             {"prune_keep_rounds", c.prune_keep_rounds},
             {"selection_policy", to_string(c.selection_policy)},
             {"tool_call_cap", c.tool_call_cap},
             {"coding_system_prompt", c.coding_system_prompt},
             {"refine_instruction", c.refine_instruction}};
    if (c.token_budget) j["token_budget"] = *c.token_budget;
    if (c.wall_clock_budget) j["wall_clock_budget_ms"] = c.wall_clock_budget->count();
}

inline void from_json(const json& j, LoopConfig& c) {
    const LoopConfig defaults;
    c.max_rounds = j.value("max_rounds", defaults.max_rounds);
    c.stagnation_n = j.value("stagnation_n", defaults.stagnation_n);
    c.similarity_tau = j.value("similarity_tau", defaults.similarity_tau);
    c.tool_failure_cap = j.value("tool_failure_cap", defaults.tool_failure_cap);
    c.prune_keep_rounds = j.value("prune_keep_rounds", defaults.prune_keep_rounds);
    c.selection_policy = selection_policy_from_string(
        j.value("selection_policy", to_string(defaults.selection_policy)));
    c.tool_call_cap = j.value("tool_call_cap", defaults.tool_call_cap);
    c.coding_system_prompt = j.value("coding_system_prompt", defaults.coding_system_prompt);
    c.refine_instruction = j.value("refine_instruction", defaults.refine_instruction);
    c.token_budget = j.contains("token_budget")
                         ? std::optional<std::int64_t>(j.at("token_budget").get<std::int64_t>())
                         : std::nullopt;
    c.wall_clock_budget =
        j.contains("wall_clock_budget_ms")
            ? std::optional<std::chrono::milliseconds>(
                  std::chrono::milliseconds(j.at("wall_clock_budget_ms").get<std::int64_t>()))
            : std::nullopt;
}

// ---------------------------------------------------------------------------
// Stopping conditions

inline bool is_perfect(const FeedbackReport& report) {
    return report.forge.compiled && report.forge.total_tests > 0 &&
           report.forge.passed_tests == report.forge.total_tests &&
           report.severity_count(Severity::High) == 0;
}

// No strict improvement over the best-seen pass rate in the last n rounds.
// Comparing against the running maximum (not just the previous round) keeps
// an A/B/A pass-rate oscillation from resetting the counter.
inline bool is_stagnant(const std::vector<FeedbackReport>& history, int n) {
    if (n <= 0) throw ValidationError("stagnation window must be positive");
    if (history.size() < static_cast<std::size_t>(n) + 1) return false;
    std::vector<double> prefix_max(history.size());
    prefix_max[0] = history[0].pass_rate();
    for (std::size_t i = 1; i < history.size(); ++i) {
        prefix_max[i] = std::max(prefix_max[i - 1], history[i].pass_rate());
    }
    for (std::size_t k = history.size() - static_cast<std::size_t>(n); k < history.size(); ++k) {
        if (history[k].pass_rate() > prefix_max[k - 1]) return false;
    }
    return true;
}

inline bool is_looping(const FeedbackReport& current, const FeedbackReport& previous,
                       double tau) {
    return sequence_match_ratio(current.rendered_text, previous.rendered_text) > tau;
}

// ---------------------------------------------------------------------------
// Code extraction

class NoCodeBlockError : public Error {
public:
    using Error::Error;
};

// Last complete fenced block wins: refining agents commonly restate the old
// code before giving the fix. An unterminated fence is ignored.
inline std::optional<std::string> extract_last_code_block(const std::string& text) {
    std::optional<std::string> last;
    std::string current;
    bool in_block = false;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t eol = std::min(text.find('\n', pos), text.size());
        std::string_view line(text.data() + pos, eol - pos);
        std::string_view trimmed = line;
        while (!trimmed.empty() && (trimmed.front() == ' ' || trimmed.front() == '\t')) {
            trimmed.remove_prefix(1);
        }
        if (trimmed.substr(0, 3) == "```") {
            if (in_block) {
                last = current;
                in_block = false;
            } else {
                in_block = true;
                current.clear();
            }
        } else if (in_block) {
            current.append(line);
            current.push_back('\n');
        }
        if (eol == text.size()) break;
        pos = eol + 1;
    }
    return last;
}

// ---------------------------------------------------------------------------
// Best-candidate tracking and final selection

inline void update_best(RunState& state, const Candidate& cand) {
    if (!cand.score) throw ValidationError("update_best requires a scored candidate");
    if (!state.best || !state.best->score || better(*cand.score, *state.best->score)) {
        state.best = cand;
    }
}

inline Candidate select_candidate(const RunState& state, SelectionPolicy policy) {
    if (policy == SelectionPolicy::min_vuln) {
        const Candidate* chosen = nullptr;
        for (const auto& c : state.candidates) {
            if (!c.score || !c.score->compiled) continue;
            if (chosen == nullptr) {
                chosen = &c;
                continue;
            }
            const Score& a = *c.score;
            const Score& b = *chosen->score;
            const auto key_a = std::tuple(a.high, a.medium, a.low, -a.pass_rate, c.round);
            const auto key_b = std::tuple(b.high, b.medium, b.low, -b.pass_rate, chosen->round);
            if (key_a < key_b) chosen = &c;
        }
        if (chosen != nullptr) return *chosen;
        // No compiled candidate: fall through to best_score.
    }
    if (!state.best) throw ValidationError("select_candidate requires at least one scored candidate");
    return *state.best;
}

// ---------------------------------------------------------------------------
// Transcript pruning
//
// Applied to the prompt sent to the model each round, never to the stored
// transcript — checkpoints and exported trajectories keep full fidelity.
// Protected messages: system messages, the first user message (the
// requirement), and everything in the last prune_keep_rounds rounds. Older
// tool outputs collapse to a one-line placeholder; older feedback messages
// shrink to their headline and pass-ratio lines. Assistant messages (and
// their tool_call structures) are never altered, so referential integrity
// is preserved.

inline std::vector<Message> prune_messages(const std::vector<Message>& transcript,
                                           const LoopConfig& cfg) {
    // Round boundaries: every user message after the first starts a round.
    std::vector<std::size_t> boundaries;
    bool seen_first_user = false;
    for (std::size_t i = 0; i < transcript.size(); ++i) {
        if (transcript[i].role == Role::user) {
            if (seen_first_user) {
                boundaries.push_back(i);
            } else {
                seen_first_user = true;
            }
        }
    }
    const std::size_t rounds = boundaries.size();
    const std::size_t keep =
        std::min<std::size_t>(rounds, static_cast<std::size_t>(cfg.prune_keep_rounds));
    const std::size_t protected_from =
        keep == 0 ? transcript.size() : boundaries[rounds - keep];

    std::map<std::string, std::string> call_names;
    for (const auto& m : transcript) {
        for (const auto& tc : m.tool_calls) call_names[tc.id] = tc.tool_name;
    }

    std::vector<Message> out;
    out.reserve(transcript.size());
    bool first_user_kept = false;
    for (std::size_t i = 0; i < transcript.size(); ++i) {
        const Message& m = transcript[i];
        const bool is_first_user = m.role == Role::user && !first_user_kept;
        if (m.role == Role::user) first_user_kept = true;
        if (i >= protected_from || m.role == Role::system || m.role == Role::assistant ||
            is_first_user) {
            out.push_back(m);
            continue;
        }
        Message pruned = m;
        if (m.role == Role::tool) {
            std::string name = "unknown";
            if (m.tool_call_id) {
                auto it = call_names.find(*m.tool_call_id);
                if (it != call_names.end()) name = it->second;
            }
            pruned.content = "[pruned tool output: " + name + ", " +
                             std::to_string(count_tokens(m.content)) + " tokens]";
        } else {  // older feedback user message
            const std::size_t first_eol = std::min(m.content.find('\n'), m.content.size());
            std::string summary = m.content.substr(0, first_eol);
            const auto tests_pos = m.content.find("Tests passed:");
            if (tests_pos != std::string::npos) {
                const std::size_t tests_eol =
                    std::min(m.content.find('\n', tests_pos), m.content.size());
                summary += "\n" + m.content.substr(tests_pos, tests_eol - tests_pos);
            }
            pruned.content = summary;
        }
        out.push_back(std::move(pruned));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointVersionError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void atomic_write(const std::filesystem::path& target, const std::string& payload) {
    namespace fs = std::filesystem;
    fs::create_directories(target.parent_path());
    const fs::path tmp = target.parent_path() / ("." + target.filename().string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write checkpoint temp file: " + tmp.string());
        out << payload;
        out.flush();
        if (!out) throw Error("short write on checkpoint temp file: " + tmp.string());
    }
    fs::rename(tmp, target);
}

inline std::optional<RunState> try_load_state_file(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) return std::nullopt;
    json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) return std::nullopt;  // corrupt: caller falls back
    if (j.value("schema_version", -1) != kSchemaVersion) {
        throw CheckpointVersionError("checkpoint schema version mismatch in " + file.string());
    }
    try {
        return j.get<RunState>();
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

}  // namespace detail

inline void save_checkpoint(const RunState& state, const std::filesystem::path& dir) {
    const std::filesystem::path task_dir = dir / state.task_id;
    const json j = state;
    const std::string payload = j.dump(2) + "\n";
    if (state.terminated) {
        detail::atomic_write(task_dir / "terminal.json", payload);
    } else {
        detail::atomic_write(task_dir / ("round_" + std::to_string(state.round) + ".json"),
                             payload);
    }
}

// Returns the terminal state if one exists, else the highest-round valid
// round checkpoint (corrupt files fall back to the next lower round), else
// nullopt. Schema version mismatches throw.
inline std::optional<RunState> load_checkpoint(const std::string& task_id,
                                               const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const fs::path task_dir = dir / task_id;
    std::error_code ec;
    if (!fs::is_directory(task_dir, ec)) return std::nullopt;

    if (auto terminal = detail::try_load_state_file(task_dir / "terminal.json")) {
        return terminal;
    }

    std::vector<int> rounds;
    for (const auto& entry : fs::directory_iterator(task_dir, ec)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("round_", 0) == 0 && entry.path().extension() == ".json") {
            try {
                rounds.push_back(std::stoi(name.substr(6)));
            } catch (const std::exception&) {
                // not a checkpoint file; ignore
            }
        }
    }
    std::sort(rounds.rbegin(), rounds.rend());
    for (int r : rounds) {
        if (auto state =
                detail::try_load_state_file(task_dir / ("round_" + std::to_string(r) + ".json"))) {
            return state;
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// The loop

// Sandbox knobs shared by every task in a run; per-task deny patterns come
// from the task itself.
struct SandboxDefaults {
    std::vector<std::string> noise_patterns = default_noise_patterns();
    std::uint64_t max_read_bytes = 64 * 1024;
};

struct RunPaths {
    std::filesystem::path work_root;  // private working copies live under here
    std::optional<std::filesystem::path> checkpoint_dir;
    SandboxDefaults sandbox;
};

struct RunHooks {
    std::function<void(const RunState&)> after_round;  // test seam (crash injection)
    std::function<bool()> stop_requested;              // operator stop
};

namespace detail {

inline void write_candidate_file(const std::filesystem::path& workdir,
                                 const BenchmarkTask& task, const std::string& code) {
    namespace fs = std::filesystem;
    const fs::path target = workdir / task.target_file;
    fs::create_directories(target.parent_path());
    std::ofstream out(target, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write candidate to " + target.string());
    out << code;
    if (!out.flush()) throw Error("short write on candidate file " + target.string());
}

inline std::filesystem::path materialize_workdir(const BenchmarkTask& task,
                                                 const RunPaths& paths) {
    namespace fs = std::filesystem;
    const fs::path workdir = paths.work_root / task.task_id;
    std::error_code ec;
    fs::remove_all(workdir, ec);
    fs::create_directories(workdir);
    if (fs::is_directory(task.repo_root, ec)) {
        fs::copy(task.repo_root, workdir,
                 fs::copy_options::recursive | fs::copy_options::copy_symlinks);
    }
    return workdir;
}

inline Message tagged(Message m, Phase phase, int round, const std::string& kind = {}) {
    m.metadata["phase"] = to_string(phase);
    m.metadata["round"] = std::to_string(round);
    if (!kind.empty()) m.metadata["kind"] = kind;
    return m;
}

inline void record_usage(RunState& state, TokenUsage usage, Phase phase, int round) {
    usage.phase = phase;
    usage.round = round;
    state.usage.push_back(usage);
}

}  // namespace detail

// Runs the initial coding round: seeds the transcript, asks for C_0, writes
// it into the working copy. Throws NoCodeBlockError when the assistant reply
// has no extractable code.
inline Candidate coding_round(const BenchmarkTask& task, Backend& llm, const LoopConfig& cfg,
                              RunState& state, const std::filesystem::path& workdir) {
    if (state.transcript.empty()) {
        state.transcript.push_back(detail::tagged(
            make_message(Role::system, cfg.coding_system_prompt), Phase::coding, 0));
        const std::string& req = state.summary_mode && task.requirement_summary
                                     ? *task.requirement_summary
                                     : task.requirement_full;
        std::string body = "Target file: " + task.target_file.generic_string() + "\n\n" + req;
        state.transcript.push_back(detail::tagged(make_message(Role::user, std::move(body)),
                                                  Phase::coding, 0, "requirement"));
    }
    auto result = llm.complete(prune_messages(state.transcript, cfg), {});
    state.transcript.push_back(detail::tagged(result.message, Phase::coding, 0));
    detail::record_usage(state, result.usage, Phase::coding, 0);

    const auto code = extract_last_code_block(result.message.content);
    if (!code || code->find_first_not_of(" \t\r\n") == std::string::npos) {
        throw NoCodeBlockError("coding round reply contains no code block");
    }
    Candidate cand;
    cand.round = 0;
    cand.code = *code;
    detail::write_candidate_file(workdir, task, cand.code);
    return cand;
}

// One refinement round: the feedback user message must already be appended.
// Drives the inner tool conversation until the assistant answers with code
// or the per-round tool-call cap is hit (then: last code seen this round, or
// the previous candidate's code). Dispatch failures are counted into
// state.tool_failures but still answered, so the agent can correct course.
inline Candidate refine_round(RunState& state, int round, Backend& llm,
                              const SandboxPolicy& sandbox, const LoopConfig& cfg) {
    const auto tools = toolbox_schemas();
    std::optional<std::string> last_code;
    int tool_calls_made = 0;

    while (true) {
        auto result = llm.complete(prune_messages(state.transcript, cfg), tools);
        state.transcript.push_back(detail::tagged(result.message, Phase::refine, round));
        detail::record_usage(state, result.usage, Phase::refine, round);

        if (auto code = extract_last_code_block(result.message.content)) {
            if (code->find_first_not_of(" \t\r\n") != std::string::npos) last_code = *code;
        }
        if (result.message.tool_calls.empty()) break;

        for (const auto& call : result.message.tool_calls) {
            ++tool_calls_made;
            Message reply = dispatch(call, sandbox);
            if (reply.content.rfind("error:", 0) == 0) ++state.tool_failures;
            state.transcript.push_back(detail::tagged(reply, Phase::refine, round));
        }
        if (tool_calls_made >= cfg.tool_call_cap) {
            // Cap exceeded: salvage rather than fail the whole round.
            Candidate cand;
            cand.round = round;
            if (last_code) {
                cand.code = *last_code;
            } else if (!state.candidates.empty()) {
                cand.code = state.candidates.back().code;
            } else {
                throw NoCodeBlockError("tool-call cap hit with no prior candidate");
            }
            return cand;
        }
    }

    if (!last_code) {
        throw NoCodeBlockError("refinement reply contains no code block");
    }
    Candidate cand;
    cand.round = round;
    cand.code = *last_code;
    return cand;
}

namespace detail {

inline void terminate_run(RunState& state, TerminationKind kind, std::string why,
                          const RunPaths& paths) {
    state.terminated = TerminationReason{kind, std::move(why)};
    if (paths.checkpoint_dir) save_checkpoint(state, *paths.checkpoint_dir);
}

}  // namespace detail

// Continues (or starts) the refinement loop on an existing state. Fresh runs
// enter with an empty state; resumed runs enter with the checkpointed state.
inline RunState run_loop(BenchmarkTask task, Backend& llm, Verifier& verifier, LoopConfig cfg,
                         const RunPaths& paths, const RunHooks& hooks, RunState state) {
    validate_task(task);
    validate_loop_config(cfg);
    if (state.summary_mode && !task.requirement_summary) {
        throw ValidationError("summary mode requires requirement_summary on task " +
                              task.task_id);
    }
    state.task_id = task.task_id;

    const auto started = std::chrono::steady_clock::now();
    const auto out_of_time = [&] {
        if (!cfg.wall_clock_budget) return false;
        return std::chrono::steady_clock::now() - started >= *cfg.wall_clock_budget;
    };
    const auto out_of_tokens = [&] {
        return cfg.token_budget && state.total_tokens() >= *cfg.token_budget;
    };

    const std::filesystem::path workdir = detail::materialize_workdir(task, paths);
    SandboxPolicy sandbox;
    sandbox.root = workdir;
    sandbox.deny_patterns = task.deny_patterns;
    sandbox.noise_patterns = paths.sandbox.noise_patterns;
    sandbox.max_read_bytes = paths.sandbox.max_read_bytes;

    const auto checkpoint = [&] {
        if (paths.checkpoint_dir) save_checkpoint(state, *paths.checkpoint_dir);
        if (hooks.after_round) hooks.after_round(state);
    };

    try {
        if (state.candidates.empty()) {
            if (hooks.stop_requested && hooks.stop_requested()) {
                detail::terminate_run(state, TerminationKind::operator_stop,
                                      "stop requested before coding round", paths);
                return state;
            }
            if (out_of_tokens()) {
                detail::terminate_run(state, TerminationKind::token_budget,
                                      "token budget exhausted before coding round", paths);
                return state;
            }
            Candidate c0 = coding_round(task, llm, cfg, state, workdir);
            state.candidates.push_back(std::move(c0));
            state.round = 0;
            checkpoint();
        } else {
            // Resume: re-materialized workdir needs the latest candidate back.
            detail::write_candidate_file(workdir, task, state.candidates.back().code);
        }

        while (true) {
            const int t = static_cast<int>(state.history.size()) + 1;
            if (t > cfg.max_rounds) break;
            if (hooks.stop_requested && hooks.stop_requested()) {
                detail::terminate_run(state, TerminationKind::operator_stop,
                                      "stop requested at round " + std::to_string(t), paths);
                return state;
            }
            if (out_of_tokens()) {
                detail::terminate_run(state, TerminationKind::token_budget,
                                      "token budget exhausted after " +
                                          std::to_string(state.total_tokens()) + " tokens",
                                      paths);
                return state;
            }
            if (out_of_time()) {
                detail::terminate_run(state, TerminationKind::wall_clock,
                                      "wall-clock budget exhausted", paths);
                return state;
            }

            // Verify C_{t-1}.
            const int verify_round = t - 1;
            ForgeFeedback forge = verifier.run_forge(workdir, task, verify_round);
            std::vector<SlitherFinding> findings = verifier.run_slither(workdir, task, verify_round);
            FeedbackReport report = aggregate(verify_round, std::move(forge), std::move(findings));
            Candidate& verified = state.candidates[static_cast<std::size_t>(verify_round)];
            verified.score = score_from_report(report);
            update_best(state, verified);
            state.history.push_back(report);

            if (is_perfect(report)) {
                detail::terminate_run(state, TerminationKind::success,
                                      "all tests pass with no High findings at round " +
                                          std::to_string(verify_round),
                                      paths);
                return state;
            }
            if (is_stagnant(state.history, cfg.stagnation_n)) {
                detail::terminate_run(state, TerminationKind::stagnation,
                                      "pass rate did not improve for " +
                                          std::to_string(cfg.stagnation_n) + " rounds",
                                      paths);
                return state;
            }
            if (state.history.size() >= 2 &&
                is_looping(state.history[state.history.size() - 1],
                           state.history[state.history.size() - 2], cfg.similarity_tau)) {
                detail::terminate_run(state, TerminationKind::oscillation,
                                      "consecutive feedback similarity exceeds tau", paths);
                return state;
            }

            // Ask for C_t.
            state.transcript.push_back(detail::tagged(
                make_message(Role::user, report.rendered_text + "\n" + cfg.refine_instruction),
                Phase::refine, t, "feedback"));
            Candidate next = refine_round(state, t, llm, sandbox, cfg);

            bool duplicate = false;
            for (const auto& prior : state.candidates) {
                if (prior.code == next.code) duplicate = true;
            }
            state.candidates.push_back(next);
            state.round = t;
            if (duplicate) {
                checkpoint();
                detail::terminate_run(state, TerminationKind::code_hash_repeat,
                                      "candidate at round " + std::to_string(t) +
                                          " repeats earlier code",
                                      paths);
                return state;
            }
            detail::write_candidate_file(workdir, task, next.code);
            checkpoint();

            if (state.tool_failures >= cfg.tool_failure_cap) {
                detail::terminate_run(state, TerminationKind::tool_failure_cap,
                                      std::to_string(state.tool_failures) +
                                          " failed tool calls reached the cap",
                                      paths);
                return state;
            }
        }

        // Loop exhausted: the final candidate was produced in iteration
        // max_rounds but never verified inside the loop; verify it once so
        // best tracking and selection see every score.
        const int final_round = static_cast<int>(state.history.size());
        if (final_round < static_cast<int>(state.candidates.size())) {
            ForgeFeedback forge = verifier.run_forge(workdir, task, final_round);
            std::vector<SlitherFinding> findings = verifier.run_slither(workdir, task, final_round);
            FeedbackReport report = aggregate(final_round, std::move(forge), std::move(findings));
            Candidate& last = state.candidates[static_cast<std::size_t>(final_round)];
            last.score = score_from_report(report);
            update_best(state, last);
            state.history.push_back(report);
            detail::terminate_run(state, TerminationKind::max_rounds,
                                  is_perfect(report)
                                      ? "round budget exhausted; final candidate verified perfect"
                                      : "round budget of " + std::to_string(cfg.max_rounds) +
                                            " refinement rounds exhausted",
                                  paths);
        } else {
            detail::terminate_run(state, TerminationKind::max_rounds,
                                  "round budget of " + std::to_string(cfg.max_rounds) +
                                      " refinement rounds exhausted",
                                  paths);
        }
        return state;
    } catch (const NoCodeBlockError& e) {
        detail::terminate_run(state, TerminationKind::empty_output, e.what(), paths);
        return state;
    } catch (const TransportError& e) {
        detail::terminate_run(state, TerminationKind::llm_error, e.what(), paths);
        return state;
    } catch (const AuthError& e) {
        detail::terminate_run(state, TerminationKind::llm_error, e.what(), paths);
        return state;
    } catch (const ScriptExhaustedError& e) {
        detail::terminate_run(state, TerminationKind::llm_error, e.what(), paths);
        return state;
    } catch (const MalformedResponseError& e) {
        detail::terminate_run(state, TerminationKind::llm_error, e.what(), paths);
        return state;
    }
}

inline RunState run_task(const BenchmarkTask& task, Backend& llm, Verifier& verifier,
                         const LoopConfig& cfg, const RunPaths& paths,
                         const RunHooks& hooks = {}, bool summary_mode = false) {
    RunState fresh;
    fresh.summary_mode = summary_mode;
    return run_loop(task, llm, verifier, cfg, paths, hooks, std::move(fresh));
}

// Idempotent entry point: a stored terminal state is returned unchanged with
// zero verifier/LLM calls; a partial checkpoint resumes; otherwise a fresh
// run starts.
inline RunState resume_or_run(const BenchmarkTask& task, Backend& llm, Verifier& verifier,
                              const LoopConfig& cfg, const RunPaths& paths,
                              const RunHooks& hooks = {}, bool summary_mode = false) {
    if (paths.checkpoint_dir) {
        if (auto stored = load_checkpoint(task.task_id, *paths.checkpoint_dir)) {
            if (stored->terminated) return *stored;
            return run_loop(task, llm, verifier, cfg, paths, hooks, std::move(*stored));
        }
    }
    return run_task(task, llm, verifier, cfg, paths, hooks, summary_mode);
}

}  // namespace solharness
