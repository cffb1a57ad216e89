#pragma once

// Operator interface: manifest loading/validation and the run / eval /
// dataset commands. Kept header-only and stream-parameterized so the test
// suite can drive commands in-process; the thin binary in tools/ only parses
// argv and forwards here.
//
// Exit codes: 0 success, 2 configuration error, 3 environment error
// (required verifier binaries absent), 4 partial failure (some tasks died
// on unrecoverable errors).

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "solharness/llm.hpp"
#include "solharness/llm_http.hpp"
#include "solharness/metrics.hpp"
#include "solharness/model.hpp"
#include "solharness/refine.hpp"
#include "solharness/trajectory.hpp"
#include "solharness/verify.hpp"

namespace solharness {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitEnvironmentError = 3;
inline constexpr int kExitPartialFailure = 4;

// ---------------------------------------------------------------------------
// Manifest

enum class VerifierKind { command, fake };

inline std::string to_string(VerifierKind k) {
    return k == VerifierKind::command ? "command" : "fake";
}

inline VerifierKind verifier_kind_from_string(const std::string& s) {
    if (s == "command") return VerifierKind::command;
    if (s == "fake") return VerifierKind::fake;
    throw ValidationError("unknown verifier kind: " + s);
}

enum class RequirementMode { full, summary };

inline std::string to_string(RequirementMode m) {
    return m == RequirementMode::full ? "full" : "summary";
}

inline RequirementMode requirement_mode_from_string(const std::string& s) {
    if (s == "full") return RequirementMode::full;
    if (s == "summary") return RequirementMode::summary;
    throw ValidationError("unknown requirement mode: " + s);
}

struct ManifestBackend {
    BackendConfig config;
    std::optional<std::filesystem::path> mock_scripts_dir;  // <dir>/<task_id>.json
};

struct ManifestVerifier {
    VerifierKind kind = VerifierKind::fake;
    VerifierConfig config;
    std::optional<std::filesystem::path> fake_scripts_dir;  // <dir>/<task_id>.json
};

struct RunManifest {
    std::vector<BenchmarkTask> tasks;
    LoopConfig loop;
    ManifestBackend backend;
    ManifestVerifier verifier;
    SandboxDefaults sandbox;
    RequirementMode requirement_mode = RequirementMode::full;
    int parallel_workers = 1;
    std::filesystem::path output_dir;
};

namespace detail {

inline std::filesystem::path resolve_relative(const std::filesystem::path& base,
                                              const std::filesystem::path& p) {
    return p.is_absolute() ? p : base / p;
}

}  // namespace detail

inline void validate_manifest(const RunManifest& m) {
    if (m.tasks.empty()) throw ValidationError("manifest declares no tasks");
    std::set<std::string> ids;
    for (const auto& t : m.tasks) {
        if (!ids.insert(t.task_id).second) {
            throw ValidationError("duplicate task id: " + t.task_id);
        }
    }
    if (m.parallel_workers <= 0) throw ValidationError("parallel_workers must be positive");
    if (m.output_dir.empty()) throw ValidationError("output_dir is required");
    for (const auto& t : m.tasks) {
        const auto out = m.output_dir.lexically_normal();
        const auto repo = t.repo_root.lexically_normal();
        if (out == repo || path_under(repo, out)) {
            throw ValidationError("output_dir must not lie inside repo_root of task " +
                                  t.task_id);
        }
    }
    validate_backend_config(m.backend.config);
    if (m.backend.config.kind == BackendKind::mock && !m.backend.mock_scripts_dir) {
        throw ValidationError("mock backend requires mock_scripts_dir");
    }
    validate_verifier_config(m.verifier.config);
    if (m.verifier.kind == VerifierKind::fake && !m.verifier.fake_scripts_dir) {
        throw ValidationError("fake verifier requires fake_scripts_dir");
    }
    validate_loop_config(m.loop);
    if (m.requirement_mode == RequirementMode::summary) {
        for (const auto& t : m.tasks) {
            if (!t.requirement_summary) {
                throw ValidationError("requirement_mode=summary but task " + t.task_id +
                                      " has no requirement_summary");
            }
        }
    }
}

// Parses and validates a manifest; relative paths (repo roots, script dirs,
// output_dir) are resolved against the manifest's own directory.
inline RunManifest load_manifest(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ValidationError("cannot open manifest: " + file.string());
    json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.is_object()) {
        throw ValidationError("manifest is not a JSON object: " + file.string());
    }
    const std::filesystem::path base = file.has_parent_path()
                                           ? file.parent_path()
                                           : std::filesystem::path(".");

    RunManifest m;
    try {
        m.tasks = j.value("tasks", std::vector<BenchmarkTask>{});
        if (j.contains("loop")) m.loop = j.at("loop").get<LoopConfig>();

        if (j.contains("backend")) {
            const json& b = j.at("backend");
            m.backend.config.kind =
                backend_kind_from_string(b.value("kind", std::string("mock")));
            if (b.contains("endpoint")) {
                m.backend.config.endpoint = b.at("endpoint").get<std::string>();
            }
            m.backend.config.model_name =
                b.value("model_name", m.backend.config.model_name);
            m.backend.config.api_key_env = b.value("api_key_env", m.backend.config.api_key_env);
            m.backend.config.max_retries = b.value("max_retries", m.backend.config.max_retries);
            if (b.contains("request_timeout_ms")) {
                m.backend.config.request_timeout =
                    std::chrono::milliseconds(b.at("request_timeout_ms").get<std::int64_t>());
            }
            if (b.contains("mock_scripts_dir")) {
                m.backend.mock_scripts_dir =
                    detail::resolve_relative(base, b.at("mock_scripts_dir").get<std::string>());
            }
        }

        if (j.contains("verifier")) {
            const json& v = j.at("verifier");
            m.verifier.kind = verifier_kind_from_string(v.value("kind", std::string("fake")));
            m.verifier.config.forge_binary =
                v.value("forge_binary", m.verifier.config.forge_binary);
            m.verifier.config.slither_binary =
                v.value("slither_binary", m.verifier.config.slither_binary);
            if (v.contains("per_tool_timeout_ms")) {
                m.verifier.config.per_tool_timeout =
                    std::chrono::milliseconds(v.at("per_tool_timeout_ms").get<std::int64_t>());
            }
            if (v.contains("solc_version_hint")) {
                m.verifier.config.solc_version_hint =
                    v.at("solc_version_hint").get<std::string>();
            }
            if (v.contains("fake_scripts_dir")) {
                m.verifier.fake_scripts_dir =
                    detail::resolve_relative(base, v.at("fake_scripts_dir").get<std::string>());
            }
        }

        if (j.contains("sandbox")) {
            const json& s = j.at("sandbox");
            if (s.contains("noise_patterns")) {
                m.sandbox.noise_patterns = s.at("noise_patterns").get<std::vector<std::string>>();
            }
            if (s.contains("max_read_bytes")) {
                m.sandbox.max_read_bytes = s.at("max_read_bytes").get<std::uint64_t>();
            }
        }

        m.requirement_mode =
            requirement_mode_from_string(j.value("requirement_mode", std::string("full")));
        m.parallel_workers = j.value("parallel_workers", 1);
        if (!j.contains("output_dir")) throw ValidationError("manifest missing output_dir");
        m.output_dir = detail::resolve_relative(base, j.at("output_dir").get<std::string>());
    } catch (const json::exception& e) {
        throw ValidationError(std::string("manifest field error: ") + e.what());
    }

    for (auto& t : m.tasks) {
        t.repo_root = detail::resolve_relative(base, t.repo_root);
    }
    validate_manifest(m);
    return m;
}

// ---------------------------------------------------------------------------
// cmd_run

namespace detail {

struct TaskOutcome {
    std::string task_id;
    bool failed = false;  // unrecoverable error, not a termination reason
    std::string line;     // summary line for the operator
};

inline std::unique_ptr<Backend> make_backend(const RunManifest& m, const BenchmarkTask& task) {
    if (m.backend.config.kind == BackendKind::mock) {
        return std::make_unique<MockBackend>(
            load_mock_script(*m.backend.mock_scripts_dir / (task.task_id + ".json")));
    }
    return std::make_unique<HttpBackend>(m.backend.config);
}

inline std::unique_ptr<Verifier> make_verifier(const RunManifest& m, const BenchmarkTask& task) {
    if (m.verifier.kind == VerifierKind::fake) {
        return std::make_unique<FakeVerifier>(
            load_fake_verifier(*m.verifier.fake_scripts_dir / (task.task_id + ".json")));
    }
    return std::make_unique<CommandVerifier>(m.verifier.config);
}

inline std::string summarize_outcome(const RunState& state) {
    std::ostringstream out;
    out << "task " << state.task_id << ": "
        << (state.terminated ? to_string(state.terminated->kind) : std::string("incomplete"))
        << " rounds=" << state.candidates.size();
    if (state.best && state.best->score) {
        const Score& s = *state.best->score;
        out << " best[compiled=" << (s.compiled ? "yes" : "no") << " pass="
            << detail::fmt(100.0 * s.pass_rate, 1) << "% high=" << s.high << "]";
    }
    out << " tokens=" << state.total_tokens();
    return out.str();
}

}  // namespace detail

inline int cmd_run(const std::filesystem::path& manifest_path, std::ostream& log = std::cout) {
    RunManifest manifest;
    try {
        manifest = load_manifest(manifest_path);
        for (const auto& task : manifest.tasks) validate_task(task);
    } catch (const ValidationError& e) {
        log << "manifest error: " << e.what() << "\n";
        return kExitConfigError;
    }

    if (manifest.verifier.kind == VerifierKind::command) {
        if (!find_executable(manifest.verifier.config.forge_binary) ||
            !find_executable(manifest.verifier.config.slither_binary)) {
            log << "environment error: verifier binaries not found ("
                << manifest.verifier.config.forge_binary << ", "
                << manifest.verifier.config.slither_binary << ")\n";
            return kExitEnvironmentError;
        }
    }

    const std::filesystem::path checkpoints = manifest.output_dir / "checkpoints";
    const std::filesystem::path work = manifest.output_dir / "work";
    const std::filesystem::path trajectories = manifest.output_dir / "trajectories";
    std::filesystem::create_directories(checkpoints);
    std::filesystem::create_directories(work);
    std::filesystem::create_directories(trajectories);

    // Script files are part of the configuration; verify them up front for
    // every task that still needs to run (terminated tasks replay from their
    // terminal state and need no scripts).
    try {
        for (const auto& task : manifest.tasks) {
            const auto stored = load_checkpoint(task.task_id, checkpoints);
            if (stored && stored->terminated) continue;
            if (manifest.backend.config.kind == BackendKind::mock) {
                const auto script = *manifest.backend.mock_scripts_dir / (task.task_id + ".json");
                if (!std::filesystem::is_regular_file(script)) {
                    throw ValidationError("missing mock script: " + script.string());
                }
            }
            if (manifest.verifier.kind == VerifierKind::fake) {
                const auto script = *manifest.verifier.fake_scripts_dir / (task.task_id + ".json");
                if (!std::filesystem::is_regular_file(script)) {
                    throw ValidationError("missing verifier script: " + script.string());
                }
            }
        }
    } catch (const ValidationError& e) {
        log << "manifest error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const CheckpointVersionError& e) {
        log << "checkpoint error: " << e.what() << "\n";
        return kExitConfigError;
    }

    std::vector<detail::TaskOutcome> outcomes(manifest.tasks.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;

    const auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= manifest.tasks.size()) return;
            const BenchmarkTask& task = manifest.tasks[i];
            detail::TaskOutcome& outcome = outcomes[i];
            outcome.task_id = task.task_id;
            try {
                RunPaths paths;
                paths.work_root = work;
                paths.checkpoint_dir = checkpoints;
                paths.sandbox = manifest.sandbox;
                const bool summary = manifest.requirement_mode == RequirementMode::summary;
                RunState state;
                if (auto stored = load_checkpoint(task.task_id, checkpoints);
                    stored && stored->terminated) {
                    // Finished on an earlier invocation: replay the stored
                    // state without touching backend or verifier resources.
                    state = std::move(*stored);
                } else {
                    auto backend = detail::make_backend(manifest, task);
                    auto verifier = detail::make_verifier(manifest, task);
                    state = resume_or_run(task, *backend, *verifier, manifest.loop, paths,
                                          {}, summary);
                }

                Dataset per_task;
                for (auto& s : record_rounds(state)) {
                    TrajectorySample cleaned = clean(std::move(s));
                    cleaned.variant_tags.insert(state.summary_mode ? "origin:summary"
                                                                   : "origin:full");
                    per_task.samples.push_back(std::move(cleaned));
                }
                write_dataset_jsonl(per_task, trajectories / (task.task_id + ".jsonl"));

                outcome.line = detail::summarize_outcome(state);
            } catch (const std::exception& e) {
                outcome.failed = true;
                outcome.line = "task " + task.task_id + ": FAILED: " + e.what();
            }
            std::lock_guard<std::mutex> guard(log_mutex);
            log << outcome.line << "\n";
        }
    };

    const int workers =
        std::min<int>(manifest.parallel_workers, static_cast<int>(manifest.tasks.size()));
    std::vector<std::thread> pool;
    for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    int failed = 0;
    for (const auto& o : outcomes) {
        if (o.failed) ++failed;
    }
    if (failed > 0) {
        log << failed << "/" << manifest.tasks.size() << " tasks failed\n";
        return kExitPartialFailure;
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// cmd_eval

namespace detail {

// Accepts either <dir> containing checkpoints/<task>/terminal.json or the
// checkpoint directory itself.
inline std::vector<RunState> load_terminal_states(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::path base = dir;
    std::error_code ec;
    if (fs::is_directory(dir / "checkpoints", ec)) base = dir / "checkpoints";
    std::vector<RunState> states;
    if (!fs::is_directory(base, ec)) return states;
    std::vector<fs::path> task_dirs;
    for (const auto& entry : fs::directory_iterator(base, ec)) {
        if (entry.is_directory()) task_dirs.push_back(entry.path());
    }
    std::sort(task_dirs.begin(), task_dirs.end());
    for (const auto& task_dir : task_dirs) {
        if (auto state = detail::try_load_state_file(task_dir / "terminal.json")) {
            states.push_back(std::move(*state));
        }
    }
    return states;
}

inline std::vector<FileResult> results_from_states(const std::vector<RunState>& states,
                                                   SelectionPolicy policy,
                                                   const std::map<std::string, BenchmarkTask>& tasks) {
    std::vector<FileResult> out;
    for (const auto& state : states) {
        BenchmarkTask task;
        task.task_id = state.task_id;
        if (auto it = tasks.find(state.task_id); it != tasks.end()) task = it->second;
        try {
            out.push_back(file_result_from_state(state, task, policy));
        } catch (const ValidationError&) {
            // State with no scored candidate (e.g. llm_error before any
            // verification): report as a non-compiling file.
            FileResult r;
            r.task_id = state.task_id;
            r.usage = state.usage;
            if (auto it = tasks.find(state.task_id); it != tasks.end()) {
                if (auto total = it->second.metadata.find("total_tests");
                    total != it->second.metadata.end()) {
                    r.total_tests = std::stoi(total->second);
                }
            }
            out.push_back(std::move(r));
        }
    }
    return out;
}

}  // namespace detail

struct EvalOptions {
    std::filesystem::path results_dir;
    std::optional<std::filesystem::path> baseline;  // dir of states or file_results.json
    SelectionPolicy policy = SelectionPolicy::best_score;
    ReportFormat format = ReportFormat::markdown;
    std::optional<std::filesystem::path> manifest;  // enriches tasks (test totals)
};

inline int cmd_eval(const EvalOptions& opt, std::ostream& log = std::cout) {
    std::map<std::string, BenchmarkTask> tasks;
    if (opt.manifest) {
        try {
            for (auto& t : load_manifest(*opt.manifest).tasks) tasks[t.task_id] = t;
        } catch (const ValidationError& e) {
            log << "manifest error: " << e.what() << "\n";
            return kExitConfigError;
        }
    }

    const auto states = detail::load_terminal_states(opt.results_dir);
    if (states.empty()) {
        log << "no terminal run states under " << opt.results_dir.string() << "\n";
        return kExitConfigError;
    }
    auto files = detail::results_from_states(states, opt.policy, tasks);

    std::optional<std::vector<FileResult>> baseline;
    if (opt.baseline) {
        namespace fs = std::filesystem;
        std::error_code ec;
        if (fs::is_regular_file(*opt.baseline, ec)) {
            std::ifstream in(*opt.baseline);
            json j = json::parse(in, nullptr, false);
            if (j.is_discarded() || !j.is_array()) {
                log << "baseline file is not a JSON array of file results: "
                    << opt.baseline->string() << "\n";
                return kExitConfigError;
            }
            baseline = j.get<std::vector<FileResult>>();
        } else {
            const auto base_states = detail::load_terminal_states(*opt.baseline);
            if (base_states.empty()) {
                log << "no baseline results under " << opt.baseline->string() << "\n";
                return kExitConfigError;
            }
            baseline =
                detail::results_from_states(base_states, SelectionPolicy::best_score, tasks);
        }
    }

    EvalStats stats;
    try {
        stats = compute_stats(files, baseline ? &*baseline : nullptr);
    } catch (const ValidationError& e) {
        log << "evaluation error: " << e.what() << "\n";
        return kExitConfigError;
    }

    // Persist machine-readable per-file results for reuse as a baseline.
    {
        const json j = stats.files;
        std::ofstream out(opt.results_dir / "file_results.json", std::ios::trunc);
        out << j.dump(2) << "\n";
    }

    const std::string report = emit_report(stats, opt.format);
    const char* ext = opt.format == ReportFormat::json
                          ? "report.json"
                          : (opt.format == ReportFormat::csv ? "report.csv" : "report.md");
    {
        std::ofstream out(opt.results_dir / ext, std::ios::trunc);
        out << report;
    }
    log << report;
    return kExitOk;
}

// ---------------------------------------------------------------------------
// cmd_dataset

struct DatasetOptions {
    std::filesystem::path results_dir;
    DatasetVariant variant = DatasetVariant::tracker;
    std::string truncate_mode = "none";  // none | forward | backward
    std::int64_t limit = 4096;
    int split_seed = 0;
    double train_frac = 0.8;
    bool include_all = false;
    std::optional<std::filesystem::path> out_dir;  // default: results_dir/dataset
};

inline int cmd_dataset(const DatasetOptions& opt, std::ostream& log = std::cout) {
    if (opt.truncate_mode != "none" && opt.truncate_mode != "forward" &&
        opt.truncate_mode != "backward") {
        log << "unknown truncation mode: " << opt.truncate_mode << "\n";
        return kExitConfigError;
    }
    const auto states = detail::load_terminal_states(opt.results_dir);
    if (states.empty()) {
        log << "no terminal run states under " << opt.results_dir.string() << "\n";
        return kExitConfigError;
    }

    Dataset ds;
    try {
        ds = build_dataset(states, opt.variant, opt.include_all);
    } catch (const MissingSummaryError& e) {
        log << "dataset error: " << e.what() << "\n";
        return kExitConfigError;
    }
    if (opt.truncate_mode != "none") {
        const TruncateMode mode = opt.truncate_mode == "forward" ? TruncateMode::forward
                                                                 : TruncateMode::backward;
        for (auto& s : ds.samples) s = truncate(s, opt.limit, mode);
    }

    std::pair<Dataset, Dataset> parts;
    try {
        parts = split(ds, opt.train_frac, opt.split_seed);
    } catch (const ValidationError& e) {
        log << "dataset error: " << e.what() << "\n";
        return kExitConfigError;
    }

    const std::filesystem::path out_dir =
        opt.out_dir ? *opt.out_dir : opt.results_dir / "dataset";
    write_dataset_jsonl(parts.first, out_dir / (ds.name + "_train.jsonl"));
    write_dataset_jsonl(parts.second, out_dir / (ds.name + "_test.jsonl"));

    std::ostringstream stats_doc;
    stats_doc << render_dataset_stats(ds.name, dataset_stats(ds)) << "\n"
              << render_dataset_stats(parts.first.name, dataset_stats(parts.first)) << "\n"
              << render_dataset_stats(parts.second.name, dataset_stats(parts.second));
    {
        std::ofstream out(out_dir / "stats.md", std::ios::trunc);
        out << stats_doc.str();
    }
    {
        json j{{"dataset", dataset_stats(ds)},
               {"train", dataset_stats(parts.first)},
               {"test", dataset_stats(parts.second)}};
        std::ofstream out(out_dir / "stats.json", std::ios::trunc);
        out << j.dump(2) << "\n";
    }
    log << stats_doc.str();
    return kExitOk;
}

}  // namespace solharness
