#pragma once

// Verifier adapters: run the Foundry test runner and the Slither analyzer in
// a task working directory, parse their JSON output, and aggregate per-round
// feedback. A scripted in-process fake implements the same interface for
// deterministic tests. Tool failures (missing binary, timeout, crash,
// unparseable output) degrade to feedback content — the refinement loop must
// never die because a verifier did.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "solharness/model.hpp"
#include "solharness/process.hpp"

namespace solharness {

struct VerifierConfig {
    std::string forge_binary = "forge";
    std::string slither_binary = "slither";
    std::chrono::milliseconds per_tool_timeout{300000};
    std::optional<std::string> solc_version_hint;
};

inline void validate_verifier_config(const VerifierConfig& c) {
    if (c.per_tool_timeout.count() <= 0) {
        throw ValidationError("per_tool_timeout must be positive");
    }
}

namespace detail {

inline ForgeFeedback degraded_forge(const std::string& name, std::string detail) {
    ForgeFeedback fb;
    fb.compiled = false;
    if (detail.size() > 2000) detail.resize(2000);
    fb.failures.push_back({name, std::move(detail), ""});
    return fb;
}

// Tolerant JSON extraction: some tool versions emit banner lines around the
// payload. Try the full text first, then the outermost {...} slice.
inline json parse_loose_json(const std::string& text) {
    json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (!j.is_discarded()) return j;
    const auto first = text.find('{');
    const auto last = text.rfind('}');
    if (first != std::string::npos && last != std::string::npos && last > first) {
        j = json::parse(text.substr(first, last - first + 1), nullptr, false);
    }
    return j;
}

inline std::string collapse_whitespace(const std::string& s) {
    std::string out;
    bool in_ws = true;  // also trims leading whitespace
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            in_ws = true;
        } else {
            if (in_ws && !out.empty()) out += ' ';
            in_ws = false;
            out += c;
        }
    }
    return out;
}

// Gas surfaces differently across runner versions: kind.Standard is a bare
// number, kind.Unit has .gas, fuzz runs report mean/median.
inline std::optional<std::uint64_t> gas_from_test_result(const json& tr) {
    if (tr.contains("gas") && tr.at("gas").is_number()) {
        return tr.at("gas").get<std::uint64_t>();
    }
    if (!tr.contains("kind")) return std::nullopt;
    const json& kind = tr.at("kind");
    if (!kind.is_object()) return std::nullopt;
    if (kind.contains("Standard") && kind.at("Standard").is_number()) {
        return kind.at("Standard").get<std::uint64_t>();
    }
    if (kind.contains("Unit") && kind.at("Unit").is_object() &&
        kind.at("Unit").contains("gas")) {
        return kind.at("Unit").at("gas").get<std::uint64_t>();
    }
    if (kind.contains("Fuzz") && kind.at("Fuzz").is_object()) {
        const json& fuzz = kind.at("Fuzz");
        if (fuzz.contains("mean_gas") && fuzz.at("mean_gas").is_number()) {
            return fuzz.at("mean_gas").get<std::uint64_t>();
        }
        if (fuzz.contains("median_gas") && fuzz.at("median_gas").is_number()) {
            return fuzz.at("median_gas").get<std::uint64_t>();
        }
    }
    return std::nullopt;
}

inline std::string contract_of_suite(const std::string& suite_key) {
    const auto pos = suite_key.rfind(':');
    return pos == std::string::npos ? suite_key : suite_key.substr(pos + 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forge adapter

// Parses the machine-readable test payload: suite key -> test_results ->
// per-test status/reason/gas. Test names are qualified "Contract::test()" so
// suites cannot collide in gas_by_test.
inline ForgeFeedback parse_forge_test_output(const std::string& stdout_text) {
    const json root = detail::parse_loose_json(stdout_text);
    if (root.is_discarded() || !root.is_object()) {
        return detail::degraded_forge("forge", "unparseable verifier output: " +
                                                   stdout_text.substr(0, 400));
    }
    ForgeFeedback fb;
    fb.compiled = true;
    for (const auto& [suite_key, suite] : root.items()) {
        if (!suite.is_object() || !suite.contains("test_results")) continue;
        const std::string contract = detail::contract_of_suite(suite_key);
        for (const auto& [test_name, tr] : suite.at("test_results").items()) {
            if (!tr.is_object()) continue;
            const std::string qualified = contract + "::" + test_name;
            ++fb.total_tests;
            const std::string status = tr.value("status", std::string{});
            if (status == "Success") {
                ++fb.passed_tests;
            } else {
                ForgeFailure fail;
                fail.test_name = qualified;
                if (tr.contains("reason") && tr.at("reason").is_string()) {
                    fail.assertion_message = tr.at("reason").get<std::string>();
                }
                if (fail.assertion_message.empty()) fail.assertion_message = "test failed";
                if (tr.contains("decoded_logs") && tr.at("decoded_logs").is_array()) {
                    std::string trace;
                    int lines = 0;
                    for (const auto& line : tr.at("decoded_logs")) {
                        if (!line.is_string() || lines >= 5) break;
                        if (!trace.empty()) trace += '\n';
                        trace += line.get<std::string>();
                        ++lines;
                    }
                    fail.trace_excerpt = trace;
                }
                fb.failures.push_back(std::move(fail));
            }
            if (auto gas = detail::gas_from_test_result(tr)) {
                fb.gas_by_test[qualified] = *gas;
            }
        }
    }
    return fb;
}

inline ForgeFeedback run_forge(const std::filesystem::path& workdir, const BenchmarkTask& task,
                               const VerifierConfig& cfg) {
    validate_verifier_config(cfg);
    const auto binary = find_executable(cfg.forge_binary);
    if (!binary) {
        return detail::degraded_forge("forge", "tool missing: " + cfg.forge_binary);
    }

    // Build first so a plain compile failure is unambiguous.
    std::vector<std::string> build_cmd{binary->string(), "build"};
    if (cfg.solc_version_hint) {
        build_cmd.push_back("--use");
        build_cmd.push_back(*cfg.solc_version_hint);
    }
    const auto build = run_subprocess(build_cmd, workdir, cfg.per_tool_timeout);
    if (build.timed_out) {
        return detail::degraded_forge("forge build", "verifier timeout");
    }
    if (build.exit_code != 0) {
        return detail::degraded_forge(
            "forge build", detail::collapse_whitespace(build.stderr_text.empty()
                                                           ? build.stdout_text
                                                           : build.stderr_text));
    }

    std::vector<std::string> test_cmd{binary->string(), "test", "--json"};
    if (!task.test_suite_filter.empty()) {
        test_cmd.push_back("--match-path");
        test_cmd.push_back(task.test_suite_filter);
    }
    if (cfg.solc_version_hint) {
        test_cmd.push_back("--use");
        test_cmd.push_back(*cfg.solc_version_hint);
    }
    const auto run = run_subprocess(test_cmd, workdir, cfg.per_tool_timeout);
    if (run.timed_out) {
        return detail::degraded_forge("forge test", "verifier timeout");
    }
    // Nonzero exit is advisory (failing tests exit 1); the payload decides.
    return parse_forge_test_output(run.stdout_text);
}

// ---------------------------------------------------------------------------
// Slither adapter

// Parses analyzer JSON, keeping only High/Medium/Low findings that point at
// the candidate file, sorted by (file, line, detector).
inline std::vector<SlitherFinding> parse_slither_output(const std::string& json_text,
                                                        const std::string& target_file) {
    const json root = detail::parse_loose_json(json_text);
    if (root.is_discarded() || !root.is_object()) {
        throw Error("unparseable analyzer output");
    }
    std::vector<SlitherFinding> findings;
    if (!root.contains("results") || !root.at("results").is_object() ||
        !root.at("results").contains("detectors")) {
        return findings;  // clean run reports no detectors block
    }
    for (const auto& det : root.at("results").at("detectors")) {
        if (!det.is_object()) continue;
        const auto severity = severity_from_string(det.value("impact", std::string{}));
        if (!severity) continue;  // Informational / Optimization dropped
        SlitherFinding f;
        f.severity = *severity;
        f.detector_id = det.value("check", std::string{});
        f.description = detail::collapse_whitespace(det.value("description", std::string{}));
        if (det.contains("elements") && det.at("elements").is_array() &&
            !det.at("elements").empty()) {
            const json& el = det.at("elements").front();
            if (el.contains("source_mapping") && el.at("source_mapping").is_object()) {
                const json& sm = el.at("source_mapping");
                f.location.file = sm.value("filename_relative", std::string{});
                if (sm.contains("lines") && sm.at("lines").is_array() &&
                    !sm.at("lines").empty() && sm.at("lines").front().is_number()) {
                    f.location.line = sm.at("lines").front().get<int>();
                }
            }
        }
        // Keep findings about the candidate; project mode also analyzes
        // scaffolding and tests, which must not leak into scores.
        if (!target_file.empty()) {
            const std::string& file = f.location.file;
            const bool matches = file == target_file ||
                                 (file.size() > target_file.size() &&
                                  file.compare(file.size() - target_file.size() - 1, 1, "/") == 0 &&
                                  file.compare(file.size() - target_file.size(),
                                               target_file.size(), target_file) == 0);
            if (!matches) continue;
        }
        findings.push_back(std::move(f));
    }
    std::sort(findings.begin(), findings.end(), finding_order);
    return findings;
}

inline std::vector<SlitherFinding> run_slither(const std::filesystem::path& workdir,
                                               const BenchmarkTask& task,
                                               const VerifierConfig& cfg,
                                               std::vector<std::string>* warnings = nullptr) {
    validate_verifier_config(cfg);
    auto warn = [&](const std::string& w) {
        if (warnings) warnings->push_back(w);
    };
    const auto binary = find_executable(cfg.slither_binary);
    if (!binary) {
        warn("analyzer unavailable: " + cfg.slither_binary);
        return {};
    }
    const std::vector<std::string> cmd{binary->string(), ".", "--json", "-"};
    const auto run = run_subprocess(cmd, workdir, cfg.per_tool_timeout);
    if (run.timed_out) {
        warn("analyzer timeout");
        return {};
    }
    // Slither exits nonzero when findings exist; only the payload matters.
    try {
        return parse_slither_output(run.stdout_text, task.target_file.generic_string());
    } catch (const std::exception& e) {
        warn(std::string("analyzer crash: ") + e.what() + "; stderr: " +
             detail::collapse_whitespace(run.stderr_text.substr(0, 300)));
        return {};
    }
}

// ---------------------------------------------------------------------------
// Aggregation

// Deterministic feedback rendering; the similarity-based stopping rule and
// the golden-file tests both depend on this exact layout.
inline std::string render_feedback(const ForgeFeedback& forge,
                                   const std::vector<SlitherFinding>& findings) {
    std::ostringstream out;
    out << "Compile: " << (forge.compiled ? "OK" : "FAILED") << '\n';
    out << "Tests passed: " << forge.passed_tests << '/' << forge.total_tests << '\n';
    for (const auto& f : forge.failures) {
        out << "FAIL " << f.test_name << ": " << f.assertion_message << '\n';
        if (!f.trace_excerpt.empty()) {
            std::istringstream lines(f.trace_excerpt);
            std::string line;
            while (std::getline(lines, line)) out << "  " << line << '\n';
        }
    }
    out << "Findings: " << findings.size() << '\n';
    for (const auto& f : findings) {
        out << to_string(f.severity) << ' ' << f.detector_id << ' ' << f.location.file << ':'
            << f.location.line << ' ' << f.description << '\n';
    }
    return out.str();
}

inline FeedbackReport aggregate(int round, ForgeFeedback forge,
                                std::vector<SlitherFinding> findings) {
    std::sort(findings.begin(), findings.end(), finding_order);
    FeedbackReport report;
    report.round = round;
    report.forge = std::move(forge);
    report.findings = std::move(findings);
    report.rendered_text = render_feedback(report.forge, report.findings);
    return report;
}

// ---------------------------------------------------------------------------
// Verifier interface

class Verifier {
public:
    virtual ~Verifier() = default;
    virtual ForgeFeedback run_forge(const std::filesystem::path& workdir,
                                    const BenchmarkTask& task, int round) = 0;
    virtual std::vector<SlitherFinding> run_slither(const std::filesystem::path& workdir,
                                                    const BenchmarkTask& task, int round) = 0;

    // Degradation notes (analyzer crash, missing tool) from the most recent
    // calls; a single task owns the verifier, so plain state is fine.
    std::vector<std::string> warnings;
};

class CommandVerifier : public Verifier {
public:
    explicit CommandVerifier(VerifierConfig cfg) : cfg_(std::move(cfg)) {
        validate_verifier_config(cfg_);
    }

    ForgeFeedback run_forge(const std::filesystem::path& workdir, const BenchmarkTask& task,
                            int /*round*/) override {
        return solharness::run_forge(workdir, task, cfg_);
    }

    std::vector<SlitherFinding> run_slither(const std::filesystem::path& workdir,
                                            const BenchmarkTask& task, int /*round*/) override {
        return solharness::run_slither(workdir, task, cfg_, &warnings);
    }

private:
    VerifierConfig cfg_;
};

// Scripted verifier: entry r answers the round-r verification. Out-of-range
// rounds throw unless repeat_last is set (useful for "stuck forever" tests).
class FakeVerifier : public Verifier {
public:
    struct RoundScript {
        ForgeFeedback forge;
        std::vector<SlitherFinding> findings;
    };

    explicit FakeVerifier(std::vector<RoundScript> rounds, bool repeat_last = false)
        : rounds_(std::move(rounds)), repeat_last_(repeat_last) {}

    ForgeFeedback run_forge(const std::filesystem::path&, const BenchmarkTask&,
                            int round) override {
        return entry(round).forge;
    }

    std::vector<SlitherFinding> run_slither(const std::filesystem::path&, const BenchmarkTask&,
                                            int round) override {
        return entry(round).findings;
    }

private:
    const RoundScript& entry(int round) const {
        if (round < 0) throw Error("fake verifier: negative round");
        std::size_t idx = static_cast<std::size_t>(round);
        if (idx >= rounds_.size()) {
            if (repeat_last_ && !rounds_.empty()) {
                idx = rounds_.size() - 1;
            } else {
                throw Error("fake verifier script exhausted at round " + std::to_string(round));
            }
        }
        return rounds_[idx];
    }

    std::vector<RoundScript> rounds_;
    bool repeat_last_ = false;
};

inline void to_json(json& j, const FakeVerifier::RoundScript& r) {
    j = json{{"forge", r.forge}, {"findings", r.findings}};
}

inline void from_json(const json& j, FakeVerifier::RoundScript& r) {
    j.at("forge").get_to(r.forge);
    r.findings = j.value("findings", std::vector<SlitherFinding>{});
}

// Script file format: {"rounds": [RoundScript, ...], "repeat_last": bool}.
inline FakeVerifier load_fake_verifier(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw Error("cannot open verifier script: " + file.string());
    json j = json::parse(in);
    if (!j.is_object() || !j.contains("rounds")) {
        throw ValidationError("verifier script must be an object with a 'rounds' array: " +
                              file.string());
    }
    return FakeVerifier(j.at("rounds").get<std::vector<FakeVerifier::RoundScript>>(),
                        j.value("repeat_last", false));
}

}  // namespace solharness
