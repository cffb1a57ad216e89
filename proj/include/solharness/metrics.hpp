#pragma once

// Evaluation statistics over completed runs: Pass@k, compile rate, per-file
// pass statistics, pairwise gas comparison, vulnerability comparison, source
// complexity and token reports, and deterministic report rendering
// (json / csv / markdown).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "solharness/analysis.hpp"
#include "solharness/model.hpp"
#include "solharness/refine.hpp"

namespace solharness {

// ---------------------------------------------------------------------------
// Per-file results

struct SeverityCounts {
    int high = 0;
    int medium = 0;
    int low = 0;

    friend bool operator==(const SeverityCounts&, const SeverityCounts&) = default;

    int total() const { return high + medium + low; }
};

struct FileResult {
    std::string task_id;
    bool compiled = false;
    int total_tests = 0;
    int passed_tests = 0;
    std::map<std::string, std::uint64_t> gas_by_test;  // passed tests only
    SeverityCounts findings;
    SourceMetrics source;
    std::vector<TokenUsage> usage;

    friend bool operator==(const FileResult&, const FileResult&) = default;

    double pass_rate() const {
        return total_tests > 0 ? static_cast<double>(passed_tests) / total_tests : 0.0;
    }
};

inline void validate_file_result(const FileResult& r) {
    if (r.task_id.empty()) throw ValidationError("FileResult requires a task_id");
    if (r.total_tests < 0 || r.passed_tests < 0 || r.passed_tests > r.total_tests) {
        throw ValidationError("FileResult test counts are inconsistent for " + r.task_id);
    }
}

inline void to_json(json& j, const SeverityCounts& s) {
    j = json{{"high", s.high}, {"medium", s.medium}, {"low", s.low}};
}

inline void from_json(const json& j, SeverityCounts& s) {
    j.at("high").get_to(s.high);
    j.at("medium").get_to(s.medium);
    j.at("low").get_to(s.low);
}

inline void to_json(json& j, const FileResult& r) {
    j = json{{"task_id", r.task_id},
             {"compiled", r.compiled},
             {"total_tests", r.total_tests},
             {"passed_tests", r.passed_tests},
             {"gas_by_test", r.gas_by_test},
             {"findings", r.findings},
             {"source", r.source},
             {"usage", r.usage}};
}

inline void from_json(const json& j, FileResult& r) {
    j.at("task_id").get_to(r.task_id);
    j.at("compiled").get_to(r.compiled);
    j.at("total_tests").get_to(r.total_tests);
    j.at("passed_tests").get_to(r.passed_tests);
    r.gas_by_test = j.value("gas_by_test", std::map<std::string, std::uint64_t>{});
    r.findings = j.value("findings", SeverityCounts{});
    r.source = j.value("source", SourceMetrics{});
    r.usage = j.value("usage", std::vector<TokenUsage>{});
}

// Builds the per-file record for the candidate chosen by the selection
// policy. Gas is restricted to passed tests here, once, so every consumer
// sees the same keys. A file that never compiled reports the benchmark's
// fixed test total when the task metadata carries one ("total_tests"),
// keeping overall Pass@1 denominators honest.
inline FileResult file_result_from_state(const RunState& state, const BenchmarkTask& task,
                                         SelectionPolicy policy) {
    FileResult out;
    out.task_id = state.task_id.empty() ? task.task_id : state.task_id;
    out.usage = state.usage;

    const Candidate selected = select_candidate(state, policy);
    out.source = source_metrics(selected.code);

    const FeedbackReport* report = nullptr;
    for (const auto& r : state.history) {
        if (r.round == selected.round) report = &r;
    }
    if (report != nullptr) {
        out.compiled = report->forge.compiled;
        out.total_tests = report->forge.total_tests;
        out.passed_tests = report->forge.passed_tests;
        out.findings.high = report->severity_count(Severity::High);
        out.findings.medium = report->severity_count(Severity::Medium);
        out.findings.low = report->severity_count(Severity::Low);
        std::set<std::string> failed;
        for (const auto& f : report->forge.failures) failed.insert(f.test_name);
        for (const auto& [name, gas] : report->forge.gas_by_test) {
            if (!failed.contains(name)) out.gas_by_test[name] = gas;
        }
    }
    if (out.total_tests == 0) {
        if (auto it = task.metadata.find("total_tests"); it != task.metadata.end()) {
            out.total_tests = std::stoi(it->second);
            out.passed_tests = 0;
        }
    }
    validate_file_result(out);
    return out;
}

// ---------------------------------------------------------------------------
// Core estimators

// Unbiased Pass@k: 1 - C(n-c, k)/C(n, k), via the overflow-free product form.
inline double pass_at_k(int n, int c, int k) {
    if (n <= 0) throw ValidationError("pass_at_k: n must be positive");
    if (k <= 0) throw ValidationError("pass_at_k: k must be positive");
    if (c < 0 || c > n) throw ValidationError("pass_at_k: c must lie in [0, n]");
    if (k > n) throw ValidationError("pass_at_k: k must not exceed n");
    if (n - c < k) return 1.0;  // every size-k draw contains a correct sample
    double miss_all = 1.0;
    for (int i = 0; i < k; ++i) {
        miss_all *= static_cast<double>(n - c - i) / static_cast<double>(n - i);
    }
    return 1.0 - miss_all;
}

inline double compile_rate(const std::vector<FileResult>& results) {
    if (results.empty()) throw ValidationError("compile_rate: empty result set");
    int compiled = 0;
    for (const auto& r : results) {
        if (r.compiled) ++compiled;
    }
    return static_cast<double>(compiled) / static_cast<double>(results.size());
}

// Overall Pass@1: pooled over every test of every file; files that never
// compiled contribute zero passes over their full test count.
inline double overall_pass1(const std::vector<FileResult>& results) {
    if (results.empty()) throw ValidationError("overall_pass1: empty result set");
    std::int64_t passed = 0, total = 0;
    for (const auto& r : results) {
        passed += r.passed_tests;
        total += r.total_tests;
    }
    if (total == 0) throw ValidationError("overall_pass1: no tests recorded");
    return static_cast<double>(passed) / static_cast<double>(total);
}

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;  // population

    friend bool operator==(const MeanStd&, const MeanStd&) = default;
};

inline void to_json(json& j, const MeanStd& m) {
    j = json{{"mean", m.mean}, {"stddev", m.stddev}};
}

inline void from_json(const json& j, MeanStd& m) {
    j.at("mean").get_to(m.mean);
    j.at("stddev").get_to(m.stddev);
}

inline MeanStd per_file_pass1_stats(const std::vector<FileResult>& results) {
    std::vector<double> rates;
    for (const auto& r : results) {
        if (r.compiled) rates.push_back(r.pass_rate());
    }
    if (rates.empty()) {
        throw ValidationError("per_file_pass1_stats: no compiled files");
    }
    double sum = 0.0;
    for (double x : rates) sum += x;
    const double mean = sum / static_cast<double>(rates.size());
    double var = 0.0;
    for (double x : rates) var += (x - mean) * (x - mean);
    var /= static_cast<double>(rates.size());
    return {mean, std::sqrt(var)};
}

inline double trimmed_mean(std::vector<double> values, double frac) {
    if (values.empty()) throw ValidationError("trimmed_mean: empty input");
    if (!(frac >= 0.0 && frac < 0.5)) throw ValidationError("trimmed_mean: frac must be in [0, 0.5)");
    std::sort(values.begin(), values.end());
    const auto drop = static_cast<std::size_t>(
        std::floor(frac * static_cast<double>(values.size())));
    double sum = 0.0;
    const std::size_t keep = values.size() - 2 * drop;
    for (std::size_t i = drop; i < drop + keep; ++i) sum += values[i];
    return sum / static_cast<double>(keep);
}

// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value.
inline double percentile(std::vector<double> values, double p) {
    if (values.empty()) throw ValidationError("percentile: empty input");
    if (!(p > 0.0 && p <= 100.0)) throw ValidationError("percentile: p must be in (0, 100]");
    std::sort(values.begin(), values.end());
    auto rank = static_cast<std::size_t>(
        std::ceil(p / 100.0 * static_cast<double>(values.size())));
    rank = std::clamp<std::size_t>(rank, 1, values.size());
    return values[rank - 1];
}

// ---------------------------------------------------------------------------
// Pairwise gas comparison

struct GasComparison {
    int common_tests = 0;
    std::optional<double> mean_ratio;      // our gas / their gas, pooled
    std::optional<double> trimmed_mean_5;
    std::optional<double> p90;
    int file_count = 0;                    // files with >= 1 common passed test
    int files_better = 0;                  // strictly less total gas on our side
    int files_worse = 0;

    friend bool operator==(const GasComparison&, const GasComparison&) = default;
};

inline void to_json(json& j, const GasComparison& g) {
    j = json{{"common_tests", g.common_tests},
             {"file_count", g.file_count},
             {"files_better", g.files_better},
             {"files_worse", g.files_worse}};
    if (g.mean_ratio) j["mean_ratio"] = *g.mean_ratio;
    if (g.trimmed_mean_5) j["trimmed_mean_5"] = *g.trimmed_mean_5;
    if (g.p90) j["p90"] = *g.p90;
}

inline void from_json(const json& j, GasComparison& g) {
    j.at("common_tests").get_to(g.common_tests);
    j.at("file_count").get_to(g.file_count);
    j.at("files_better").get_to(g.files_better);
    j.at("files_worse").get_to(g.files_worse);
    g.mean_ratio = j.contains("mean_ratio")
                       ? std::optional<double>(j.at("mean_ratio").get<double>())
                       : std::nullopt;
    g.trimmed_mean_5 = j.contains("trimmed_mean_5")
                           ? std::optional<double>(j.at("trimmed_mean_5").get<double>())
                           : std::nullopt;
    g.p90 = j.contains("p90") ? std::optional<double>(j.at("p90").get<double>()) : std::nullopt;
}

// Compares gas on the per-file intersection of passed tests; ratios are
// pooled across files for the summary statistics. Ratios below 1.0 mean our
// side consumes less gas.
inline GasComparison gas_pairwise(const std::vector<FileResult>& ours,
                                  const std::vector<FileResult>& theirs) {
    std::map<std::string, const FileResult*> their_index;
    for (const auto& t : theirs) their_index[t.task_id] = &t;

    GasComparison out;
    std::vector<double> ratios;
    for (const auto& mine : ours) {
        auto it = their_index.find(mine.task_id);
        if (it == their_index.end()) continue;
        const FileResult& other = *it->second;
        std::uint64_t my_total = 0, their_total = 0;
        int common_here = 0;
        for (const auto& [test, my_gas] : mine.gas_by_test) {
            auto tg = other.gas_by_test.find(test);
            if (tg == other.gas_by_test.end()) continue;
            if (tg->second == 0) continue;  // ratio undefined; not a usable common test
            ++common_here;
            my_total += my_gas;
            their_total += tg->second;
            ratios.push_back(static_cast<double>(my_gas) / static_cast<double>(tg->second));
        }
        if (common_here > 0) {
            ++out.file_count;
            out.common_tests += common_here;
            if (my_total < their_total) ++out.files_better;
            if (my_total > their_total) ++out.files_worse;
        }
    }
    if (!ratios.empty()) {
        double sum = 0.0;
        for (double r : ratios) sum += r;
        out.mean_ratio = sum / static_cast<double>(ratios.size());
        out.trimmed_mean_5 = trimmed_mean(ratios, 0.05);
        out.p90 = percentile(ratios, 90.0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Vulnerability comparison

struct VulnComparison {
    int common_files = 0;    // method files that compiled
    int baseline_vuln = 0;   // H+M+L summed over common files
    int method_vuln = 0;
    std::optional<double> delta_pct;  // absent when baseline_vuln == 0
    int vuln_diff = 0;                // method - baseline

    friend bool operator==(const VulnComparison&, const VulnComparison&) = default;
};

inline void to_json(json& j, const VulnComparison& v) {
    j = json{{"common_files", v.common_files},
             {"baseline_vuln", v.baseline_vuln},
             {"method_vuln", v.method_vuln},
             {"vuln_diff", v.vuln_diff}};
    if (v.delta_pct) j["delta_pct"] = *v.delta_pct;
}

inline void from_json(const json& j, VulnComparison& v) {
    j.at("common_files").get_to(v.common_files);
    j.at("baseline_vuln").get_to(v.baseline_vuln);
    j.at("method_vuln").get_to(v.method_vuln);
    j.at("vuln_diff").get_to(v.vuln_diff);
    v.delta_pct = j.contains("delta_pct")
                      ? std::optional<double>(j.at("delta_pct").get<double>())
                      : std::nullopt;
}

inline VulnComparison vuln_compare(const std::vector<FileResult>& method,
                                   const std::vector<FileResult>& baseline) {
    std::map<std::string, const FileResult*> base_index;
    for (const auto& b : baseline) base_index[b.task_id] = &b;

    VulnComparison out;
    for (const auto& m : method) {
        auto it = base_index.find(m.task_id);
        if (it == base_index.end()) {
            throw ValidationError("vuln_compare: baseline missing task " + m.task_id);
        }
        if (!m.compiled) continue;
        ++out.common_files;
        out.method_vuln += m.findings.total();
        out.baseline_vuln += it->second->findings.total();
    }
    out.vuln_diff = out.method_vuln - out.baseline_vuln;
    if (out.baseline_vuln > 0) {
        out.delta_pct = 100.0 * static_cast<double>(out.vuln_diff) /
                        static_cast<double>(out.baseline_vuln);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Token report

struct PhaseTokens {
    std::int64_t prompt = 0;
    std::int64_t completion = 0;

    friend bool operator==(const PhaseTokens&, const PhaseTokens&) = default;

    std::int64_t total() const { return prompt + completion; }
};

inline void to_json(json& j, const PhaseTokens& p) {
    j = json{{"prompt", p.prompt}, {"completion", p.completion}, {"total", p.total()}};
}

inline void from_json(const json& j, PhaseTokens& p) {
    j.at("prompt").get_to(p.prompt);
    j.at("completion").get_to(p.completion);
}

struct TokenReport {
    PhaseTokens coding;
    PhaseTokens refine;
    PhaseTokens overall;
    int compiled_files = 0;
    int refine_rounds = 0;  // distinct (file, round) pairs with refine usage
    std::optional<double> avg_prompt_per_file;
    std::optional<double> avg_completion_per_file;
    std::optional<double> avg_total_per_file;
    std::optional<double> avg_refine_prompt_per_round;
    std::optional<double> avg_refine_completion_per_round;

    friend bool operator==(const TokenReport&, const TokenReport&) = default;
};

inline void to_json(json& j, const TokenReport& t) {
    j = json{{"coding", t.coding},
             {"refine", t.refine},
             {"overall", t.overall},
             {"compiled_files", t.compiled_files},
             {"refine_rounds", t.refine_rounds}};
    if (t.avg_prompt_per_file) j["avg_prompt_per_file"] = *t.avg_prompt_per_file;
    if (t.avg_completion_per_file) j["avg_completion_per_file"] = *t.avg_completion_per_file;
    if (t.avg_total_per_file) j["avg_total_per_file"] = *t.avg_total_per_file;
    if (t.avg_refine_prompt_per_round) {
        j["avg_refine_prompt_per_round"] = *t.avg_refine_prompt_per_round;
    }
    if (t.avg_refine_completion_per_round) {
        j["avg_refine_completion_per_round"] = *t.avg_refine_completion_per_round;
    }
}

inline void from_json(const json& j, TokenReport& t) {
    j.at("coding").get_to(t.coding);
    j.at("refine").get_to(t.refine);
    j.at("overall").get_to(t.overall);
    j.at("compiled_files").get_to(t.compiled_files);
    j.at("refine_rounds").get_to(t.refine_rounds);
    auto opt = [&](const char* key) -> std::optional<double> {
        return j.contains(key) ? std::optional<double>(j.at(key).get<double>()) : std::nullopt;
    };
    t.avg_prompt_per_file = opt("avg_prompt_per_file");
    t.avg_completion_per_file = opt("avg_completion_per_file");
    t.avg_total_per_file = opt("avg_total_per_file");
    t.avg_refine_prompt_per_round = opt("avg_refine_prompt_per_round");
    t.avg_refine_completion_per_round = opt("avg_refine_completion_per_round");
}

// Totals are over every run; per-file averages divide by the number of
// compiled files (matching the published tables, whose per-file averages are
// the totals over the compiled-file count); per-round averages divide the
// refine totals by the number of refinement rounds.
inline TokenReport token_report(const std::vector<FileResult>& results) {
    TokenReport out;
    for (const auto& r : results) {
        if (r.compiled) ++out.compiled_files;
        std::set<int> rounds_here;
        for (const auto& u : r.usage) {
            PhaseTokens& bucket = u.phase == Phase::coding ? out.coding : out.refine;
            bucket.prompt += u.prompt_tokens;
            bucket.completion += u.completion_tokens;
            out.overall.prompt += u.prompt_tokens;
            out.overall.completion += u.completion_tokens;
            if (u.phase == Phase::refine) rounds_here.insert(u.round);
        }
        out.refine_rounds += static_cast<int>(rounds_here.size());
    }
    if (out.compiled_files > 0) {
        const auto files = static_cast<double>(out.compiled_files);
        out.avg_prompt_per_file = static_cast<double>(out.overall.prompt) / files;
        out.avg_completion_per_file = static_cast<double>(out.overall.completion) / files;
        out.avg_total_per_file = static_cast<double>(out.overall.total()) / files;
    }
    if (out.refine_rounds > 0) {
        const auto rounds = static_cast<double>(out.refine_rounds);
        out.avg_refine_prompt_per_round = static_cast<double>(out.refine.prompt) / rounds;
        out.avg_refine_completion_per_round =
            static_cast<double>(out.refine.completion) / rounds;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Aggregated stats and report emission

struct ComplexitySummary {
    int compiled_files = 0;
    std::optional<double> avg_loc;
    std::optional<double> avg_ploc;
    std::optional<double> avg_file_complexity;

    friend bool operator==(const ComplexitySummary&, const ComplexitySummary&) = default;
};

inline void to_json(json& j, const ComplexitySummary& c) {
    j = json{{"compiled_files", c.compiled_files}};
    if (c.avg_loc) j["avg_loc"] = *c.avg_loc;
    if (c.avg_ploc) j["avg_ploc"] = *c.avg_ploc;
    if (c.avg_file_complexity) j["avg_file_complexity"] = *c.avg_file_complexity;
}

inline void from_json(const json& j, ComplexitySummary& c) {
    j.at("compiled_files").get_to(c.compiled_files);
    c.avg_loc = j.contains("avg_loc") ? std::optional<double>(j.at("avg_loc").get<double>())
                                      : std::nullopt;
    c.avg_ploc = j.contains("avg_ploc") ? std::optional<double>(j.at("avg_ploc").get<double>())
                                        : std::nullopt;
    c.avg_file_complexity = j.contains("avg_file_complexity")
                                ? std::optional<double>(j.at("avg_file_complexity").get<double>())
                                : std::nullopt;
}

struct EvalStats {
    std::vector<FileResult> files;  // sorted by task_id
    int file_count = 0;
    int compiled_count = 0;
    double compile_rate = 0.0;
    std::optional<double> overall_pass1;
    std::optional<MeanStd> per_file_pass1;
    std::optional<GasComparison> gas;    // present when a baseline was supplied
    std::optional<VulnComparison> vuln;  // present when a baseline was supplied
    TokenReport tokens;
    ComplexitySummary complexity;
};

inline void to_json(json& j, const EvalStats& s) {
    j = json{{"files", s.files},
             {"file_count", s.file_count},
             {"compiled_count", s.compiled_count},
             {"compile_rate", s.compile_rate},
             {"tokens", s.tokens},
             {"complexity", s.complexity}};
    if (s.overall_pass1) j["overall_pass1"] = *s.overall_pass1;
    if (s.per_file_pass1) j["per_file_pass1"] = *s.per_file_pass1;
    if (s.gas) j["gas"] = *s.gas;
    if (s.vuln) j["vuln"] = *s.vuln;
}

inline void from_json(const json& j, EvalStats& s) {
    s.files = j.value("files", std::vector<FileResult>{});
    j.at("file_count").get_to(s.file_count);
    j.at("compiled_count").get_to(s.compiled_count);
    j.at("compile_rate").get_to(s.compile_rate);
    s.tokens = j.value("tokens", TokenReport{});
    s.complexity = j.value("complexity", ComplexitySummary{});
    s.overall_pass1 = j.contains("overall_pass1")
                          ? std::optional<double>(j.at("overall_pass1").get<double>())
                          : std::nullopt;
    s.per_file_pass1 = j.contains("per_file_pass1")
                           ? std::optional<MeanStd>(j.at("per_file_pass1").get<MeanStd>())
                           : std::nullopt;
    s.gas = j.contains("gas") ? std::optional<GasComparison>(j.at("gas").get<GasComparison>())
                              : std::nullopt;
    s.vuln = j.contains("vuln")
                 ? std::optional<VulnComparison>(j.at("vuln").get<VulnComparison>())
                 : std::nullopt;
}

inline EvalStats compute_stats(std::vector<FileResult> files,
                               const std::vector<FileResult>* baseline = nullptr) {
    std::sort(files.begin(), files.end(),
              [](const FileResult& a, const FileResult& b) { return a.task_id < b.task_id; });
    EvalStats s;
    s.file_count = static_cast<int>(files.size());
    for (const auto& f : files) {
        if (f.compiled) ++s.compiled_count;
    }
    if (!files.empty()) {
        s.compile_rate = compile_rate(files);
        std::int64_t total = 0;
        for (const auto& f : files) total += f.total_tests;
        if (total > 0) s.overall_pass1 = overall_pass1(files);
        if (s.compiled_count > 0) s.per_file_pass1 = per_file_pass1_stats(files);
    }
    s.tokens = token_report(files);

    s.complexity.compiled_files = s.compiled_count;
    if (s.compiled_count > 0) {
        double loc = 0, ploc = 0, cx = 0;
        for (const auto& f : files) {
            if (!f.compiled) continue;
            loc += f.source.loc;
            ploc += f.source.ploc;
            cx += f.source.file_complexity;
        }
        const auto n = static_cast<double>(s.compiled_count);
        s.complexity.avg_loc = loc / n;
        s.complexity.avg_ploc = ploc / n;
        s.complexity.avg_file_complexity = cx / n;
    }

    if (baseline != nullptr) {
        s.gas = gas_pairwise(files, *baseline);
        s.vuln = vuln_compare(files, *baseline);
    }
    s.files = std::move(files);
    return s;
}

enum class ReportFormat { json, csv, markdown };

inline ReportFormat report_format_from_string(const std::string& s) {
    if (s == "json") return ReportFormat::json;
    if (s == "csv") return ReportFormat::csv;
    if (s == "markdown") return ReportFormat::markdown;
    throw ValidationError("unknown report format: " + s);
}

namespace detail {

inline std::string fmt(double v, int decimals = 2) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

inline std::string fmt_opt(const std::optional<double>& v, int decimals = 2) {
    return v ? fmt(*v, decimals) : std::string("-");
}

}  // namespace detail

// Deterministic rendering: tasks sorted by id, sections in fixed order. The
// markdown tables mirror the published column layouts for overall results,
// gas, complexity, and vulnerabilities.
inline std::string emit_report(const EvalStats& s, ReportFormat format) {
    using detail::fmt;
    using detail::fmt_opt;

    if (format == ReportFormat::json) {
        const json j = s;
        return j.dump(2) + "\n";
    }

    if (format == ReportFormat::csv) {
        std::ostringstream out;
        out << "section,metric,value\n";
        out << "overall,file_count," << s.file_count << "\n";
        out << "overall,compiled_count," << s.compiled_count << "\n";
        out << "overall,compile_rate_pct," << fmt(100.0 * s.compile_rate) << "\n";
        if (s.overall_pass1) out << "overall,pass1_pct," << fmt(100.0 * *s.overall_pass1) << "\n";
        if (s.per_file_pass1) {
            out << "overall,per_file_pass1_mean_pct," << fmt(100.0 * s.per_file_pass1->mean)
                << "\n";
            out << "overall,per_file_pass1_std_pct," << fmt(100.0 * s.per_file_pass1->stddev)
                << "\n";
        }
        if (s.gas) {
            out << "gas,common_tests," << s.gas->common_tests << "\n";
            out << "gas,mean_ratio," << fmt_opt(s.gas->mean_ratio, 4) << "\n";
            out << "gas,trimmed_mean_5," << fmt_opt(s.gas->trimmed_mean_5, 4) << "\n";
            out << "gas,p90," << fmt_opt(s.gas->p90, 4) << "\n";
            out << "gas,file_count," << s.gas->file_count << "\n";
            out << "gas,files_better," << s.gas->files_better << "\n";
            out << "gas,files_worse," << s.gas->files_worse << "\n";
        }
        if (s.vuln) {
            out << "vuln,common_files," << s.vuln->common_files << "\n";
            out << "vuln,method_vuln," << s.vuln->method_vuln << "\n";
            out << "vuln,baseline_vuln," << s.vuln->baseline_vuln << "\n";
            out << "vuln,delta_pct," << fmt_opt(s.vuln->delta_pct) << "\n";
            out << "vuln,vuln_diff," << s.vuln->vuln_diff << "\n";
        }
        out << "tokens,total_prompt," << s.tokens.overall.prompt << "\n";
        out << "tokens,total_completion," << s.tokens.overall.completion << "\n";
        out << "tokens,coding_prompt," << s.tokens.coding.prompt << "\n";
        out << "tokens,coding_completion," << s.tokens.coding.completion << "\n";
        out << "tokens,refine_prompt," << s.tokens.refine.prompt << "\n";
        out << "tokens,refine_completion," << s.tokens.refine.completion << "\n";
        out << "tokens,refine_rounds," << s.tokens.refine_rounds << "\n";
        out << "tokens,avg_prompt_per_file," << fmt_opt(s.tokens.avg_prompt_per_file) << "\n";
        out << "tokens,avg_total_per_file," << fmt_opt(s.tokens.avg_total_per_file) << "\n";
        out << "complexity,avg_loc," << fmt_opt(s.complexity.avg_loc) << "\n";
        out << "complexity,avg_ploc," << fmt_opt(s.complexity.avg_ploc) << "\n";
        out << "complexity,avg_file_complexity," << fmt_opt(s.complexity.avg_file_complexity)
            << "\n";
        for (const auto& f : s.files) {
            out << "file," << f.task_id << ","
                << (f.compiled ? "compiled" : "not_compiled") << "\n";
        }
        return out.str();
    }

    std::ostringstream out;
    out << "# Evaluation Report\n\n";
    out << "## Overall\n\n";
    out << "| Files | Compiled | Compile Rate (%) | Pass@1 (%) | Per-File Pass@1 (%) |\n";
    out << "|---|---|---|---|---|\n";
    out << "| " << s.file_count << " | " << s.compiled_count << " | "
        << fmt(100.0 * s.compile_rate) << " | "
        << (s.overall_pass1 ? fmt(100.0 * *s.overall_pass1) : std::string("-")) << " | "
        << (s.per_file_pass1 ? fmt(100.0 * s.per_file_pass1->mean) + " ± " +
                                   fmt(100.0 * s.per_file_pass1->stddev)
                             : std::string("-"))
        << " |\n\n";

    if (s.gas) {
        out << "## Gas (pairwise vs baseline)\n\n";
        out << "| # Common | Mean Ratio | 5% Trimmed Mean | P90 | Files Better | Files Worse |\n";
        out << "|---|---|---|---|---|---|\n";
        out << "| " << s.gas->common_tests << " | " << fmt_opt(s.gas->mean_ratio, 4) << " | "
            << fmt_opt(s.gas->trimmed_mean_5, 4) << " | " << fmt_opt(s.gas->p90, 4) << " | "
            << s.gas->files_better << " | " << s.gas->files_worse << " |\n\n";
    }

    out << "## Code size and complexity\n\n";
    out << "| Compiled Files | Avg. LOC | Avg. PLOC | Avg. Cyclomatic Complexity |\n";
    out << "|---|---|---|---|\n";
    out << "| " << s.complexity.compiled_files << " | " << fmt_opt(s.complexity.avg_loc) << " | "
        << fmt_opt(s.complexity.avg_ploc) << " | " << fmt_opt(s.complexity.avg_file_complexity)
        << " |\n\n";

    if (s.vuln) {
        out << "## Vulnerabilities (vs baseline)\n\n";
        out << "| Common Files | Method Vuln | Baseline Vuln | Delta % vs Base | Vuln Diff |\n";
        out << "|---|---|---|---|---|\n";
        out << "| " << s.vuln->common_files << " | " << s.vuln->method_vuln << " | "
            << s.vuln->baseline_vuln << " | "
            << (s.vuln->delta_pct ? fmt(*s.vuln->delta_pct) : std::string("-")) << " | "
            << (s.vuln->vuln_diff >= 0 ? "+" : "") << s.vuln->vuln_diff << " |\n\n";
    }

    out << "## Tokens\n\n";
    out << "| Phase | Prompt | Completion | Total |\n";
    out << "|---|---|---|---|\n";
    out << "| coding | " << s.tokens.coding.prompt << " | " << s.tokens.coding.completion
        << " | " << s.tokens.coding.total() << " |\n";
    out << "| refine | " << s.tokens.refine.prompt << " | " << s.tokens.refine.completion
        << " | " << s.tokens.refine.total() << " |\n";
    out << "| overall | " << s.tokens.overall.prompt << " | " << s.tokens.overall.completion
        << " | " << s.tokens.overall.total() << " |\n\n";
    out << "Avg prompt/file: " << fmt_opt(s.tokens.avg_prompt_per_file)
        << "; avg total/file: " << fmt_opt(s.tokens.avg_total_per_file)
        << "; refine rounds: " << s.tokens.refine_rounds
        << "; avg refine prompt/round: " << fmt_opt(s.tokens.avg_refine_prompt_per_round)
        << "\n\n";

    out << "## Per-file results\n\n";
    out << "| Task | Compiled | Passed/Total | High | Medium | Low | LOC | Complexity |\n";
    out << "|---|---|---|---|---|---|---|---|\n";
    for (const auto& f : s.files) {
        out << "| " << f.task_id << " | " << (f.compiled ? "yes" : "no") << " | "
            << f.passed_tests << "/" << f.total_tests << " | " << f.findings.high << " | "
            << f.findings.medium << " | " << f.findings.low << " | " << f.source.loc << " | "
            << f.source.file_complexity << " |\n";
    }
    return out.str();
}

}  // namespace solharness
