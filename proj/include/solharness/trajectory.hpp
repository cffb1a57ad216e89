#pragma once

// Turns recorded agent conversations into training datasets: per-round
// samples, cleaning, tracker/mix variants, task-level train/test splits,
// token-bounded truncation, and dataset statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "solharness/llm.hpp"
#include "solharness/model.hpp"

namespace solharness {

class IntegrityError : public Error {
public:
    using Error::Error;
};

class MissingSummaryError : public Error {
public:
    using Error::Error;
};

class DegenerateSummaryError : public Error {
public:
    using Error::Error;
};

struct Dataset {
    std::string name;
    std::vector<TrajectorySample> samples;
    int split_seed = 0;
};

// ---------------------------------------------------------------------------
// Recording

// One sample per conversation round: the coding round and every refinement
// round. A sample is the cumulative transcript prefix up to and including
// that round's final assistant output (fine-tuning needs the full context
// window, and ending on assistant output is what makes it a training pair).
inline std::vector<TrajectorySample> record_rounds(const RunState& state) {
    const auto& t = state.transcript;
    // Round boundaries: every user message after the first opens a new round.
    std::vector<std::size_t> starts;  // index where round i begins
    bool seen_first_user = false;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i].role == Role::user) {
            if (!seen_first_user) {
                seen_first_user = true;
            } else {
                starts.push_back(i);
            }
        }
    }

    std::vector<TrajectorySample> samples;
    const std::size_t rounds = starts.size() + 1;
    for (std::size_t r = 0; r < rounds; ++r) {
        const std::size_t begin = r == 0 ? 0 : starts[r - 1];
        const std::size_t end = r < starts.size() ? starts[r] : t.size();
        std::size_t last_assistant = std::string::npos;
        for (std::size_t i = begin; i < end; ++i) {
            if (t[i].role == Role::assistant) last_assistant = i;
        }
        if (last_assistant == std::string::npos) continue;  // round never answered
        TrajectorySample s;
        s.task_id = state.task_id;
        s.round = static_cast<int>(r);
        s.messages.assign(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(last_assistant) + 1);
        samples.push_back(std::move(s));
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Cleaning

// Strips run-internal annotations; roles, contents, and tool_call structures
// are preserved verbatim. Idempotent. A sample that loses referential
// integrity here was corrupt before cleaning — that is a bug, not data.
inline TrajectorySample clean(TrajectorySample sample) {
    for (auto& m : sample.messages) {
        m.metadata.clear();
    }
    try {
        validate_transcript(sample.messages);
    } catch (const ValidationError& e) {
        throw IntegrityError(std::string("cleaned sample lost referential integrity: ") +
                             e.what());
    }
    return sample;
}

// ---------------------------------------------------------------------------
// Dataset variants

enum class DatasetVariant { tracker, mix };

inline std::string to_string(DatasetVariant v) {
    return v == DatasetVariant::tracker ? "tracker" : "mix";
}

inline DatasetVariant dataset_variant_from_string(const std::string& s) {
    if (s == "tracker") return DatasetVariant::tracker;
    if (s == "mix") return DatasetVariant::mix;
    throw ValidationError("unknown dataset variant: " + s);
}

// tracker: cleaned round samples from full-requirement runs. mix: those plus
// the summary-requirement runs, each sample tagged with its origin. By
// default only successfully terminated runs are admitted (the distillation
// filter); include_all opens the gate for analysis datasets.
inline Dataset build_dataset(const std::vector<RunState>& runs, DatasetVariant variant,
                             bool include_all = false) {
    Dataset ds;
    ds.name = variant == DatasetVariant::tracker ? "dataset_tracker" : "dataset_mix";

    bool any_summary_run = false;
    for (const auto& run : runs) {
        if (run.summary_mode) any_summary_run = true;
    }
    if (variant == DatasetVariant::mix && !any_summary_run) {
        throw MissingSummaryError(
            "mix variant requires at least one summary-requirement run");
    }

    for (const auto& run : runs) {
        if (!include_all &&
            (!run.terminated || run.terminated->kind != TerminationKind::success)) {
            continue;
        }
        if (run.summary_mode && variant == DatasetVariant::tracker) continue;
        for (auto& sample : record_rounds(run)) {
            TrajectorySample cleaned = clean(std::move(sample));
            cleaned.variant_tags.insert(run.summary_mode ? "origin:summary" : "origin:full");
            ds.samples.push_back(std::move(cleaned));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Requirement summarization

inline constexpr const char* kDefaultSummarizerPrompt =
    "Compress the following implementation requirement into a concise description that "
    "preserves every functional and security obligation. Reply with the summary only.";

inline std::string summarize_requirement(const BenchmarkTask& task, Backend& llm) {
    if (task.requirement_full.empty()) {
        throw ValidationError("summarize_requirement: requirement_full is empty");
    }
    std::vector<Message> transcript{make_message(Role::system, kDefaultSummarizerPrompt),
                                    make_message(Role::user, task.requirement_full)};
    const auto result = llm.complete(transcript, {});
    const std::string& summary = result.message.content;
    if (summary.find_first_not_of(" \t\r\n") == std::string::npos) {
        throw DegenerateSummaryError("summarizer returned an empty summary for task " +
                                     task.task_id);
    }
    if (count_tokens(summary) >= count_tokens(task.requirement_full)) {
        throw DegenerateSummaryError("summary is not shorter than the requirement for task " +
                                     task.task_id);
    }
    return summary;
}

// ---------------------------------------------------------------------------
// Train/test split

// Task-level split: all samples of one task land on one side, so no task can
// leak across the boundary. Deterministic Fisher-Yates on the sorted task
// list (hand-rolled so the permutation is identical on every platform).
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double train_frac, int seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0)) {
        throw ValidationError("train_frac must lie strictly between 0 and 1");
    }
    std::set<std::string> task_set;
    for (const auto& s : ds.samples) task_set.insert(s.task_id);
    if (task_set.size() < 2) {
        throw ValidationError("split requires at least 2 distinct tasks, have " +
                              std::to_string(task_set.size()));
    }
    std::vector<std::string> tasks(task_set.begin(), task_set.end());
    std::mt19937 rng(static_cast<std::mt19937::result_type>(seed));
    for (std::size_t i = tasks.size() - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(tasks[i], tasks[j]);
    }
    const auto n_train = static_cast<std::size_t>(
        std::lround(train_frac * static_cast<double>(tasks.size())));
    std::set<std::string> train_tasks(tasks.begin(),
                                      tasks.begin() + static_cast<std::ptrdiff_t>(
                                                          std::min(n_train, tasks.size())));

    Dataset train, test;
    train.name = ds.name + "_train";
    test.name = ds.name + "_test";
    train.split_seed = test.split_seed = seed;
    for (const auto& s : ds.samples) {
        (train_tasks.contains(s.task_id) ? train : test).samples.push_back(s);
    }
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Truncation

enum class TruncateMode { forward, backward };

namespace detail {

inline std::string content_prefix_tokens(const std::string& content, std::int64_t budget) {
    if (budget <= 0) return {};
    const auto spans = token_spans(content);
    if (static_cast<std::int64_t>(spans.size()) <= budget) return content;
    return content.substr(0, spans[static_cast<std::size_t>(budget) - 1].end);
}

inline std::string content_suffix_tokens(const std::string& content, std::int64_t budget) {
    if (budget <= 0) return {};
    const auto spans = token_spans(content);
    if (static_cast<std::int64_t>(spans.size()) <= budget) return content;
    return content.substr(spans[spans.size() - static_cast<std::size_t>(budget)].begin);
}

// Drops tool messages whose assistant-side tool_call is no longer present
// with its call structure intact.
inline void drop_orphan_tool_messages(std::vector<Message>& messages) {
    std::set<std::string> known;
    std::vector<Message> kept;
    kept.reserve(messages.size());
    for (auto& m : messages) {
        for (const auto& tc : m.tool_calls) known.insert(tc.id);
        if (m.role == Role::tool && (!m.tool_call_id || !known.contains(*m.tool_call_id))) {
            continue;
        }
        kept.push_back(std::move(m));
    }
    messages = std::move(kept);
}

}  // namespace detail

// Bounds the sample to `limit` tokens (message token count: content plus
// tool-call names and arguments). Forward keeps the earliest tokens, backward
// the latest. Cuts land on message boundaries when possible; the one boundary
// message is cut inside its content at a token boundary, with its tool_calls
// stripped (their replies are not retained). Backward mode keeps the final
// assistant message whole whenever it alone fits, and drops any messages
// trailing it.
inline TrajectorySample truncate(const TrajectorySample& sample, std::int64_t limit,
                                 TruncateMode mode) {
    if (limit <= 0) throw ValidationError("truncate limit must be positive");
    std::int64_t total = 0;
    for (const auto& m : sample.messages) total += detail::message_tokens(m);
    if (total <= limit) return sample;

    TrajectorySample out;
    out.task_id = sample.task_id;
    out.round = sample.round;
    out.variant_tags = sample.variant_tags;

    if (mode == TruncateMode::forward) {
        std::int64_t budget = limit;
        for (const auto& m : sample.messages) {
            const std::int64_t cost = detail::message_tokens(m);
            if (cost <= budget) {
                out.messages.push_back(m);
                budget -= cost;
                continue;
            }
            Message partial = m;
            partial.tool_calls.clear();
            partial.content = detail::content_prefix_tokens(m.content, budget);
            if (!partial.content.empty()) out.messages.push_back(std::move(partial));
            break;
        }
        detail::drop_orphan_tool_messages(out.messages);
        return out;
    }

    // Backward: anchor on the final assistant message and drop anything
    // trailing it; with no assistant present, fall back to a plain suffix.
    std::size_t start_from = sample.messages.size();  // one past the last kept index
    for (std::size_t i = sample.messages.size(); i > 0; --i) {
        if (sample.messages[i - 1].role == Role::assistant) {
            start_from = i;
            break;
        }
    }

    std::vector<Message> reversed;
    std::int64_t budget = limit;
    const Message& last_kept = sample.messages[start_from - 1];
    const std::int64_t last_cost = detail::message_tokens(last_kept);
    if (last_cost > budget) {
        // Even the anchor alone exceeds the limit: keep its content suffix.
        Message partial = last_kept;
        partial.tool_calls.clear();
        partial.content = detail::content_suffix_tokens(last_kept.content, budget);
        out.messages.push_back(std::move(partial));
        detail::drop_orphan_tool_messages(out.messages);
        return out;
    }

    reversed.push_back(last_kept);
    budget -= last_cost;
    for (std::size_t i = start_from - 1; i > 0; --i) {
        const Message& m = sample.messages[i - 1];
        const std::int64_t cost = detail::message_tokens(m);
        if (cost <= budget) {
            reversed.push_back(m);
            budget -= cost;
            continue;
        }
        Message partial = m;
        partial.tool_calls.clear();
        partial.content = detail::content_suffix_tokens(m.content, budget);
        if (!partial.content.empty()) reversed.push_back(std::move(partial));
        break;
    }
    out.messages.assign(reversed.rbegin(), reversed.rend());
    detail::drop_orphan_tool_messages(out.messages);
    return out;
}

// ---------------------------------------------------------------------------
// Statistics

struct DatasetStats {
    int sample_count = 0;
    int samples_with_tool_calls = 0;
    double pct_tool_calls = 0.0;
    std::int64_t total_messages = 0;
    double avg_messages_per_sample = 0.0;
    std::int64_t tool_messages = 0;
    std::int64_t assistant_tool_messages = 0;

    friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

inline void to_json(json& j, const DatasetStats& s) {
    j = json{{"sample_count", s.sample_count},
             {"samples_with_tool_calls", s.samples_with_tool_calls},
             {"pct_tool_calls", s.pct_tool_calls},
             {"total_messages", s.total_messages},
             {"avg_messages_per_sample", s.avg_messages_per_sample},
             {"tool_messages", s.tool_messages},
             {"assistant_tool_messages", s.assistant_tool_messages}};
}

inline void from_json(const json& j, DatasetStats& s) {
    j.at("sample_count").get_to(s.sample_count);
    j.at("samples_with_tool_calls").get_to(s.samples_with_tool_calls);
    j.at("pct_tool_calls").get_to(s.pct_tool_calls);
    j.at("total_messages").get_to(s.total_messages);
    j.at("avg_messages_per_sample").get_to(s.avg_messages_per_sample);
    j.at("tool_messages").get_to(s.tool_messages);
    j.at("assistant_tool_messages").get_to(s.assistant_tool_messages);
}

inline DatasetStats dataset_stats(const Dataset& ds) {
    DatasetStats s;
    s.sample_count = static_cast<int>(ds.samples.size());
    for (const auto& sample : ds.samples) {
        s.total_messages += static_cast<std::int64_t>(sample.messages.size());
        bool has_calls = false;
        for (const auto& m : sample.messages) {
            if (m.role == Role::tool) ++s.tool_messages;
            if (m.role == Role::assistant && !m.tool_calls.empty()) {
                ++s.assistant_tool_messages;
                has_calls = true;
            }
        }
        if (has_calls) ++s.samples_with_tool_calls;
    }
    if (s.sample_count > 0) {
        s.pct_tool_calls = 100.0 * static_cast<double>(s.samples_with_tool_calls) /
                           static_cast<double>(s.sample_count);
        s.avg_messages_per_sample = static_cast<double>(s.total_messages) /
                                    static_cast<double>(s.sample_count);
    }
    return s;
}

inline std::string render_dataset_stats(const std::string& name, const DatasetStats& s) {
    char pct[32], avg[32];
    std::snprintf(pct, sizeof(pct), "%.2f", s.pct_tool_calls);
    std::snprintf(avg, sizeof(avg), "%.2f", s.avg_messages_per_sample);
    std::ostringstream out;
    out << "| Dataset | # Samples | % Tool Calls | # Total Msgs | # Avg Msgs/Sample | "
           "# Tool Msgs | # Assist. Tool Msgs |\n";
    out << "|---|---|---|---|---|---|---|\n";
    out << "| " << name << " | " << s.sample_count << " | " << pct << " | " << s.total_messages
        << " | " << avg << " | " << s.tool_messages << " | " << s.assistant_tool_messages
        << " |\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// JSONL export

// One sample per line: {"messages": [{role, content, tool_calls?,
// tool_call_id?}], "tags": [...]}.
inline std::string sample_to_jsonl_line(const TrajectorySample& s) {
    json messages = json::array();
    for (const auto& m : s.messages) {
        json jm{{"role", to_string(m.role)}, {"content", m.content}};
        if (!m.tool_calls.empty()) jm["tool_calls"] = m.tool_calls;
        if (m.tool_call_id) jm["tool_call_id"] = *m.tool_call_id;
        messages.push_back(std::move(jm));
    }
    const json line{{"messages", std::move(messages)},
                    {"tags", std::vector<std::string>(s.variant_tags.begin(),
                                                      s.variant_tags.end())}};
    return line.dump();
}

inline void write_dataset_jsonl(const Dataset& ds, const std::filesystem::path& file) {
    std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write dataset file: " + file.string());
    for (const auto& s : ds.samples) out << sample_to_jsonl_line(s) << "\n";
    if (!out.flush()) throw Error("short write on dataset file: " + file.string());
}

}  // namespace solharness
