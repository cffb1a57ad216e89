#pragma once

// Chat-completion backend abstraction: the Backend interface, a deterministic
// scripted mock, and the default token accounting used for budgets, pruning,
// and truncation. The HTTP implementation lives in llm_http.hpp so that only
// binaries that need networking pull in the socket code.

#include <cctype>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "solharness/model.hpp"

namespace solharness {

// ---------------------------------------------------------------------------
// Token accounting
//
// Default tokenizer: a maximal run of alphanumeric bytes (or bytes >= 0x80,
// so multi-byte UTF-8 sequences stay whole) counts as one token; every other
// non-whitespace byte counts as one token; whitespace counts zero. This is a
// deterministic, monotone approximation — budgets and truncation only need
// consistency, and the tokenizer is pluggable at the call sites that matter.

struct TokenSpan {
    std::size_t begin = 0;
    std::size_t end = 0;  // half-open byte range

    friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

namespace detail {

inline bool word_byte(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }

template <typename Emit>
inline void scan_tokens(std::string_view text, Emit&& emit) {
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        if (c < 0x80 && std::isspace(c)) {
            ++i;
        } else if (word_byte(c)) {
            std::size_t j = i + 1;
            while (j < text.size() && word_byte(static_cast<unsigned char>(text[j]))) ++j;
            emit(i, j);
            i = j;
        } else {
            emit(i, i + 1);
            ++i;
        }
    }
}

}  // namespace detail

inline std::int64_t count_tokens(std::string_view text) {
    std::int64_t n = 0;
    detail::scan_tokens(text, [&](std::size_t, std::size_t) { ++n; });
    return n;
}

inline std::vector<TokenSpan> token_spans(std::string_view text) {
    std::vector<TokenSpan> spans;
    detail::scan_tokens(text, [&](std::size_t b, std::size_t e) { spans.push_back({b, e}); });
    return spans;
}

// ---------------------------------------------------------------------------
// Backend configuration and tool schemas

enum class BackendKind { http, mock };

inline std::string to_string(BackendKind k) { return k == BackendKind::http ? "http" : "mock"; }

inline BackendKind backend_kind_from_string(const std::string& s) {
    if (s == "http") return BackendKind::http;
    if (s == "mock") return BackendKind::mock;
    throw ValidationError("unknown backend kind: " + s);
}

struct BackendConfig {
    BackendKind kind = BackendKind::mock;
    std::optional<std::string> endpoint;  // required for http
    std::string model_name = "scripted";
    std::string api_key_env = "SOLHARNESS_API_KEY";  // env var *name*, never a secret
    int max_retries = 2;
    std::chrono::milliseconds request_timeout{30000};
};

inline void validate_backend_config(const BackendConfig& c) {
    if (c.kind == BackendKind::http && (!c.endpoint || c.endpoint->empty())) {
        throw ValidationError("http backend requires an endpoint");
    }
    if (c.max_retries < 0) throw ValidationError("max_retries must be nonnegative");
}

struct ToolParam {
    std::string name;
    std::string type = "string";
    bool required = true;

    friend bool operator==(const ToolParam&, const ToolParam&) = default;
};

struct ToolSchema {
    std::string name;
    std::string description;
    std::vector<ToolParam> parameters;

    friend bool operator==(const ToolSchema&, const ToolSchema&) = default;
};

inline void to_json(json& j, const ToolParam& p) {
    j = json{{"name", p.name}, {"type", p.type}, {"required", p.required}};
}

inline void from_json(const json& j, ToolParam& p) {
    j.at("name").get_to(p.name);
    p.type = j.value("type", std::string("string"));
    p.required = j.value("required", true);
}

inline void to_json(json& j, const ToolSchema& t) {
    j = json{{"name", t.name}, {"description", t.description}, {"parameters", t.parameters}};
}

inline void from_json(const json& j, ToolSchema& t) {
    j.at("name").get_to(t.name);
    t.description = j.value("description", std::string{});
    t.parameters = j.value("parameters", std::vector<ToolParam>{});
}

inline void validate_tools(const std::vector<ToolSchema>& tools) {
    std::set<std::string> names;
    for (const auto& t : tools) {
        if (!names.insert(t.name).second) {
            throw ValidationError("duplicate tool name in request: " + t.name);
        }
    }
}

// ---------------------------------------------------------------------------
// Backend interface

class TransportError : public Error {
public:
    using Error::Error;
};

class AuthError : public Error {
public:
    using Error::Error;
};

class ScriptExhaustedError : public Error {
public:
    using Error::Error;
};

class MalformedResponseError : public Error {
public:
    using Error::Error;
};

struct CompletionResult {
    Message message;  // role == assistant
    TokenUsage usage;  // prompt/completion filled; phase/round set by the caller
};

inline void check_completion_preconditions(const std::vector<Message>& transcript,
                                           const std::vector<ToolSchema>& tools) {
    if (transcript.empty()) throw ValidationError("complete() requires a non-empty transcript");
    const Role last = transcript.back().role;
    if (last != Role::user && last != Role::tool) {
        throw ValidationError("complete() requires the last message to be user or tool");
    }
    validate_tools(tools);
}

inline void check_reply_tools(const Message& reply, const std::vector<ToolSchema>& tools) {
    for (const auto& tc : reply.tool_calls) {
        bool known = false;
        for (const auto& t : tools) {
            if (t.name == tc.tool_name) known = true;
        }
        if (!known) {
            throw MalformedResponseError("assistant called undeclared tool: " + tc.tool_name);
        }
    }
}

class Backend {
public:
    virtual ~Backend() = default;
    virtual CompletionResult complete(const std::vector<Message>& transcript,
                                      const std::vector<ToolSchema>& tools) = 0;
};

namespace detail {

inline std::int64_t message_tokens(const Message& m) {
    std::int64_t n = count_tokens(m.content);
    for (const auto& tc : m.tool_calls) {
        n += count_tokens(tc.tool_name) + count_tokens(tc.arguments.dump());
    }
    return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scripted mock
//
// The script is an ordered list of canned assistant messages; call k of a
// straight-through run receives entry k. Rather than keeping a call counter,
// the mock indexes the script by the number of assistant messages already in
// the transcript it is shown — the same information, but recoverable from a
// checkpoint, which is what makes resumed runs replay identically.

class MockBackend : public Backend {
public:
    explicit MockBackend(std::vector<Message> script) : script_(std::move(script)) {
        for (const auto& m : script_) {
            if (m.role != Role::assistant) {
                throw ValidationError("mock script entries must have role assistant");
            }
        }
    }

    CompletionResult complete(const std::vector<Message>& transcript,
                              const std::vector<ToolSchema>& tools) override {
        check_completion_preconditions(transcript, tools);
        std::size_t index = 0;
        for (const auto& m : transcript) {
            if (m.role == Role::assistant) ++index;
        }
        if (index >= script_.size()) {
            throw ScriptExhaustedError("mock script exhausted after " +
                                       std::to_string(script_.size()) + " completions");
        }
        const Message& reply = script_[index];
        check_reply_tools(reply, tools);

        CompletionResult result;
        result.message = reply;
        for (const auto& m : transcript) {
            result.usage.prompt_tokens += detail::message_tokens(m);
        }
        result.usage.completion_tokens = detail::message_tokens(reply);
        return result;
    }

    std::size_t script_size() const { return script_.size(); }

private:
    std::vector<Message> script_;
};

// Script file format: {"completions": [Message, ...]}.
inline std::vector<Message> load_mock_script(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw Error("cannot open mock script: " + file.string());
    json j = json::parse(in, nullptr, true, /*ignore_comments=*/false);
    if (!j.is_object() || !j.contains("completions")) {
        throw ValidationError("mock script must be an object with a 'completions' array: " +
                              file.string());
    }
    return j.at("completions").get<std::vector<Message>>();
}

}  // namespace solharness
