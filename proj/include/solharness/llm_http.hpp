#pragma once

// HTTP chat-completion backend. Kept out of llm.hpp so only binaries that
// actually talk to a server compile the socket code.
//
// Wire format (normative for this client, not for any particular vendor):
//   request  {model, messages[{role, content, tool_calls?, tool_call_id?}], tools?}
//   response {message: {role, content, tool_calls?}, usage: {prompt_tokens, completion_tokens}}

#include <cstdlib>
#include <string>
#include <utility>
#include <vector>

#include "httplib.h"
#include "solharness/llm.hpp"

namespace solharness {

namespace detail {

// Splits "http://host:port/some/path" into (scheme://host:port, /some/path).
inline std::pair<std::string, std::string> split_endpoint(const std::string& endpoint) {
    const auto scheme_end = endpoint.find("://");
    if (scheme_end == std::string::npos) {
        throw ValidationError("endpoint must include a scheme: " + endpoint);
    }
    const auto path_start = endpoint.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {endpoint, "/"};
    return {endpoint.substr(0, path_start), endpoint.substr(path_start)};
}

inline json wire_message(const Message& m) {
    // Run-internal metadata never leaves the process.
    json j{{"role", to_string(m.role)}, {"content", m.content}};
    if (!m.tool_calls.empty()) j["tool_calls"] = m.tool_calls;
    if (m.tool_call_id) j["tool_call_id"] = *m.tool_call_id;
    return j;
}

}  // namespace detail

class HttpBackend : public Backend {
public:
    explicit HttpBackend(BackendConfig config) : config_(std::move(config)) {
        validate_backend_config(config_);
        if (config_.kind != BackendKind::http) {
            throw ValidationError("HttpBackend requires kind=http");
        }
    }

    CompletionResult complete(const std::vector<Message>& transcript,
                              const std::vector<ToolSchema>& tools) override {
        check_completion_preconditions(transcript, tools);

        json request{{"model", config_.model_name}};
        auto& messages = request["messages"] = json::array();
        for (const auto& m : transcript) messages.push_back(detail::wire_message(m));
        if (!tools.empty()) request["tools"] = tools;
        const std::string body = request.dump();

        const auto [base, path] = detail::split_endpoint(*config_.endpoint);
        httplib::Client client(base);
        const auto timeout = config_.request_timeout;
        client.set_connection_timeout(timeout);
        client.set_read_timeout(timeout);
        client.set_write_timeout(timeout);

        httplib::Headers headers;
        if (const char* key = std::getenv(config_.api_key_env.c_str());
            key != nullptr && *key != '\0') {
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }

        std::string last_error;
        for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
            auto res = client.Post(path, headers, body, "application/json");
            if (!res) {
                last_error = "transport failure: " + httplib::to_string(res.error());
                continue;  // retryable
            }
            if (res->status == 401 || res->status == 403) {
                throw AuthError("authentication rejected (HTTP " +
                                std::to_string(res->status) + ") by " + *config_.endpoint);
            }
            if (res->status >= 500) {
                last_error = "server error HTTP " + std::to_string(res->status);
                continue;  // retryable
            }
            if (res->status != 200) {
                throw TransportError("unexpected HTTP " + std::to_string(res->status) +
                                     " from " + *config_.endpoint);
            }
            // A delivered 200 is never retried; parse failures surface as
            // malformed-response so the caller sees at-most-once semantics.
            return parse_response(res->body, tools);
        }
        throw TransportError("request failed after " + std::to_string(config_.max_retries + 1) +
                             " attempts: " + last_error);
    }

private:
    CompletionResult parse_response(const std::string& body,
                                    const std::vector<ToolSchema>& tools) const {
        json j = json::parse(body, nullptr, /*allow_exceptions=*/false);
        if (j.is_discarded() || !j.is_object() || !j.contains("message") ||
            !j.contains("usage")) {
            throw MalformedResponseError("response is not {message, usage}: " +
                                         body.substr(0, 200));
        }
        CompletionResult result;
        try {
            result.message = j.at("message").get<Message>();
            result.usage.prompt_tokens = j.at("usage").value("prompt_tokens", std::int64_t{0});
            result.usage.completion_tokens =
                j.at("usage").value("completion_tokens", std::int64_t{0});
        } catch (const json::exception& e) {
            throw MalformedResponseError(std::string("cannot decode response message: ") +
                                         e.what());
        }
        if (result.message.role != Role::assistant) {
            throw MalformedResponseError("response message role must be assistant");
        }
        check_reply_tools(result.message, tools);
        return result;
    }

    BackendConfig config_;
};

}  // namespace solharness
