#include "care/http_backend.hpp"

#include "care/error.hpp"

#include <httplib.h>

#include <cstdlib>
#include <thread>

namespace care {

using nlohmann::json;

namespace {

bool name_is_wire_safe(const std::string& name) {
    if (name.empty() || name.size() > 64) return false;
    for (char c : name) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
    }
    return true;
}

bool is_transient(int status) { return status == 429 || status >= 500; }

}  // namespace

HttpBackend::HttpBackend(HttpBackendConfig config)
    : config_(std::move(config)), in_flight_(std::max(1, config_.max_in_flight)) {
    if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key) {
        api_key_ = key;
    } else {
        throw Error(ErrorCode::ConfigError,
                    "live backend needs a credential in $" + config_.api_key_env);
    }
    auto scheme_end = config_.base_url.find("://");
    auto path_start = config_.base_url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    origin_ = config_.base_url.substr(0, path_start);
    path_prefix_ = path_start == std::string::npos ? "" : config_.base_url.substr(path_start);
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
}

HttpBackend::~HttpBackend() = default;

json HttpBackend::build_payload(const ChatRequest& request) const {
    json messages = json::array();
    for (const auto& m : request.messages) {
        json wire{{"role", to_string(m.role)}};
        if (m.role == MessageRole::Tool) {
            wire["tool_call_id"] = m.tool_call_id;
            wire["content"] = m.content;
        } else if (!m.tool_calls.empty()) {
            wire["content"] = nullptr;
            json calls = json::array();
            for (const auto& c : m.tool_calls) {
                calls.push_back({{"id", c.id},
                                 {"type", "function"},
                                 {"function", {{"name", c.name}, {"arguments", c.args.dump()}}}});
            }
            wire["tool_calls"] = std::move(calls);
        } else {
            wire["content"] = m.content;
        }
        if (m.role != MessageRole::Tool && name_is_wire_safe(m.name)) wire["name"] = m.name;
        messages.push_back(std::move(wire));
    }
    json payload{{"model", request.model.empty() ? config_.model : request.model},
                 {"messages", std::move(messages)},
                 {"temperature", request.temperature},
                 {"max_tokens", request.max_tokens}};
    if (!request.tool_schemas.empty()) payload["tools"] = request.tool_schemas;
    return payload;
}

ChatResponse HttpBackend::parse_completion(const json& body) {
    if (!body.contains("choices") || body.at("choices").empty()) {
        throw Error(ErrorCode::BackendError, "completion has no choices");
    }
    const auto& message = body.at("choices").at(0).at("message");
    ChatResponse out;
    if (message.contains("tool_calls") && message.at("tool_calls").is_array() &&
        !message.at("tool_calls").empty()) {
        for (const auto& call : message.at("tool_calls")) {
            const auto& fn = call.at("function");
            auto raw_args = fn.value("arguments", std::string{"{}"});
            auto args = json::parse(raw_args, nullptr, false);
            if (args.is_discarded()) args = json{{"_unparsed", raw_args}};
            out.tool_calls.push_back(
                ToolCall{call.value("id", std::string{}), fn.at("name").get<std::string>(), args});
        }
    } else {
        out.text = message.contains("content") && message.at("content").is_string()
                       ? message.at("content").get<std::string>()
                       : std::string{};
    }
    if (body.contains("usage")) {
        out.usage.prompt_tokens = body.at("usage").value("prompt_tokens", std::int64_t{0});
        out.usage.completion_tokens = body.at("usage").value("completion_tokens", std::int64_t{0});
    }
    return out;
}

ChatResponse HttpBackend::complete(const ChatRequest& request) {
    validate_request(request);
    auto payload = build_payload(request).dump();

    in_flight_.acquire();
    struct Release {
        std::counting_semaphore<1024>& s;
        ~Release() { s.release(); }
    } release{in_flight_};

    httplib::Client client(origin_);
    client.set_connection_timeout(config_.timeout);
    client.set_read_timeout(config_.timeout);
    client.set_write_timeout(config_.timeout);
    client.set_bearer_token_auth(api_key_);

    std::string last_error;
    auto backoff = config_.retry_backoff;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(backoff);
            backoff *= 2;
        }
        auto result = client.Post(path_prefix_ + "/chat/completions", payload, "application/json");
        if (!result) {
            last_error = "transport error: " + httplib::to_string(result.error());
            continue;
        }
        if (result->status == 200) {
            auto body = json::parse(result->body, nullptr, false);
            if (body.is_discarded()) throw Error(ErrorCode::BackendError, "completion is not JSON");
            return parse_completion(body);
        }
        last_error = "HTTP " + std::to_string(result->status) + ": " + result->body.substr(0, 512);
        if (!is_transient(result->status)) break;
    }
    throw Error(ErrorCode::BackendError, last_error, json{{"key", request.key.str()}});
}

}  // namespace care
