#include "care/llm_backend.hpp"
#include "care/json_util.hpp"

#include "care/error.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace care {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(MessageRole role) noexcept {
    switch (role) {
        case MessageRole::System: return "system";
        case MessageRole::User: return "user";
        case MessageRole::Assistant: return "assistant";
        case MessageRole::Tool: return "tool";
    }
    return "user";
}

MessageRole message_role_from_string(std::string_view text) {
    if (text == "system") return MessageRole::System;
    if (text == "user") return MessageRole::User;
    if (text == "assistant") return MessageRole::Assistant;
    if (text == "tool") return MessageRole::Tool;
    throw Error(ErrorCode::StorageError, "unknown message role '" + std::string(text) + "'");
}

std::string CallKey::str() const {
    return "(" + session_tag + ", " + role + ", " + std::to_string(turn_index) + ")";
}

ChatResponse ChatResponse::from_text(std::string text) {
    ChatResponse r;
    r.text = std::move(text);
    return r;
}

ChatResponse ChatResponse::from_tool_calls(std::vector<ToolCall> calls) {
    ChatResponse r;
    r.tool_calls = std::move(calls);
    return r;
}

void validate_request(const ChatRequest& request) {
    if (request.messages.empty()) {
        throw Error(ErrorCode::BackendError, "chat request has no messages");
    }
    if (request.messages.front().role != MessageRole::System) {
        throw Error(ErrorCode::BackendError, "chat request must start with a system message");
    }
}

namespace {

std::string normalize_text(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    std::string line;
    auto flush_line = [&]() {
        auto end = line.find_last_not_of(" \t\r");
        out.append(end == std::string::npos ? std::string{} : line.substr(0, end + 1));
        line.clear();
    };
    for (char c : text) {
        if (c == '\n') {
            flush_line();
            out.push_back('\n');
        } else {
            line.push_back(c);
        }
    }
    flush_line();
    auto first = out.find_first_not_of('\n');
    auto last = out.find_last_not_of('\n');
    if (first == std::string::npos) return {};
    return out.substr(first, last - first + 1);
}

std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
        throw Error(ErrorCode::BackendError, "sha256 failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(length * 2);
    for (unsigned int i = 0; i < length; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 0xF]);
    }
    return out;
}

ordered_json tool_call_to_json(const ToolCall& call) {
    return ordered_json{{"id", call.id}, {"name", call.name}, {"args", to_ordered(call.args)}};
}

ToolCall tool_call_from_json(const json& value) {
    return ToolCall{value.value("id", std::string{}), value.at("name").get<std::string>(),
                    value.value("args", json::object())};
}

}  // namespace

std::string request_digest(const ChatRequest& request) {
    std::string canonical;
    for (const auto& m : request.messages) {
        canonical += to_string(m.role);
        canonical += '\x1f';
        canonical += m.name;
        canonical += '\x1f';
        canonical += normalize_text(m.content);
        for (const auto& call : m.tool_calls) {
            canonical += '\x1f';
            canonical += call.name;
            canonical += json(call.args).dump();  // object keys sorted
        }
        canonical += '\x1e';
    }
    return sha256_hex(canonical);
}

ordered_json message_to_json(const ChatMessage& message) {
    ordered_json out{{"role", to_string(message.role)}, {"name", message.name}, {"content", message.content}};
    if (!message.tool_calls.empty()) {
        auto calls = ordered_json::array();
        for (const auto& c : message.tool_calls) calls.push_back(tool_call_to_json(c));
        out["tool_calls"] = std::move(calls);
    }
    if (!message.tool_call_id.empty()) out["tool_call_id"] = message.tool_call_id;
    return out;
}

ChatMessage message_from_json(const json& value) {
    ChatMessage m;
    m.role = message_role_from_string(value.at("role").get<std::string>());
    m.name = value.value("name", std::string{});
    m.content = value.value("content", std::string{});
    if (value.contains("tool_calls")) {
        for (const auto& c : value.at("tool_calls")) m.tool_calls.push_back(tool_call_from_json(c));
    }
    m.tool_call_id = value.value("tool_call_id", std::string{});
    return m;
}

ordered_json response_to_json(const ChatResponse& response) {
    ordered_json out;
    if (response.is_tool_call()) {
        auto calls = ordered_json::array();
        for (const auto& c : response.tool_calls) calls.push_back(tool_call_to_json(c));
        out["tool_calls"] = std::move(calls);
    } else {
        out["text"] = response.text.value_or("");
    }
    out["usage"] = ordered_json{{"prompt_tokens", response.usage.prompt_tokens},
                                {"completion_tokens", response.usage.completion_tokens}};
    return out;
}

ChatResponse response_from_json(const json& value) {
    ChatResponse r;
    if (value.contains("tool_calls") && !value.at("tool_calls").empty()) {
        for (const auto& c : value.at("tool_calls")) r.tool_calls.push_back(tool_call_from_json(c));
    } else {
        r.text = value.value("text", std::string{});
    }
    if (value.contains("usage")) {
        r.usage.prompt_tokens = value.at("usage").value("prompt_tokens", std::int64_t{0});
        r.usage.completion_tokens = value.at("usage").value("completion_tokens", std::int64_t{0});
    }
    return r;
}

ordered_json fixture_to_json(const Fixture& fixture) {
    return ordered_json{{"session", fixture.key.session_tag},
                        {"role", fixture.key.role},
                        {"turn", fixture.key.turn_index},
                        {"request_digest", fixture.request_digest},
                        {"response", response_to_json(fixture.response)}};
}

Fixture fixture_from_json(const json& value) {
    Fixture f;
    f.key.session_tag = value.at("session").get<std::string>();
    f.key.role = value.at("role").get<std::string>();
    f.key.turn_index = value.at("turn").get<std::uint32_t>();
    if (value.contains("request_digest") && value.at("request_digest").is_string()) {
        f.request_digest = value.at("request_digest").get<std::string>();
    }
    f.response = response_from_json(value.at("response"));
    return f;
}

std::vector<Fixture> load_fixtures(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::StorageError, "cannot open fixture file " + path.string());
    std::vector<Fixture> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto value = json::parse(line, nullptr, false);
        if (value.is_discarded()) {
            throw Error(ErrorCode::StorageError,
                        path.string() + ":" + std::to_string(line_no) + ": invalid JSON");
        }
        out.push_back(fixture_from_json(value));
    }
    return out;
}

void save_fixtures(const std::filesystem::path& path, const std::vector<Fixture>& fixtures) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::StorageError, "cannot write fixture file " + path.string());
    for (const auto& f : fixtures) out << fixture_to_json(f).dump() << '\n';
    out.flush();
    if (!out) throw Error(ErrorCode::StorageError, "write failed for " + path.string());
}

ScriptedBackend::ScriptedBackend(std::vector<Fixture> fixtures, bool strict) : strict_(strict) {
    for (auto& f : fixtures) add(std::move(f));
}

void ScriptedBackend::add(Fixture fixture) {
    std::lock_guard lock(mutex_);
    auto key = fixture.key;
    if (!fixtures_.emplace(key, std::move(fixture)).second) {
        throw Error(ErrorCode::StorageError, "duplicate fixture key " + key.str());
    }
}

ChatResponse ScriptedBackend::complete(const ChatRequest& request) {
    validate_request(request);
    std::lock_guard lock(mutex_);
    ++calls_;
    auto it = fixtures_.find(request.key);
    if (it == fixtures_.end()) {
        std::vector<CallKey> candidates;
        for (const auto& [key, _] : fixtures_) {
            if (key.session_tag == request.key.session_tag) candidates.push_back(key);
        }
        if (candidates.empty()) {
            for (const auto& [key, _] : fixtures_) candidates.push_back(key);
        }
        auto distance = [&](const CallKey& k) {
            long role_penalty = k.role == request.key.role ? 0 : 1000;
            return role_penalty + std::labs(static_cast<long>(k.turn_index) -
                                            static_cast<long>(request.key.turn_index));
        };
        std::stable_sort(candidates.begin(), candidates.end(),
                         [&](const CallKey& a, const CallKey& b) { return distance(a) < distance(b); });
        if (candidates.size() > 3) candidates.resize(3);
        auto nearest = json::array();
        std::string listing;
        for (const auto& k : candidates) {
            nearest.push_back(k.str());
            listing += (listing.empty() ? "" : ", ") + k.str();
        }
        throw Error(ErrorCode::FixtureMiss,
                    "no fixture for " + request.key.str() + "; nearest: " +
                        (listing.empty() ? "none" : listing),
                    json{{"missing", request.key.str()}, {"nearest", nearest}});
    }
    if (strict_ && !it->second.request_digest.empty()) {
        auto digest = request_digest(request);
        if (digest != it->second.request_digest) {
            throw Error(ErrorCode::DigestMismatch,
                        "request for " + request.key.str() + " drifted from the recorded context",
                        json{{"key", request.key.str()},
                             {"expected", it->second.request_digest},
                             {"actual", digest}});
        }
    }
    return it->second.response;
}

std::size_t ScriptedBackend::call_count() const {
    std::lock_guard lock(mutex_);
    return calls_;
}

std::size_t ScriptedBackend::size() const {
    std::lock_guard lock(mutex_);
    return fixtures_.size();
}

RecordingBackend::RecordingBackend(Backend& inner, std::filesystem::path path)
    : inner_(inner), path_(std::move(path)) {}

RecordingBackend::~RecordingBackend() {
    try {
        flush();
    } catch (...) {
    }
}

ChatResponse RecordingBackend::complete(const ChatRequest& request) {
    auto response = inner_.complete(request);
    std::lock_guard lock(mutex_);
    captured_.push_back(Fixture{request.key, request_digest(request), response});
    return response;
}

void RecordingBackend::flush() {
    std::lock_guard lock(mutex_);
    if (path_.empty()) return;
    save_fixtures(path_, captured_);
}

std::vector<Fixture> RecordingBackend::fixtures() const {
    std::lock_guard lock(mutex_);
    return captured_;
}

}  // namespace care
