#pragma once

#include <nlohmann/json.hpp>

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace care {

struct ToolCall {
    std::string id;
    std::string name;
    nlohmann::json args = nlohmann::json::object();

    bool operator==(const ToolCall&) const = default;
};

enum class MessageRole { System, User, Assistant, Tool };

std::string_view to_string(MessageRole role) noexcept;
MessageRole message_role_from_string(std::string_view text);

struct ChatMessage {
    MessageRole role = MessageRole::User;
    std::string name;  // author label for multi-agent transcripts
    std::string content;
    std::vector<ToolCall> tool_calls;  // assistant messages only
    std::string tool_call_id;          // tool messages only

    bool operator==(const ChatMessage&) const = default;
};

/// Identifies one backend call for fixture lookup: which session, which
/// agent role, and the role's call counter within that session.
struct CallKey {
    std::string session_tag;
    std::string role;
    std::uint32_t turn_index = 0;

    [[nodiscard]] std::string str() const;
    friend auto operator<=>(const CallKey&, const CallKey&) = default;
    bool operator==(const CallKey&) const = default;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    nlohmann::json tool_schemas = nlohmann::json::array();
    double temperature = 0.0;
    std::string model;
    int max_tokens = 4096;
    CallKey key;  // not sent over the wire
};

struct Usage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;

    bool operator==(const Usage&) const = default;
};

/// Exactly one of `text` / `tool_calls` is populated.
struct ChatResponse {
    std::optional<std::string> text;
    std::vector<ToolCall> tool_calls;
    Usage usage;

    [[nodiscard]] bool is_tool_call() const noexcept { return !tool_calls.empty(); }
    static ChatResponse from_text(std::string text);
    static ChatResponse from_tool_calls(std::vector<ToolCall> calls);

    bool operator==(const ChatResponse&) const = default;
};

/// Throws BackendError when the request violates its invariants.
void validate_request(const ChatRequest& request);

/// SHA-256 (hex) over normalized message texts. Tool-call ids, usage and
/// line-ending differences do not affect it.
std::string request_digest(const ChatRequest& request);

nlohmann::ordered_json message_to_json(const ChatMessage& message);
ChatMessage message_from_json(const nlohmann::json& value);
nlohmann::ordered_json response_to_json(const ChatResponse& response);
ChatResponse response_from_json(const nlohmann::json& value);

class Backend {
public:
    virtual ~Backend() = default;
    virtual ChatResponse complete(const ChatRequest& request) = 0;
};

struct Fixture {
    CallKey key;
    std::string request_digest;  // empty: not checked even in strict mode
    ChatResponse response;
};

nlohmann::ordered_json fixture_to_json(const Fixture& fixture);
Fixture fixture_from_json(const nlohmann::json& value);

/// Line-delimited fixture files, one record per call.
std::vector<Fixture> load_fixtures(const std::filesystem::path& path);
void save_fixtures(const std::filesystem::path& path, const std::vector<Fixture>& fixtures);

/// Replays recorded responses by key. No network, no credential.
class ScriptedBackend final : public Backend {
public:
    explicit ScriptedBackend(std::vector<Fixture> fixtures = {}, bool strict = false);

    void add(Fixture fixture);
    ChatResponse complete(const ChatRequest& request) override;

    [[nodiscard]] std::size_t call_count() const;
    [[nodiscard]] std::size_t size() const;
    [[nodiscard]] bool strict() const noexcept { return strict_; }

private:
    std::map<CallKey, Fixture> fixtures_;
    bool strict_;
    mutable std::mutex mutex_;
    std::size_t calls_ = 0;
};

/// Transparent pass-through that captures every call as a fixture.
class RecordingBackend final : public Backend {
public:
    RecordingBackend(Backend& inner, std::filesystem::path path);
    ~RecordingBackend() override;

    ChatResponse complete(const ChatRequest& request) override;

    /// Writes all captured fixtures. Throws StorageError.
    void flush();
    [[nodiscard]] std::vector<Fixture> fixtures() const;

private:
    Backend& inner_;
    std::filesystem::path path_;
    mutable std::mutex mutex_;
    std::vector<Fixture> captured_;
};

}  // namespace care
