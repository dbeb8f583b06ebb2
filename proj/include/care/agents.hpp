#pragma once

#include "care/error.hpp"
#include "care/llm_backend.hpp"
#include "care/needs_memo.hpp"
#include "care/protocol.hpp"
#include "care/solution_store.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace care {

enum class AgentRole { Inquiry, Milestone, NeedsDiscovery, Ranking, SolutionCraft };

inline constexpr std::array<AgentRole, 5> kAllRoles = {
    AgentRole::Inquiry, AgentRole::Milestone, AgentRole::NeedsDiscovery, AgentRole::Ranking,
    AgentRole::SolutionCraft,
};

/// Stable machine name: prompt file stem and fixture key ("needs_discovery").
std::string_view role_name(AgentRole role) noexcept;
/// How the agents address each other in prompts ("NeedsDiscovery-Agent").
std::string_view role_display_name(AgentRole role) noexcept;
std::optional<AgentRole> role_from_name(std::string_view name) noexcept;

enum class ToolName {
    FillNeedSlot,
    GetAllNeeds,
    LoadSolution,
    AddNeedSlot,
    GetClarifyNeeds,
    GetUserWantNeeds,
    WriteSolution,
};

inline constexpr std::array<ToolName, 7> kAllTools = {
    ToolName::FillNeedSlot,    ToolName::GetAllNeeds,      ToolName::LoadSolution,
    ToolName::AddNeedSlot,     ToolName::GetClarifyNeeds,  ToolName::GetUserWantNeeds,
    ToolName::WriteSolution,
};

std::string_view tool_name_text(ToolName tool) noexcept;
std::optional<ToolName> tool_from_text(std::string_view text) noexcept;

/// The allow-list each role is held to.
const std::set<ToolName>& allowed_tools(AgentRole role);
/// Tokens a role may end a reply with. Ranking has none: it answers in JSON.
const std::set<ControlToken>& terminal_tokens(AgentRole role);

/// OpenAI function-tool declarations for the given tools.
nlohmann::json tool_schemas(const std::set<ToolName>& tools);

// ---------------------------------------------------------------------------
// Prompt pack
// ---------------------------------------------------------------------------

inline constexpr std::string_view kTeamIntroFile = "team_intro";
inline constexpr std::string_view kPromptExtension = ".md";

/// Role prompts loaded from a directory holding team_intro.md plus one
/// <role_name>.md per role. A role prompt may reference the team
/// introduction with the `{team_intro}` placeholder.
class PromptPack {
public:
    /// Throws ConfigError naming the first missing or unreadable file.
    static PromptPack load(const std::filesystem::path& directory);

    PromptPack(std::string team_intro, std::map<AgentRole, std::string> role_prompts);

    [[nodiscard]] const std::string& team_intro() const noexcept { return team_intro_; }
    [[nodiscard]] const std::string& role_prompt(AgentRole role) const;

    /// Team introduction first, then the role prompt.
    [[nodiscard]] std::string system_prompt(AgentRole role) const;

    /// First line of the role prompt containing `marker`, trimmed; the
    /// fallback when the prompt has no such line.
    [[nodiscard]] std::string rule_line(AgentRole role, std::string_view marker,
                                        std::string_view fallback) const;

private:
    std::string team_intro_;
    std::map<AgentRole, std::string> role_prompts_;
};

// ---------------------------------------------------------------------------
// Agent specs and tool policy
// ---------------------------------------------------------------------------

struct AgentSpec {
    AgentRole role = AgentRole::Inquiry;
    std::string system_prompt;
    std::set<ToolName> allowed_tools;
    std::set<ControlToken> terminal_tokens;
    int max_tool_rounds = 8;
    int max_retries = 2;
    // Corrective notes, quoted from the role prompt.
    std::string tool_rule;
    std::string token_rule;
};

AgentSpec make_agent_spec(AgentRole role, const PromptPack& prompts);

struct PolicyViolationInfo {
    enum class Kind { UnknownTool, NotAllowed, BadArguments };
    Kind kind;
    std::string message;
};

/// ok (nullopt) iff the tool is on the role's allow-list and its arguments
/// typecheck. Never throws.
std::optional<PolicyViolationInfo> enforce_tool_policy(AgentRole role, const ToolCall& call);

// ---------------------------------------------------------------------------
// Transcript and context assembly
// ---------------------------------------------------------------------------

/// Chat: what the user sees (user messages, Inquiry replies). Team: hand-offs
/// between agents. Trace: tool activity, kept for export only.
enum class Channel { Chat, Team, Trace };

std::string_view to_string(Channel channel) noexcept;

inline constexpr std::string_view kUserAuthor = "user";
inline constexpr std::string_view kEngineAuthor = "engine";

struct TranscriptEntry {
    std::string author;  // "user", "engine", or a role name
    Channel channel = Channel::Team;
    std::string content;  // raw text, control tokens included

    bool operator==(const TranscriptEntry&) const = default;
};

nlohmann::ordered_json transcript_entry_to_json(const TranscriptEntry& entry);
TranscriptEntry transcript_entry_from_json(const nlohmann::json& value);

/// [system: team intro + role prompt] ++ the shared transcript as seen by
/// `role` ++ the directive, if any. Only the Inquiry agent sees the chat
/// channel; trace entries are never sent.
std::vector<ChatMessage> assemble_context(AgentRole role, const PromptPack& prompts,
                                          std::span<const TranscriptEntry> transcript,
                                          std::string_view directive = {});

// ---------------------------------------------------------------------------
// Tool execution and the turn loop
// ---------------------------------------------------------------------------

struct ExecutedToolCall {
    ToolCall call;
    nlohmann::json result;
    bool ok = true;

    bool operator==(const ExecutedToolCall&) const = default;
};

/// Runs an allowed call against the memo / solution store. Store errors are
/// returned to the agent as {"error": code, "message": ...}, not thrown.
ExecutedToolCall execute_tool(const ToolCall& call, NeedsMemo& memo, SolutionStore& solutions);

struct AgentTurnResult {
    std::string visible_text;
    std::string raw_text;
    std::vector<ExecutedToolCall> tool_calls_executed;
    std::vector<ControlToken> tokens;
    int retries_used = 0;
    int backend_calls = 0;

    [[nodiscard]] bool has_token(ControlToken token) const;
    [[nodiscard]] std::size_t count_calls(ToolName tool) const;

    bool operator==(const AgentTurnResult&) const = default;
};

/// A reason to reject an otherwise well-formed reply and re-prompt.
struct TurnViolation {
    ErrorCode code = ErrorCode::ProtocolTimeout;
    std::string note;       // corrective system note sent on retry
    int retry_budget = -1;  // < 0: use the spec's max_retries
};

using TurnValidator = std::function<std::optional<TurnViolation>(const AgentTurnResult&)>;

struct TurnOptions {
    std::string session_tag;
    std::function<std::uint32_t()> next_turn_index;  // per-role call counter
    std::string model;
    double temperature = 0.0;
    int max_tokens = 4096;
    /// Tokens acceptable for this turn; empty means the role's terminal set.
    std::set<ControlToken> accepted_tokens;
    bool require_token = true;
    TurnValidator validator;
};

/// Sends the context, executes tool calls the policy allows, and repeats
/// until a text reply passes validation. A rejected reply gets a corrective
/// system note and another attempt, up to max_retries. Backend calls are
/// bounded by (max_tool_rounds + 1) * (max_retries + 1).
///
/// Throws PolicyViolation, ProtocolTimeout, the validator's error code, or
/// whatever the backend throws.
AgentTurnResult run_agent_turn(const AgentSpec& spec, std::vector<ChatMessage> context,
                               Backend& backend, NeedsMemo& memo, SolutionStore& solutions,
                               const TurnOptions& options);

}  // namespace care
