#include "care/agents.hpp"

#include "care/error.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace care {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view role_name(AgentRole role) noexcept {
    switch (role) {
        case AgentRole::Inquiry: return "inquiry";
        case AgentRole::Milestone: return "milestone";
        case AgentRole::NeedsDiscovery: return "needs_discovery";
        case AgentRole::Ranking: return "ranking";
        case AgentRole::SolutionCraft: return "solution_craft";
    }
    return "";
}

std::string_view role_display_name(AgentRole role) noexcept {
    switch (role) {
        case AgentRole::Inquiry: return "Inquiry-Agent";
        case AgentRole::Milestone: return "Milestone-Agent";
        case AgentRole::NeedsDiscovery: return "NeedsDiscovery-Agent";
        case AgentRole::Ranking: return "Ranking-Agent";
        case AgentRole::SolutionCraft: return "SolutionCraft-Agent";
    }
    return "";
}

std::optional<AgentRole> role_from_name(std::string_view name) noexcept {
    for (auto role : kAllRoles) {
        if (role_name(role) == name) return role;
    }
    return std::nullopt;
}

std::string_view tool_name_text(ToolName tool) noexcept {
    switch (tool) {
        case ToolName::FillNeedSlot: return "fill_need_slot";
        case ToolName::GetAllNeeds: return "get_all_needs";
        case ToolName::LoadSolution: return "load_solution";
        case ToolName::AddNeedSlot: return "add_need_slot";
        case ToolName::GetClarifyNeeds: return "get_clarify_needs";
        case ToolName::GetUserWantNeeds: return "get_user_want_needs";
        case ToolName::WriteSolution: return "write_solution";
    }
    return "";
}

std::optional<ToolName> tool_from_text(std::string_view text) noexcept {
    for (auto tool : kAllTools) {
        if (tool_name_text(tool) == text) return tool;
    }
    return std::nullopt;
}

const std::set<ToolName>& allowed_tools(AgentRole role) {
    static const std::map<AgentRole, std::set<ToolName>> table = {
        {AgentRole::Inquiry, {ToolName::FillNeedSlot}},
        {AgentRole::Milestone, {ToolName::GetAllNeeds, ToolName::LoadSolution}},
        {AgentRole::NeedsDiscovery, {ToolName::AddNeedSlot, ToolName::GetAllNeeds}},
        {AgentRole::Ranking, {ToolName::GetClarifyNeeds}},
        {AgentRole::SolutionCraft, {ToolName::GetUserWantNeeds, ToolName::WriteSolution}},
    };
    return table.at(role);
}

const std::set<ControlToken>& terminal_tokens(AgentRole role) {
    static const std::map<AgentRole, std::set<ControlToken>> table = {
        {AgentRole::Inquiry, {ControlToken::Inquiry, ControlToken::BeginMilestone}},
        {AgentRole::Milestone, {ControlToken::MilestoneEnd, ControlToken::BeginPlan}},
        {AgentRole::NeedsDiscovery, {ControlToken::DiscoverEnd}},
        {AgentRole::Ranking, {}},
        {AgentRole::SolutionCraft, {ControlToken::SolutionEnd}},
    };
    return table.at(role);
}

namespace {

json function_schema(std::string_view name, std::string_view description, json properties,
                     std::vector<std::string> required) {
    return json{{"type", "function"},
                {"function",
                 {{"name", name},
                  {"description", description},
                  {"parameters",
                   {{"type", "object"}, {"properties", std::move(properties)}, {"required", required}}}}}};
}

json schema_for(ToolName tool) {
    switch (tool) {
        case ToolName::FillNeedSlot:
            return function_schema(
                "fill_need_slot", "Record the user's answer to a need slot that required clarification.",
                {{"need_id", {{"type", "string"}, {"description", "Id of the need slot, e.g. \"003\"."}}},
                 {"need", {{"type", "string"}, {"description", "Detailed description of the user's need."}}},
                 {"user_want", {{"type", "boolean"}, {"description", "false if the user does not want to answer."}}}},
                {"need_id", "need", "user_want"});
        case ToolName::GetAllNeeds:
            return function_schema("get_all_needs", "Retrieve all recorded user needs.", json::object(), {});
        case ToolName::LoadSolution:
            return function_schema("load_solution", "Load the current solution; may be empty.", json::object(), {});
        case ToolName::AddNeedSlot:
            return function_schema(
                "add_need_slot", "Add a need slot to the User Needs Memo.",
                {{"need", {{"type", "string"}, {"description", "The need, or a clarification question."}}},
                 {"Clarify", {{"type", "boolean"}, {"description", "true if the user must be asked."}}},
                 {"user_want", {{"type", {"boolean", "null"}}, {"description", "true for explicit needs, null when unasked."}}}},
                {"need", "Clarify"});
        case ToolName::GetClarifyNeeds:
            return function_schema("get_clarify_needs", "Retrieve need slots that require clarification.",
                                   json::object(), {});
        case ToolName::GetUserWantNeeds:
            return function_schema("get_user_want_needs", "Retrieve the needs the user wants addressed.",
                                   json::object(), {});
        case ToolName::WriteSolution:
            return function_schema(
                "write_solution", "Save the completed solution.",
                {{"solution", {{"type", "string"}, {"description", "The full solution in markdown."}}}},
                {"solution"});
    }
    return json::object();
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::ConfigError, "missing prompt file " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::string trim_copy(std::string_view text) {
    auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    auto last = text.find_last_not_of(" \t\r\n");
    return std::string(text.substr(first, last - first + 1));
}

}  // namespace

json tool_schemas(const std::set<ToolName>& tools) {
    json out = json::array();
    for (auto tool : tools) out.push_back(schema_for(tool));
    return out;
}

// ---------------------------------------------------------------------------

PromptPack PromptPack::load(const std::filesystem::path& directory) {
    auto file_for = [&](std::string_view stem) {
        return directory / (std::string(stem) + std::string(kPromptExtension));
    };
    auto intro = read_file(file_for(kTeamIntroFile));
    std::map<AgentRole, std::string> prompts;
    for (auto role : kAllRoles) prompts.emplace(role, read_file(file_for(role_name(role))));
    return PromptPack(std::move(intro), std::move(prompts));
}

PromptPack::PromptPack(std::string team_intro, std::map<AgentRole, std::string> role_prompts)
    : team_intro_(std::move(team_intro)), role_prompts_(std::move(role_prompts)) {
    for (auto role : kAllRoles) {
        if (!role_prompts_.contains(role)) {
            throw Error(ErrorCode::ConfigError,
                        "prompt pack has no prompt for " + std::string(role_name(role)));
        }
    }
}

const std::string& PromptPack::role_prompt(AgentRole role) const { return role_prompts_.at(role); }

std::string PromptPack::system_prompt(AgentRole role) const {
    static constexpr std::string_view kPlaceholder = "{team_intro}";
    auto prompt = role_prompt(role);
    for (auto pos = prompt.find(kPlaceholder); pos != std::string::npos;
         pos = prompt.find(kPlaceholder, pos)) {
        prompt.replace(pos, kPlaceholder.size(), "(the team introduction above)");
    }
    return trim_copy(team_intro_) + "\n\n" + trim_copy(prompt);
}

std::string PromptPack::rule_line(AgentRole role, std::string_view marker,
                                  std::string_view fallback) const {
    std::istringstream lines(role_prompt(role));
    std::string line;
    while (std::getline(lines, line)) {
        if (line.find(marker) != std::string::npos) return trim_copy(line);
    }
    return std::string(fallback);
}

AgentSpec make_agent_spec(AgentRole role, const PromptPack& prompts) {
    AgentSpec spec;
    spec.role = role;
    spec.system_prompt = prompts.system_prompt(role);
    spec.allowed_tools = allowed_tools(role);
    spec.terminal_tokens = terminal_tokens(role);

    std::string allow_list;
    for (auto tool : spec.allowed_tools) {
        allow_list += (allow_list.empty() ? "" : ", ") + std::string(tool_name_text(tool));
    }
    spec.tool_rule = prompts.rule_line(
        role, "You can only call functions",
        "You can only call functions: `[" + allow_list + "]`. YOU CANNOT CALL ANY OTHER FUNCTION NAME.");

    switch (role) {
        case AgentRole::Inquiry:
            spec.token_rule = prompts.rule_line(role, "MUST generate",
                                                "At the end of your questions, you MUST generate: `[Inquiry]`.");
            break;
        case AgentRole::Milestone:
            spec.token_rule = prompts.rule_line(
                role, "must generate", "When you are not calling functions, you must generate `[BeginPlan]` or `[MilestoneEnd]`.");
            break;
        case AgentRole::NeedsDiscovery:
            spec.token_rule = prompts.rule_line(role, "[DISCOVEREND]",
                                                "Only after adding all needs to `User Needs Memo`, you can generate `[DISCOVEREND]`.");
            break;
        case AgentRole::Ranking:
            spec.token_rule = prompts.rule_line(role, "json-formatted",
                                                "Finally, generate a json-formatted text that follows the format of the example.");
            break;
        case AgentRole::SolutionCraft:
            spec.token_rule = prompts.rule_line(role, "[SolutionEnd]",
                                                "Conclude your solution with `[SolutionEnd]` to signify completion.");
            break;
    }
    return spec;
}

// ---------------------------------------------------------------------------

namespace {

bool is_id_value(const json& v) {
    if (v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0)) return true;
    return v.is_string() && NeedId::parse(v.get<std::string>()).has_value();
}

bool is_bool_value(const json& v) {
    if (v.is_boolean()) return true;
    if (!v.is_string()) return false;
    auto s = v.get<std::string>();
    return s == "true" || s == "false";
}

bool bool_value(const json& v) { return v.is_boolean() ? v.get<bool>() : v.get<std::string>() == "true"; }

std::optional<NeedId> id_value(const json& v) {
    if (v.is_number()) return NeedId{static_cast<std::uint32_t>(v.get<long long>())};
    return NeedId::parse(v.get<std::string>());
}

struct ArgSpec {
    std::string name;
    bool required;
    std::function<bool(const json&)> check;
};

std::vector<ArgSpec> signature(ToolName tool) {
    auto is_string = [](const json& v) { return v.is_string(); };
    auto is_bool_or_null = [](const json& v) { return v.is_null() || is_bool_value(v); };
    switch (tool) {
        case ToolName::FillNeedSlot:
            return {{"need_id", true, is_id_value}, {"need", true, is_string}, {"user_want", true, is_bool_value}};
        case ToolName::AddNeedSlot:
            return {{"need", true, is_string},
                    {"Clarify", false, is_bool_value},
                    {"clarify", false, is_bool_value},
                    {"user_want", false, is_bool_or_null}};
        case ToolName::WriteSolution:
            return {{"solution", true, is_string}};
        default:
            return {};
    }
}

const json& clarify_arg(const json& args) {
    return args.contains("Clarify") ? args.at("Clarify") : args.at("clarify");
}

}  // namespace

std::optional<PolicyViolationInfo> enforce_tool_policy(AgentRole role, const ToolCall& call) {
    using Kind = PolicyViolationInfo::Kind;
    auto tool = tool_from_text(call.name);
    if (!tool) {
        return PolicyViolationInfo{Kind::UnknownTool, "unknown function '" + call.name + "'"};
    }
    if (!allowed_tools(role).contains(*tool)) {
        return PolicyViolationInfo{Kind::NotAllowed, std::string(role_display_name(role)) +
                                                         " may not call '" + call.name + "'"};
    }
    if (!call.args.is_object()) {
        return PolicyViolationInfo{Kind::BadArguments, call.name + " arguments must be an object"};
    }
    auto sig = signature(*tool);
    for (const auto& [key, value] : call.args.items()) {
        auto it = std::find_if(sig.begin(), sig.end(), [&](const ArgSpec& a) { return a.name == key; });
        if (it == sig.end()) {
            return PolicyViolationInfo{Kind::BadArguments, call.name + " has no parameter '" + key + "'"};
        }
        if (!it->check(value)) {
            return PolicyViolationInfo{Kind::BadArguments,
                                       call.name + " parameter '" + key + "' has the wrong type"};
        }
    }
    for (const auto& a : sig) {
        if (a.required && !call.args.contains(a.name)) {
            return PolicyViolationInfo{Kind::BadArguments,
                                       call.name + " is missing parameter '" + a.name + "'"};
        }
    }
    if (*tool == ToolName::AddNeedSlot && !call.args.contains("Clarify") && !call.args.contains("clarify")) {
        return PolicyViolationInfo{Kind::BadArguments, "add_need_slot is missing parameter 'Clarify'"};
    }
    return std::nullopt;
}

ExecutedToolCall execute_tool(const ToolCall& call, NeedsMemo& memo, SolutionStore& solutions) {
    ExecutedToolCall out{call, json::object(), true};
    const auto& args = call.args;
    try {
        auto tool = tool_from_text(call.name);
        if (!tool) throw Error(ErrorCode::PolicyViolation, "unknown function '" + call.name + "'");
        switch (*tool) {
            case ToolName::FillNeedSlot: {
                auto id = id_value(args.at("need_id"));
                if (!id) throw Error(ErrorCode::UnknownNeedId, "bad need_id");
                auto want = bool_value(args.at("user_want")) ? WantStatus::Wanted : WantStatus::Declined;
                auto slot = memo.fill_need_slot(*id, args.at("need").get<std::string>(), want);
                out.result = {{"need_id", slot.id.str()}, {"status", "filled"}};
                break;
            }
            case ToolName::AddNeedSlot: {
                bool clarify = bool_value(clarify_arg(args));
                WantStatus want = clarify ? WantStatus::Unanswered : WantStatus::Wanted;
                if (args.contains("user_want") && !args.at("user_want").is_null()) {
                    want = bool_value(args.at("user_want")) ? WantStatus::Wanted : WantStatus::Declined;
                }
                auto origin = clarify ? NeedOrigin::AgentInferred : NeedOrigin::UserExplicit;
                auto id = memo.add_need_slot(args.at("need").get<std::string>(), clarify, want, origin);
                out.result = {{"need_id", id.str()}, {"status", "added"}};
                break;
            }
            case ToolName::GetAllNeeds: {
                auto parts = memo.get_all_needs();
                out.result = ordered_json{{"User Wants Needs", slots_to_json(parts.wanted)},
                                          {"User do not want to answer needs", slots_to_json(parts.declined)},
                                          {"User Not Answered Needs", slots_to_json(parts.unanswered)}};
                break;
            }
            case ToolName::GetClarifyNeeds:
                out.result = slots_to_json(memo.get_clarify_needs());
                break;
            case ToolName::GetUserWantNeeds:
                out.result = slots_to_json(memo.get_user_want_needs());
                break;
            case ToolName::LoadSolution: {
                const auto& current = solutions.load();
                out.result = {{"solution", current ? current->body : std::string{}}};
                break;
            }
            case ToolName::WriteSolution: {
                const auto& written = solutions.write(args.at("solution").get<std::string>(), memo.revision());
                json refs = json::array();
                for (const auto& r : written.refs) refs.push_back(r.id.str());
                out.result = {{"status", "saved"}, {"need_refs", refs}};
                break;
            }
        }
    } catch (const Error& e) {
        out.ok = false;
        out.result = {{"error", error_code_name(e.code())}, {"message", e.what()}};
        if (!e.details().is_null()) out.result["details"] = e.details();
    } catch (const json::exception& e) {
        out.ok = false;
        out.result = {{"error", "BadArguments"}, {"message", e.what()}};
    }
    return out;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Channel channel) noexcept {
    switch (channel) {
        case Channel::Chat: return "chat";
        case Channel::Team: return "team";
        case Channel::Trace: return "trace";
    }
    return "team";
}

ordered_json transcript_entry_to_json(const TranscriptEntry& entry) {
    return ordered_json{{"author", entry.author}, {"channel", to_string(entry.channel)}, {"content", entry.content}};
}

TranscriptEntry transcript_entry_from_json(const json& value) {
    auto channel_text = value.at("channel").get<std::string>();
    Channel channel = channel_text == "chat" ? Channel::Chat
                      : channel_text == "trace" ? Channel::Trace
                                                : Channel::Team;
    return TranscriptEntry{value.at("author").get<std::string>(), channel, value.at("content").get<std::string>()};
}

std::vector<ChatMessage> assemble_context(AgentRole role, const PromptPack& prompts,
                                          std::span<const TranscriptEntry> transcript,
                                          std::string_view directive) {
    std::vector<ChatMessage> messages;
    messages.push_back(ChatMessage{MessageRole::System, "", prompts.system_prompt(role), {}, {}});
    for (const auto& entry : transcript) {
        if (entry.channel == Channel::Trace) continue;
        if (entry.channel == Channel::Chat && role != AgentRole::Inquiry) continue;
        ChatMessage m;
        m.content = entry.content;
        if (entry.author == role_name(role)) {
            m.role = MessageRole::Assistant;
            m.name = std::string(role_display_name(role));
        } else if (entry.author == kUserAuthor) {
            m.role = MessageRole::User;
            m.name = "User";
        } else if (entry.author == kEngineAuthor) {
            m.role = MessageRole::System;
        } else {
            m.role = MessageRole::User;
            auto author = role_from_name(entry.author);
            m.name = author ? std::string(role_display_name(*author)) : entry.author;
        }
        messages.push_back(std::move(m));
    }
    if (!directive.empty()) {
        messages.push_back(ChatMessage{MessageRole::User, "Orchestrator", std::string(directive), {}, {}});
    }
    return messages;
}

// ---------------------------------------------------------------------------

bool AgentTurnResult::has_token(ControlToken token) const {
    return std::find(tokens.begin(), tokens.end(), token) != tokens.end();
}

std::size_t AgentTurnResult::count_calls(ToolName tool) const {
    return static_cast<std::size_t>(
        std::count_if(tool_calls_executed.begin(), tool_calls_executed.end(),
                      [&](const ExecutedToolCall& c) { return c.call.name == tool_name_text(tool); }));
}

namespace {

std::string token_list(const std::set<ControlToken>& tokens) {
    std::string out;
    for (auto t : tokens) out += (out.empty() ? "" : " or ") + std::string("`") + std::string(token_text(t)) + "`";
    return out;
}

}  // namespace

AgentTurnResult run_agent_turn(const AgentSpec& spec, std::vector<ChatMessage> context,
                               Backend& backend, NeedsMemo& memo, SolutionStore& solutions,
                               const TurnOptions& options) {
    const auto& accepted = options.accepted_tokens.empty() ? spec.terminal_tokens : options.accepted_tokens;
    const bool require_token = options.require_token && !accepted.empty();
    auto schemas = tool_schemas(spec.allowed_tools);

    AgentTurnResult result;
    std::uint32_t local_index = 0;

    for (int attempt = 0;; ++attempt) {
        std::optional<TurnViolation> failure;
        int tool_rounds = 0;

        while (!failure) {
            ChatRequest request;
            request.messages = context;
            request.tool_schemas = schemas;
            request.temperature = options.temperature;
            request.model = options.model;
            request.max_tokens = options.max_tokens;
            request.key = CallKey{options.session_tag, std::string(role_name(spec.role)),
                                  options.next_turn_index ? options.next_turn_index() : local_index++};
            auto response = backend.complete(request);
            ++result.backend_calls;

            if (response.is_tool_call()) {
                auto calls = response.tool_calls;
                for (std::size_t i = 0; i < calls.size(); ++i) {
                    if (calls[i].id.empty()) {
                        calls[i].id = "call_" + std::to_string(result.backend_calls) + "_" + std::to_string(i);
                    }
                }
                context.push_back(ChatMessage{MessageRole::Assistant, std::string(role_display_name(spec.role)),
                                              "", calls, {}});

                if (tool_rounds >= spec.max_tool_rounds) {
                    for (const auto& c : calls) {
                        context.push_back(ChatMessage{MessageRole::Tool, "", R"({"error":"not executed"})", {}, c.id});
                    }
                    failure = TurnViolation{ErrorCode::ProtocolTimeout,
                                            "Too many function calls. Stop calling functions and finish your reply. " +
                                                spec.token_rule};
                    break;
                }
                ++tool_rounds;

                std::optional<PolicyViolationInfo> violation;
                for (const auto& c : calls) {
                    if ((violation = enforce_tool_policy(spec.role, c))) break;
                }
                if (violation) {
                    for (const auto& c : calls) {
                        context.push_back(ChatMessage{MessageRole::Tool, "",
                                                      R"({"error":"PolicyViolation","message":"not executed"})", {}, c.id});
                    }
                    failure = TurnViolation{ErrorCode::PolicyViolation, violation->message + ". " + spec.tool_rule};
                    break;
                }
                for (const auto& c : calls) {
                    auto executed = execute_tool(c, memo, solutions);
                    context.push_back(ChatMessage{MessageRole::Tool, "", executed.result.dump(), {}, c.id});
                    result.tool_calls_executed.push_back(std::move(executed));
                }
                continue;
            }

            auto raw = response.text.value_or("");
            auto parsed = parse_control_tokens(raw);
            result.raw_text = raw;
            result.visible_text = parsed.body;
            result.tokens = parsed.tokens;
            result.retries_used = attempt;
            context.push_back(ChatMessage{MessageRole::Assistant, std::string(role_display_name(spec.role)), raw, {}, {}});

            bool has_accepted = false;
            for (auto t : parsed.tokens) {
                if (!spec.terminal_tokens.contains(t) || !accepted.contains(t)) {
                    failure = TurnViolation{ErrorCode::ProtocolTimeout,
                                            "`" + std::string(token_text(t)) + "` is not expected here. Finish with " +
                                                token_list(accepted) + ". " + spec.token_rule};
                    break;
                }
                has_accepted = true;
            }
            if (!failure && require_token && !has_accepted) {
                failure = TurnViolation{ErrorCode::ProtocolTimeout,
                                        "Your reply is missing its control token. " + spec.token_rule};
            }
            if (!failure && options.validator) failure = options.validator(result);
            if (!failure) return result;
        }

        int budget = failure->retry_budget >= 0 ? std::min(failure->retry_budget, spec.max_retries) : spec.max_retries;
        if (attempt >= budget) {
            throw Error(failure->code,
                        std::string(role_display_name(spec.role)) + " failed after " + std::to_string(attempt) +
                            " retries: " + failure->note,
                        json{{"role", role_name(spec.role)}, {"retries", attempt}});
        }
        context.push_back(ChatMessage{MessageRole::System, "", failure->note, {}, {}});
    }
}

}  // namespace care
