#pragma once

#include "care/needs_memo.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace care {

// ---------------------------------------------------------------------------
// Control tokens
// ---------------------------------------------------------------------------

enum class ControlToken { BeginMilestone, Inquiry, MilestoneEnd, BeginPlan, DiscoverEnd, SolutionEnd };

inline constexpr std::array<ControlToken, 6> kAllControlTokens = {
    ControlToken::BeginMilestone, ControlToken::Inquiry,     ControlToken::MilestoneEnd,
    ControlToken::BeginPlan,      ControlToken::DiscoverEnd, ControlToken::SolutionEnd,
};

/// Exact, case-sensitive surface form, e.g. "[DISCOVEREND]".
std::string_view token_text(ControlToken token) noexcept;
std::optional<ControlToken> token_from_text(std::string_view text) noexcept;

struct TokenHit {
    ControlToken token;
    std::size_t body_offset;  // where the token sat, in body coordinates

    bool operator==(const TokenHit&) const = default;
};

struct ParsedTokens {
    std::vector<ControlToken> tokens;
    std::vector<TokenHit> hits;
    std::string body;
};

/// Strips every control token from `text`. Whitespace adjacent to a removed
/// token collapses into a single separator (a newline if it contained one),
/// and the body is trimmed. Unknown bracketed strings stay in the body.
ParsedTokens parse_control_tokens(std::string_view text);

/// Inserts each token's surface form back at its recorded offset.
std::string reinsert_tokens(const ParsedTokens& parsed);

// ---------------------------------------------------------------------------
// Ranking output
// ---------------------------------------------------------------------------

struct RankedQuestion {
    NeedId need_id;
    std::string question;

    bool operator==(const RankedQuestion&) const = default;
};

struct QuestionGroup {
    std::string topic;
    std::vector<RankedQuestion> questions;

    bool operator==(const QuestionGroup&) const = default;
};

struct DroppedRef {
    std::string topic;
    std::string raw_need_id;
    std::string reason;  // "unknown", "already_clarified", "duplicate", "malformed"
};

struct RankingResult {
    std::vector<QuestionGroup> groups;
    std::vector<DroppedRef> dropped;
};

/// Pulls the single JSON object out of an agent reply: the first fenced
/// block if present, otherwise the outermost brace span.
std::optional<std::string> extract_json_object(std::string_view text);

/// Parses the ranking agent's grouped questions, keeping only questions
/// whose need_id resolves to a live slot that still needs clarification.
/// Throws MalformedJson, or EmptyRanking (details list the dropped refs).
RankingResult parse_ranking_output(std::string_view text, const NeedsMemo& memo);

nlohmann::ordered_json group_to_json(const QuestionGroup& group);
QuestionGroup group_from_json(const nlohmann::json& value);

// ---------------------------------------------------------------------------
// Need-ID citations
// ---------------------------------------------------------------------------

struct NeedRef {
    NeedId id;
    std::size_t start = 0;  // byte span of "Need ID: <digits>"
    std::size_t end = 0;

    bool operator==(const NeedRef&) const = default;
};

struct AnnotatedSolution {
    std::string body;
    std::vector<NeedRef> refs;
    std::uint64_t revision_basis = 0;

    bool operator==(const AnnotatedSolution&) const = default;
};

/// Finds every `Need ID: <digits>` citation (case-sensitive label, spaces
/// allowed after the colon). Surrounding parentheses or backticks are not
/// part of the span.
std::vector<NeedRef> extract_need_refs(std::string_view body);

AnnotatedSolution annotate_solution(std::string body, std::uint64_t revision_basis);

struct RefReport {
    std::vector<NeedId> dangling;        // cited but absent or not wanted
    std::vector<NeedId> uncited_wanted;  // wanted but never cited (warning)
};

RefReport validate_solution_refs(const AnnotatedSolution& solution, const NeedsMemo& memo);

nlohmann::ordered_json solution_to_json(const AnnotatedSolution& solution);
AnnotatedSolution solution_from_json(const nlohmann::json& value);

}  // namespace care
