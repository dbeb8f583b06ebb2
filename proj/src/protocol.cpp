#include "care/protocol.hpp"

#include "care/error.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace care {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

std::optional<ControlToken> token_at(std::string_view text, std::size_t pos) {
    for (auto token : kAllControlTokens) {
        auto surface = token_text(token);
        if (text.substr(pos, surface.size()) == surface) return token;
    }
    return std::nullopt;
}

}  // namespace

std::string_view token_text(ControlToken token) noexcept {
    switch (token) {
        case ControlToken::BeginMilestone: return "[BeginMilestone]";
        case ControlToken::Inquiry: return "[Inquiry]";
        case ControlToken::MilestoneEnd: return "[MilestoneEnd]";
        case ControlToken::BeginPlan: return "[BeginPlan]";
        case ControlToken::DiscoverEnd: return "[DISCOVEREND]";
        case ControlToken::SolutionEnd: return "[SolutionEnd]";
    }
    return "";
}

std::optional<ControlToken> token_from_text(std::string_view text) noexcept {
    for (auto token : kAllControlTokens) {
        if (token_text(token) == text) return token;
    }
    return std::nullopt;
}

ParsedTokens parse_control_tokens(std::string_view text) {
    ParsedTokens out;

    // Split into the text pieces between tokens.
    std::vector<std::string_view> pieces;
    std::vector<ControlToken> between;
    std::size_t piece_start = 0;
    for (std::size_t pos = 0; pos < text.size();) {
        if (text[pos] == '[') {
            if (auto token = token_at(text, pos)) {
                pieces.push_back(text.substr(piece_start, pos - piece_start));
                between.push_back(*token);
                pos += token_text(*token).size();
                piece_start = pos;
                continue;
            }
        }
        ++pos;
    }
    pieces.push_back(text.substr(piece_start));

    // Whitespace touching a removed token collapses into one separator:
    // a newline if any of it was a newline, a space otherwise.
    bool newline_pending = false;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        auto piece = pieces[i];
        const bool after_token = i > 0;
        const bool before_token = i < between.size();

        std::size_t lead = 0;
        while (lead < piece.size() && is_space(piece[lead])) ++lead;
        if (after_token && piece.substr(0, lead).find('\n') != std::string_view::npos) {
            newline_pending = true;
        }
        piece.remove_prefix(lead);

        std::size_t trail = 0;
        while (trail < piece.size() && is_space(piece[piece.size() - 1 - trail])) ++trail;
        auto trailing_ws = piece.substr(piece.size() - trail);
        piece.remove_suffix(trail);

        if (!piece.empty()) {
            if (!out.body.empty()) out.body.push_back(newline_pending ? '\n' : ' ');
            out.body.append(piece);
            newline_pending = false;
        }
        if (before_token) {
            if (trailing_ws.find('\n') != std::string_view::npos) newline_pending = true;
            out.tokens.push_back(between[i]);
            out.hits.push_back(TokenHit{between[i], out.body.size()});
        }
    }
    return out;
}

std::string reinsert_tokens(const ParsedTokens& parsed) {
    std::string out = parsed.body;
    for (auto it = parsed.hits.rbegin(); it != parsed.hits.rend(); ++it) {
        out.insert(it->body_offset, " " + std::string(token_text(it->token)) + " ");
    }
    return out;
}

std::optional<std::string> extract_json_object(std::string_view text) {
    auto fence = text.find("```");
    if (fence != std::string_view::npos) {
        auto line_end = text.find('\n', fence);
        if (line_end != std::string_view::npos) {
            auto close = text.find("```", line_end + 1);
            if (close != std::string_view::npos) {
                auto inner = text.substr(line_end + 1, close - line_end - 1);
                if (inner.find('{') != std::string_view::npos) return std::string(inner);
            }
        }
    }
    auto open = text.find('{');
    auto close = text.rfind('}');
    if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
        return std::nullopt;
    }
    return std::string(text.substr(open, close - open + 1));
}

namespace {

std::optional<ordered_json> parse_object(const std::string& raw) {
    auto parsed = ordered_json::parse(raw, nullptr, false);
    if (!parsed.is_discarded() && parsed.is_object()) return parsed;
    // Prompt templates escape braces as "{{ }}"; models sometimes copy that.
    if (raw.find("{{") == std::string::npos) return std::nullopt;
    std::string collapsed;
    collapsed.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        collapsed.push_back(raw[i]);
        if ((raw[i] == '{' || raw[i] == '}') && i + 1 < raw.size() && raw[i + 1] == raw[i]) ++i;
    }
    parsed = ordered_json::parse(collapsed, nullptr, false);
    if (!parsed.is_discarded() && parsed.is_object()) return parsed;
    return std::nullopt;
}

std::string raw_id_text(const ordered_json& value) {
    if (value.is_string()) return value.get<std::string>();
    if (value.is_number_unsigned() || value.is_number_integer()) return std::to_string(value.get<long long>());
    return value.dump();
}

}  // namespace

RankingResult parse_ranking_output(std::string_view text, const NeedsMemo& memo) {
    auto raw = extract_json_object(text);
    if (!raw) throw Error(ErrorCode::MalformedJson, "no JSON object in ranking output");
    auto root = parse_object(*raw);
    if (!root) throw Error(ErrorCode::MalformedJson, "ranking output is not a JSON object");

    RankingResult out;
    std::set<NeedId> seen;
    for (const auto& [topic, body] : root->items()) {
        QuestionGroup group{topic, {}};
        auto handle = [&](const ordered_json& q) {
            if (!q.is_object() || !q.contains("need_id")) {
                out.dropped.push_back({topic, q.dump(), "malformed"});
                return;
            }
            auto raw_id = raw_id_text(q.at("need_id"));
            auto id = NeedId::parse(raw_id);
            const NeedSlot* slot = id ? memo.find(*id) : nullptr;
            if (!slot) {
                out.dropped.push_back({topic, raw_id, "unknown"});
            } else if (!slot->clarify) {
                out.dropped.push_back({topic, raw_id, "already_clarified"});
            } else if (!seen.insert(*id).second) {
                out.dropped.push_back({topic, raw_id, "duplicate"});
            } else {
                auto question = q.contains("need") && q.at("need").is_string()
                                    ? q.at("need").get<std::string>()
                                    : slot->need;
                group.questions.push_back({*id, std::move(question)});
            }
        };
        if (body.is_object()) {
            for (const auto& [key, q] : body.items()) handle(q);
        } else if (body.is_array()) {
            for (const auto& q : body) handle(q);
        } else {
            out.dropped.push_back({topic, body.dump(), "malformed"});
        }
        if (!group.questions.empty()) out.groups.push_back(std::move(group));
    }

    if (out.groups.empty()) {
        auto dropped = json::array();
        for (const auto& d : out.dropped) {
            dropped.push_back({{"topic", d.topic}, {"need_id", d.raw_need_id}, {"reason", d.reason}});
        }
        throw Error(ErrorCode::EmptyRanking, "ranking yielded no valid questions",
                    json{{"dropped", dropped}});
    }
    return out;
}

ordered_json group_to_json(const QuestionGroup& group) {
    auto questions = ordered_json::array();
    for (const auto& q : group.questions) {
        questions.push_back(ordered_json{{"need_id", q.need_id.str()}, {"question", q.question}});
    }
    return ordered_json{{"topic", group.topic}, {"questions", std::move(questions)}};
}

QuestionGroup group_from_json(const json& value) {
    QuestionGroup group{value.at("topic").get<std::string>(), {}};
    for (const auto& q : value.at("questions")) {
        auto id = NeedId::parse(q.at("need_id").get<std::string>());
        if (!id) throw Error(ErrorCode::StorageError, "bad need_id in question group");
        group.questions.push_back({*id, q.at("question").get<std::string>()});
    }
    return group;
}

std::vector<NeedRef> extract_need_refs(std::string_view body) {
    static constexpr std::string_view kLabel = "Need ID:";
    std::vector<NeedRef> refs;
    std::size_t pos = 0;
    while ((pos = body.find(kLabel, pos)) != std::string_view::npos) {
        std::size_t cursor = pos + kLabel.size();
        while (cursor < body.size() && (body[cursor] == ' ' || body[cursor] == '\t')) ++cursor;
        std::size_t digits_start = cursor;
        while (cursor < body.size() && is_digit(body[cursor])) ++cursor;
        if (cursor > digits_start) {
            if (auto id = NeedId::parse(body.substr(digits_start, cursor - digits_start))) {
                refs.push_back(NeedRef{*id, pos, cursor});
                pos = cursor;
                continue;
            }
        }
        pos += kLabel.size();
    }
    return refs;
}

AnnotatedSolution annotate_solution(std::string body, std::uint64_t revision_basis) {
    AnnotatedSolution out;
    out.refs = extract_need_refs(body);
    out.body = std::move(body);
    out.revision_basis = revision_basis;
    return out;
}

RefReport validate_solution_refs(const AnnotatedSolution& solution, const NeedsMemo& memo) {
    std::set<NeedId> cited;
    for (const auto& ref : solution.refs) cited.insert(ref.id);

    RefReport report;
    for (auto id : cited) {
        const auto* slot = memo.find(id);
        if (!slot || slot->want != WantStatus::Wanted) report.dangling.push_back(id);
    }
    for (const auto& slot : memo.get_user_want_needs()) {
        if (!cited.contains(slot.id)) report.uncited_wanted.push_back(slot.id);
    }
    return report;
}

ordered_json solution_to_json(const AnnotatedSolution& solution) {
    auto refs = ordered_json::array();
    for (const auto& ref : solution.refs) {
        refs.push_back(ordered_json{{"need_id", ref.id.str()}, {"start", ref.start}, {"end", ref.end}});
    }
    return ordered_json{{"body", solution.body},
                        {"refs", std::move(refs)},
                        {"revision_basis", solution.revision_basis}};
}

AnnotatedSolution solution_from_json(const json& value) {
    return annotate_solution(value.at("body").get<std::string>(),
                             value.at("revision_basis").get<std::uint64_t>());
}

}  // namespace care
