#include "care/needs_memo.hpp"

#include "care/error.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>

namespace care {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string_view trim(std::string_view text) {
    auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
    while (!text.empty() && is_space(text.front())) text.remove_prefix(1);
    while (!text.empty() && is_space(text.back())) text.remove_suffix(1);
    return text;
}

json need_id_details(NeedId id) { return json{{"need_id", id.str()}}; }

}  // namespace

std::optional<NeedId> NeedId::parse(std::string_view text) {
    text = trim(text);
    if (text.empty() || text.size() > 9) return std::nullopt;
    std::uint32_t value = 0;
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size()) return std::nullopt;
    return NeedId{value};
}

std::string NeedId::str() const {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03u", value_);
    return buf;
}

std::string_view to_string(WantStatus want) noexcept {
    switch (want) {
        case WantStatus::Wanted: return "wanted";
        case WantStatus::Declined: return "declined";
        case WantStatus::Unanswered: return "unanswered";
    }
    return "unanswered";
}

std::string_view to_string(NeedOrigin origin) noexcept {
    switch (origin) {
        case NeedOrigin::UserExplicit: return "user_explicit";
        case NeedOrigin::AgentInferred: return "agent_inferred";
        case NeedOrigin::UserManual: return "user_manual";
    }
    return "agent_inferred";
}

std::optional<NeedOrigin> parse_origin(std::string_view text) noexcept {
    if (text == "user_explicit") return NeedOrigin::UserExplicit;
    if (text == "agent_inferred") return NeedOrigin::AgentInferred;
    if (text == "user_manual") return NeedOrigin::UserManual;
    return std::nullopt;
}

json want_to_json(WantStatus want) {
    switch (want) {
        case WantStatus::Wanted: return true;
        case WantStatus::Declined: return false;
        case WantStatus::Unanswered: return nullptr;
    }
    return nullptr;
}

std::optional<WantStatus> want_from_json(const json& value) {
    if (value.is_null()) return WantStatus::Unanswered;
    if (value.is_boolean()) return value.get<bool>() ? WantStatus::Wanted : WantStatus::Declined;
    if (value.is_string()) {
        auto s = value.get<std::string>();
        if (s == "true") return WantStatus::Wanted;
        if (s == "false") return WantStatus::Declined;
        if (s == "null") return WantStatus::Unanswered;
    }
    return std::nullopt;
}

std::string normalize_need_text(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (char c : trim(text)) {
        auto uc = static_cast<unsigned char>(c);
        if (std::isspace(uc)) {
            pending_space = true;
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(uc)));
    }
    return out;
}

json user_edit_to_json(const UserEdit& edit) {
    return std::visit(
        [](const auto& e) -> json {
            using T = std::decay_t<decltype(e)>;
            if constexpr (std::is_same_v<T, AddManual>) {
                return json{{"kind", "add"}, {"text", e.text}};
            } else if constexpr (std::is_same_v<T, UpdateNeed>) {
                return json{{"kind", "update"}, {"need_id", e.id.str()}, {"text", e.text}};
            } else {
                return json{{"kind", "delete"}, {"need_id", e.id.str()}};
            }
        },
        edit);
}

UserEdit user_edit_from_json(const json& value) {
    auto kind = value.value("kind", std::string{});
    auto id_of = [&]() {
        auto id = NeedId::parse(value.value("need_id", std::string{}));
        if (!id) throw Error(ErrorCode::UnknownNeedId, "edit carries no valid need_id");
        return *id;
    };
    if (kind == "add") return AddManual{value.value("text", std::string{})};
    if (kind == "update") return UpdateNeed{id_of(), value.value("text", std::string{})};
    if (kind == "delete") return DeleteNeed{id_of()};
    throw Error(ErrorCode::BadRequest, "unknown edit kind '" + kind + "'");
}

NeedSlot& NeedsMemo::require(NeedId id) {
    auto it = slots_.find(id);
    if (it == slots_.end()) {
        throw Error(ErrorCode::UnknownNeedId, "no need slot " + id.str(), need_id_details(id));
    }
    return it->second;
}

void NeedsMemo::notify(const json& record) const {
    if (listener_) listener_(record);
}

std::optional<NeedId> NeedsMemo::find_duplicate(std::string_view need) const {
    auto key = normalize_need_text(need);
    for (const auto& [id, slot] : slots_) {
        if (normalize_need_text(slot.need) == key) return id;
    }
    return std::nullopt;
}

NeedId NeedsMemo::add_need_slot(std::string_view need, bool clarify, WantStatus want,
                                NeedOrigin origin) {
    auto text = trim(need);
    if (text.empty()) throw Error(ErrorCode::EmptyNeed, "need text is empty");

    if (clarify && want != WantStatus::Unanswered) {
        throw Error(ErrorCode::InvalidCombination,
                    "a slot that still needs clarification must be unanswered");
    }
    if (!clarify && want == WantStatus::Unanswered) {
        throw Error(ErrorCode::InvalidCombination, "a clarified slot needs user_want true or false");
    }
    if (origin != NeedOrigin::AgentInferred && (clarify || want != WantStatus::Wanted)) {
        throw Error(ErrorCode::InvalidCombination,
                    std::string(to_string(origin)) + " needs are recorded as wanted, clarify=false");
    }
    if (auto dup = find_duplicate(text)) {
        throw Error(ErrorCode::DuplicateNeed, "need already recorded as " + dup->str(),
                    need_id_details(*dup));
    }

    NeedId id{next_id_++};
    ++revision_;
    slots_.emplace(id, NeedSlot{id, std::string(text), clarify, want, origin, revision_, revision_});
    notify(ordered_json{{"op", "memo.add"},
                        {"need", std::string(text)},
                        {"clarify", clarify},
                        {"user_want", want_to_json(want)},
                        {"origin", to_string(origin)}});
    return id;
}

NeedSlot NeedsMemo::fill_need_slot(NeedId id, std::string_view answer, WantStatus want) {
    auto& slot = require(id);
    if (!slot.clarify) {
        if (slot.want == WantStatus::Declined) {
            throw Error(ErrorCode::ReopenNotSupported,
                        "need " + id.str() + " was declined and cannot be asked again",
                        need_id_details(id));
        }
        throw Error(ErrorCode::AlreadyClarified, "need " + id.str() + " is already clarified",
                    need_id_details(id));
    }
    if (want == WantStatus::Unanswered) {
        throw Error(ErrorCode::InvalidWant, "a filled slot must be wanted or declined");
    }
    auto text = trim(answer);
    if (text.empty()) throw Error(ErrorCode::EmptyNeed, "answer text is empty");

    ++revision_;
    slot.need = std::string(text);
    slot.clarify = false;
    slot.want = want;
    slot.updated_seq = revision_;
    notify(ordered_json{{"op", "memo.fill"},
                        {"need_id", id.str()},
                        {"need", slot.need},
                        {"user_want", want_to_json(want)}});
    return slot;
}

std::uint64_t NeedsMemo::apply_user_edit(const UserEdit& edit) {
    if (const auto* add = std::get_if<AddManual>(&edit)) {
        auto text = trim(add->text);
        if (text.empty()) throw Error(ErrorCode::EmptyNeed, "need text is empty");
        if (auto dup = find_duplicate(text)) {
            throw Error(ErrorCode::DuplicateNeed, "need already recorded as " + dup->str(),
                        need_id_details(*dup));
        }
        NeedId id{next_id_++};
        ++revision_;
        slots_.emplace(id, NeedSlot{id, std::string(text), false, WantStatus::Wanted,
                                    NeedOrigin::UserManual, revision_, revision_});
    } else if (const auto* update = std::get_if<UpdateNeed>(&edit)) {
        auto& slot = require(update->id);
        auto text = trim(update->text);
        if (text.empty()) throw Error(ErrorCode::EmptyNeed, "need text is empty");
        ++revision_;
        slot.need = std::string(text);
        slot.updated_seq = revision_;
    } else {
        const auto& del = std::get<DeleteNeed>(edit);
        require(del.id);
        ++revision_;
        slots_.erase(del.id);
    }
    notify(ordered_json{{"op", "memo.edit"}, {"edit", user_edit_to_json(edit)}});
    return revision_;
}

NeedPartition NeedsMemo::get_all_needs() const {
    NeedPartition out;
    for (const auto& [id, slot] : slots_) {
        switch (slot.want) {
            case WantStatus::Wanted: out.wanted.push_back(slot); break;
            case WantStatus::Declined: out.declined.push_back(slot); break;
            case WantStatus::Unanswered: out.unanswered.push_back(slot); break;
        }
    }
    return out;
}

std::vector<NeedSlot> NeedsMemo::get_clarify_needs() const {
    std::vector<NeedSlot> out;
    for (const auto& [id, slot] : slots_) {
        if (slot.clarify) out.push_back(slot);
    }
    return out;
}

std::vector<NeedSlot> NeedsMemo::get_user_want_needs() const {
    std::vector<NeedSlot> out;
    for (const auto& [id, slot] : slots_) {
        if (slot.want == WantStatus::Wanted) out.push_back(slot);
    }
    return out;
}

const NeedSlot* NeedsMemo::find(NeedId id) const {
    auto it = slots_.find(id);
    return it == slots_.end() ? nullptr : &it->second;
}

void NeedsMemo::replay(const json& record) {
    auto op = record.at("op").get<std::string>();
    auto want = [&]() {
        auto w = want_from_json(record.at("user_want"));
        if (!w) throw Error(ErrorCode::StorageError, "bad user_want in memo record");
        return *w;
    };
    if (op == "memo.add") {
        auto origin = parse_origin(record.at("origin").get<std::string>());
        if (!origin) throw Error(ErrorCode::StorageError, "bad origin in memo record");
        add_need_slot(record.at("need").get<std::string>(), record.at("clarify").get<bool>(), want(),
                      *origin);
    } else if (op == "memo.fill") {
        auto id = NeedId::parse(record.at("need_id").get<std::string>());
        if (!id) throw Error(ErrorCode::StorageError, "bad need_id in memo record");
        fill_need_slot(*id, record.at("need").get<std::string>(), want());
    } else if (op == "memo.edit") {
        apply_user_edit(user_edit_from_json(record.at("edit")));
    } else {
        throw Error(ErrorCode::StorageError, "unknown memo record '" + op + "'");
    }
}

ordered_json slot_to_json(const NeedSlot& slot) {
    return ordered_json{{"need", slot.need},
                        {"clarify", slot.clarify},
                        {"user_want", want_to_json(slot.want)},
                        {"origin", to_string(slot.origin)}};
}

ordered_json slots_to_json(const std::vector<NeedSlot>& slots) {
    auto out = ordered_json::object();
    for (const auto& slot : slots) out[slot.id.str()] = slot_to_json(slot);
    return out;
}

ordered_json NeedsMemo::to_canonical_json() const {
    auto out = ordered_json::object();
    for (const auto& [id, slot] : slots_) out[id.str()] = slot_to_json(slot);
    return out;
}

ordered_json NeedsMemo::to_snapshot_json() const {
    auto slots = ordered_json::array();
    for (const auto& [id, slot] : slots_) {
        auto entry = ordered_json{{"id", id.str()}};
        entry.update(slot_to_json(slot));
        entry["created_seq"] = slot.created_seq;
        entry["updated_seq"] = slot.updated_seq;
        slots.push_back(std::move(entry));
    }
    return ordered_json{{"next_id", next_id_}, {"revision", revision_}, {"slots", std::move(slots)}};
}

NeedsMemo NeedsMemo::from_snapshot_json(const json& value) {
    NeedsMemo memo;
    memo.next_id_ = value.at("next_id").get<std::uint32_t>();
    memo.revision_ = value.at("revision").get<std::uint64_t>();
    for (const auto& entry : value.at("slots")) {
        auto id = NeedId::parse(entry.at("id").get<std::string>());
        auto want = want_from_json(entry.at("user_want"));
        auto origin = parse_origin(entry.at("origin").get<std::string>());
        if (!id || !want || !origin) throw Error(ErrorCode::StorageError, "corrupt memo snapshot");
        memo.slots_.emplace(*id, NeedSlot{*id, entry.at("need").get<std::string>(),
                                          entry.at("clarify").get<bool>(), *want, *origin,
                                          entry.at("created_seq").get<std::uint64_t>(),
                                          entry.at("updated_seq").get<std::uint64_t>()});
    }
    return memo;
}

}  // namespace care
