#pragma once

#include <nlohmann/json.hpp>

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace care {

/// Incremental need identifier. Rendered zero-padded to three digits
/// ("001"), wider past 999. Parsing ignores padding, so "1" == "001".
class NeedId {
public:
    constexpr NeedId() = default;
    constexpr explicit NeedId(std::uint32_t value) : value_(value) {}

    static std::optional<NeedId> parse(std::string_view text);

    [[nodiscard]] constexpr std::uint32_t value() const noexcept { return value_; }
    [[nodiscard]] std::string str() const;

    friend constexpr auto operator<=>(NeedId, NeedId) = default;

private:
    std::uint32_t value_ = 0;
};

enum class WantStatus { Wanted, Declined, Unanswered };
enum class NeedOrigin { UserExplicit, AgentInferred, UserManual };

std::string_view to_string(WantStatus want) noexcept;
std::string_view to_string(NeedOrigin origin) noexcept;
std::optional<NeedOrigin> parse_origin(std::string_view text) noexcept;

// user_want on the wire: true / false / null
nlohmann::json want_to_json(WantStatus want);
std::optional<WantStatus> want_from_json(const nlohmann::json& value);

struct NeedSlot {
    NeedId id;
    std::string need;  // description, or the question while clarify is set
    bool clarify = false;
    WantStatus want = WantStatus::Wanted;
    NeedOrigin origin = NeedOrigin::UserExplicit;
    std::uint64_t created_seq = 0;
    std::uint64_t updated_seq = 0;

    bool operator==(const NeedSlot&) const = default;
};

struct NeedPartition {
    std::vector<NeedSlot> wanted;
    std::vector<NeedSlot> declined;
    std::vector<NeedSlot> unanswered;
};

struct AddManual {
    std::string text;
};
struct UpdateNeed {
    NeedId id;
    std::string text;
};
struct DeleteNeed {
    NeedId id;
};
using UserEdit = std::variant<AddManual, UpdateNeed, DeleteNeed>;

nlohmann::json user_edit_to_json(const UserEdit& edit);
UserEdit user_edit_from_json(const nlohmann::json& value);

/// Lowercase, trim, and collapse internal whitespace. Two needs whose
/// normalized forms match are duplicates.
std::string normalize_need_text(std::string_view text);

/// The shared store of need slots. A value type: copying yields an
/// immutable snapshot at the current revision.
///
/// Every successful mutation bumps `revision()` by exactly one and, when a
/// listener is installed, reports a replayable record describing the call.
class NeedsMemo {
public:
    using MutationListener = std::function<void(const nlohmann::json& record)>;

    NeedId add_need_slot(std::string_view need, bool clarify, WantStatus want, NeedOrigin origin);
    NeedSlot fill_need_slot(NeedId id, std::string_view answer, WantStatus want);
    std::uint64_t apply_user_edit(const UserEdit& edit);

    [[nodiscard]] NeedPartition get_all_needs() const;
    [[nodiscard]] std::vector<NeedSlot> get_clarify_needs() const;
    [[nodiscard]] std::vector<NeedSlot> get_user_want_needs() const;

    [[nodiscard]] const NeedSlot* find(NeedId id) const;
    [[nodiscard]] std::optional<NeedId> find_duplicate(std::string_view need) const;
    [[nodiscard]] std::uint64_t revision() const noexcept { return revision_; }
    [[nodiscard]] std::uint32_t next_id() const noexcept { return next_id_; }
    [[nodiscard]] std::size_t size() const noexcept { return slots_.size(); }
    [[nodiscard]] bool empty() const noexcept { return slots_.empty(); }
    [[nodiscard]] const std::map<NeedId, NeedSlot>& slots() const noexcept { return slots_; }

    void set_mutation_listener(MutationListener listener) { listener_ = std::move(listener); }

    /// Re-executes a record produced by the mutation listener.
    void replay(const nlohmann::json& record);

    /// Dictionary keyed by id: {need, clarify, user_want, origin}.
    [[nodiscard]] nlohmann::ordered_json to_canonical_json() const;

    /// Full state including sequence numbers and the id counter.
    [[nodiscard]] nlohmann::ordered_json to_snapshot_json() const;
    static NeedsMemo from_snapshot_json(const nlohmann::json& value);

    bool operator==(const NeedsMemo& other) const {
        return slots_ == other.slots_ && next_id_ == other.next_id_ && revision_ == other.revision_;
    }

private:
    NeedSlot& require(NeedId id);
    void notify(const nlohmann::json& record) const;

    std::map<NeedId, NeedSlot> slots_;
    std::uint32_t next_id_ = 0;
    std::uint64_t revision_ = 0;
    MutationListener listener_;
};

nlohmann::ordered_json slot_to_json(const NeedSlot& slot);
nlohmann::ordered_json slots_to_json(const std::vector<NeedSlot>& slots);

}  // namespace care
