#pragma once

#include "care/protocol.hpp"

#include <functional>
#include <optional>
#include <string>

namespace care {

/// Holds the session's single current solution. Writes are only legal
/// while a drafting turn is open; each write overwrites the previous one.
class SolutionStore {
public:
    using WriteListener = std::function<void(const AnnotatedSolution&)>;

    void begin_drafting() noexcept { drafting_ = true; }
    void end_drafting() noexcept { drafting_ = false; }
    [[nodiscard]] bool drafting() const noexcept { return drafting_; }

    /// Extracts refs and stamps the revision basis. Throws WriteOutsideDrafting.
    const AnnotatedSolution& write(std::string body, std::uint64_t revision_basis);

    /// Overwrite without the drafting check (baseline answers, log replay).
    const AnnotatedSolution& put(AnnotatedSolution solution);

    [[nodiscard]] const std::optional<AnnotatedSolution>& load() const noexcept { return current_; }
    [[nodiscard]] std::size_t write_count() const noexcept { return writes_; }

    void set_write_listener(WriteListener listener) { listener_ = std::move(listener); }

private:
    std::optional<AnnotatedSolution> current_;
    bool drafting_ = false;
    std::size_t writes_ = 0;
    WriteListener listener_;
};

}  // namespace care
