#pragma once

#include <nlohmann/json.hpp>

#include <stdexcept>
#include <string>
#include <string_view>

namespace care {

enum class ErrorCode {
    // needs memo
    EmptyNeed,
    DuplicateNeed,
    InvalidCombination,
    UnknownNeedId,
    AlreadyClarified,
    InvalidWant,
    ReopenNotSupported,
    // protocol
    MalformedJson,
    EmptyRanking,
    // agents
    PolicyViolation,
    ProtocolTimeout,
    // backend
    BackendError,
    FixtureMiss,
    DigestMismatch,
    StorageError,
    // orchestrator
    EmptyQuery,
    WrongPhase,
    DuplicateMilestone,
    WriteOutsideDrafting,
    GroundingFailure,
    // service / cli
    UnknownSession,
    ConfigError,
    BindError,
    ExpectationMismatch,
    BadRequest,
};

std::string_view error_code_name(ErrorCode code) noexcept;

/// Every failure the engine reports. `details` carries structured context
/// (the colliding id of a DuplicateNeed, dropped ranking refs, the nearest
/// fixture keys of a FixtureMiss, ...).
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message, nlohmann::json details = nullptr)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
          code_(code),
          message_(message),
          details_(std::move(details)) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }
    [[nodiscard]] const std::string& message() const noexcept { return message_; }
    [[nodiscard]] const nlohmann::json& details() const noexcept { return details_; }

private:
    ErrorCode code_;
    std::string message_;
    nlohmann::json details_;
};

}  // namespace care
