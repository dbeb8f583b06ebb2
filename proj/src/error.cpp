#include "care/error.hpp"

namespace care {

std::string_view error_code_name(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::EmptyNeed: return "EmptyNeed";
        case ErrorCode::DuplicateNeed: return "DuplicateNeed";
        case ErrorCode::InvalidCombination: return "InvalidCombination";
        case ErrorCode::UnknownNeedId: return "UnknownNeedId";
        case ErrorCode::AlreadyClarified: return "AlreadyClarified";
        case ErrorCode::InvalidWant: return "InvalidWant";
        case ErrorCode::ReopenNotSupported: return "ReopenNotSupported";
        case ErrorCode::MalformedJson: return "MalformedJson";
        case ErrorCode::EmptyRanking: return "EmptyRanking";
        case ErrorCode::PolicyViolation: return "PolicyViolation";
        case ErrorCode::ProtocolTimeout: return "ProtocolTimeout";
        case ErrorCode::BackendError: return "BackendError";
        case ErrorCode::FixtureMiss: return "FixtureMiss";
        case ErrorCode::DigestMismatch: return "DigestMismatch";
        case ErrorCode::StorageError: return "StorageError";
        case ErrorCode::EmptyQuery: return "EmptyQuery";
        case ErrorCode::WrongPhase: return "WrongPhase";
        case ErrorCode::DuplicateMilestone: return "DuplicateMilestone";
        case ErrorCode::WriteOutsideDrafting: return "WriteOutsideDrafting";
        case ErrorCode::GroundingFailure: return "GroundingFailure";
        case ErrorCode::UnknownSession: return "UnknownSession";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::BindError: return "BindError";
        case ErrorCode::ExpectationMismatch: return "ExpectationMismatch";
        case ErrorCode::BadRequest: return "BadRequest";
    }
    return "Unknown";
}

}  // namespace care
