#pragma once

#include "care/error.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace care {

enum ExitCode : int {
    kExitOk = 0,
    kExitMismatch = 1,
    kExitConfig = 2,
    kExitBackend = 3,
};

int exit_code_for(ErrorCode code) noexcept;

/// Entry point of care_cli: serve, chat, replay, export.
/// Environment variables (CARE_*) override the config file; flags override both.
int run_cli(std::vector<std::string> args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace care
