#pragma once

#include <ostream>

#include "autorubric/error.hpp"

namespace autorubric::cli {

enum ExitCode : int {
    exit_ok = 0,
    exit_failure = 1,
    // Bad flags, unreadable or invalid config, config drift.
    exit_config = 2,
    // Judge or generator endpoint failures.
    exit_backend = 3,
    // The run finished but produced nothing usable.
    exit_empty = 4,
};

int exit_code_for(ErrorCode code);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace autorubric::cli
