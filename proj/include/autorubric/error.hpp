#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace autorubric {

enum class ErrorCode {
    invalid_argument,
    invalid_rubric,
    dimension_mismatch,
    transport_failure,
    judge_unavailable,
    judge_indeterminate,
    incomplete_scores,
    undefined_metric,
    numeric_failure,
    out_of_range,
    proposal_failure,
    empty_pool,
    empty_working_set,
    config_error,
    config_drift,
    corrupt_checkpoint,
    io_error,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library carries a code so callers (the CLI in
// particular) can map it to an exit status without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), detail_(message) {}

    ErrorCode code() const noexcept { return code_; }
    // Message without the code prefix.
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorCode code_;
    std::string detail_;
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::invalid_rubric: return "invalid-rubric";
    case ErrorCode::dimension_mismatch: return "dimension-mismatch";
    case ErrorCode::transport_failure: return "transport-failure";
    case ErrorCode::judge_unavailable: return "judge-unavailable";
    case ErrorCode::judge_indeterminate: return "judge-indeterminate";
    case ErrorCode::incomplete_scores: return "incomplete-scores";
    case ErrorCode::undefined_metric: return "undefined-metric";
    case ErrorCode::numeric_failure: return "numeric-failure";
    case ErrorCode::out_of_range: return "out-of-range";
    case ErrorCode::proposal_failure: return "proposal-failure";
    case ErrorCode::empty_pool: return "empty-pool";
    case ErrorCode::empty_working_set: return "empty-working-set";
    case ErrorCode::config_error: return "config-error";
    case ErrorCode::config_drift: return "config-drift";
    case ErrorCode::corrupt_checkpoint: return "corrupt-checkpoint";
    case ErrorCode::io_error: return "io-error";
    }
    return "unknown";
}

} // namespace autorubric
