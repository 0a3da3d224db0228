#include "convneur/error.hpp"

namespace convneur {

ExitCode exit_code_for(const Error& error) noexcept {
    switch (error.kind()) {
        case ErrorKind::config:
        case ErrorKind::usage:
            return ExitCode::config;
        case ErrorKind::data:
        case ErrorKind::checkpoint:
            return ExitCode::data;
        case ErrorKind::numerical:
            return ExitCode::numerical;
        case ErrorKind::internal:
            break;
    }
    return ExitCode::verification_failed;
}

}  // namespace convneur
