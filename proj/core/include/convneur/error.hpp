#pragma once

#include <stdexcept>
#include <string>

namespace convneur {

// Process exit codes shared by the CLI and by anything that maps errors to
// a status.
enum class ExitCode : int {
    ok = 0,
    verification_failed = 1,
    config = 2,
    data = 3,
    numerical = 4,
};

enum class ErrorKind {
    config,
    usage,
    numerical,
    data,
    checkpoint,
    internal,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message) : Error(ErrorKind::config, message) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& message) : Error(ErrorKind::usage, message) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& message) : Error(ErrorKind::numerical, message) {}
};

class InternalError : public Error {
public:
    explicit InternalError(const std::string& message) : Error(ErrorKind::internal, message) {}
};

enum class DataErrorCode {
    missing_file,
    wrong_magic,
    truncated,
    count_mismatch,
    invalid_value,
    empty,
};

class DataError : public Error {
public:
    DataError(DataErrorCode code, const std::string& message)
        : Error(ErrorKind::data, message), code_(code) {}

    DataErrorCode code() const noexcept { return code_; }

private:
    DataErrorCode code_;
};

enum class CheckpointErrorCode {
    io,
    bad_magic,
    version_mismatch,
    truncated,
    shape_mismatch,
    missing_tensor,
};

class CheckpointError : public Error {
public:
    CheckpointError(CheckpointErrorCode code, const std::string& message)
        : Error(ErrorKind::checkpoint, message), code_(code) {}

    CheckpointErrorCode code() const noexcept { return code_; }

private:
    CheckpointErrorCode code_;
};

ExitCode exit_code_for(const Error& error) noexcept;

}  // namespace convneur
