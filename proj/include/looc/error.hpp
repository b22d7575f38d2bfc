#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace looc {

/// Root of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised for malformed user input (configs, flags, parameters). The CLI maps
/// these to exit code 2; every other Error maps to exit code 3.
class ValidationError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class DegenerateError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class ParameterError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class UsageError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class SplitError : public Error {
public:
    using Error::Error;
};

class ProbeError : public Error {
public:
    using Error::Error;
};

class EpisodeError : public Error {
public:
    using Error::Error;
};

class ResumeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Config problem located by a JSON pointer (RFC 6901) into the run config.
class ConfigError : public ValidationError {
public:
    ConfigError(std::string pointer, const std::string& what)
        : ValidationError(pointer.empty() ? what : pointer + ": " + what), pointer_(std::move(pointer)) {}

    const std::string& pointer() const noexcept { return pointer_; }

private:
    std::string pointer_;
};

}  // namespace looc
