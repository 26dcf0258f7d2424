#pragma once

#include <stdexcept>
#include <string>

namespace lefm {

/// Error categories. The numeric value doubles as the CLI exit code.
enum class ErrorKind : int {
    usage = 1,
    data = 2,
    numeric = 3,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

/// Invalid configuration or argument (d, m out of bounds, unknown rule, ...).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

/// Tensor or image shapes that do not line up.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error(ErrorKind::data, what) {}
};

/// Missing, malformed or inconsistent input files.
class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

/// NaN / Inf encountered or a quantity that is undefined for the given input.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

} // namespace lefm
