#pragma once

#include <stdexcept>
#include <string>

namespace echoprompt {

enum class ErrorKind {
    invalid_argument,  // bad dims, config values, usage
    parse,             // malformed file contents
    io,                // open/read/write failures
    numeric,           // NaN / divergence during training
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class InvalidArgument : public Error {
public:
    explicit InvalidArgument(const std::string& message)
        : Error(ErrorKind::invalid_argument, message) {}
};

/// Parse failure that names the file section that could not be decoded.
class ParseError : public Error {
public:
    ParseError(std::string section, const std::string& message)
        : Error(ErrorKind::parse, section + ": " + message), section_(std::move(section)) {}

    const std::string& section() const noexcept { return section_; }

private:
    std::string section_;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error(ErrorKind::io, message) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& message) : Error(ErrorKind::numeric, message) {}
};

} // namespace echoprompt
