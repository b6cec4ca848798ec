#pragma once

#include <stdexcept>
#include <string>

namespace culm {

/// File/container parsing failures. Carries the byte offset (binary
/// formats) or line number (text formats) where parsing stopped.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& msg, std::size_t where)
        : std::runtime_error(msg), offset_(where) {}
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Violated precondition on an argument value.
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Numeric failure: fit divergence, non-finite loss, impossible measurement.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace culm
