#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dlra {

// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes are incompatible with the requested operation.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value (bad rank, negative threshold, head mismatch, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Dataset missing, empty, or otherwise unusable.
struct DataError : Error {
    using Error::Error;
};

// Malformed binary container. Carries the byte offset where parsing failed.
struct FormatError : Error {
    FormatError(const std::string& msg, std::size_t offset)
        : Error(msg + " (at byte offset " + std::to_string(offset) + ")"), byte_offset(offset) {}
    std::size_t byte_offset;
};

// Non-finite values encountered during optimization.
struct NumericError : Error {
    using Error::Error;
};

// Class label outside the valid range.
struct LabelError : Error {
    using Error::Error;
};

}  // namespace dlra
