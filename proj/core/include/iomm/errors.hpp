#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace iomm {

// Array shape or dimensionality disagreement.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Bad configuration value, inconsistent wiring, or an unusable request
// (unknown key, out-of-range field, missing mode input).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Malformed or incompatible on-disk artifact (bad version, truncated blob,
// digest mismatch).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values encountered where finite numerics are required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Grammar violation in a token sequence; `position` is the offending index.
struct ParseError : std::runtime_error {
    size_t position;
    ParseError(const std::string& msg, size_t pos)
        : std::runtime_error(msg + " (at position " + std::to_string(pos) + ")"),
          position(pos) {}
};

}  // namespace iomm
