#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace plansite {

inline constexpr std::string_view kToolkitVersion = "0.3.0";

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// File missing or unreadable.
struct IoError : Error {
    using Error::Error;
};

/// Malformed input at a known line (1-based; 0 when not line-oriented).
struct ParseError : Error {
    ParseError(const std::string& what, std::size_t line_no)
        : Error(line_no ? what + " (line " + std::to_string(line_no) + ")" : what), line(line_no) {}
    std::size_t line;
};

/// Input violates a documented precondition or invariant.
struct ValidationError : Error {
    using Error::Error;
};

/// Index, layer, head or position outside the valid range.
struct RangeError : Error {
    using Error::Error;
};

/// Requested capability is not provided by the selected adapter.
struct UnsupportedError : Error {
    using Error::Error;
};

/// Root of the bundled fixture data. Overridable with PLANSITE_DATA_DIR.
std::string data_dir();

}  // namespace plansite
