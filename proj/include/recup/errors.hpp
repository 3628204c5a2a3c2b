#pragma once

#include <stdexcept>
#include <string>

namespace recup {

// Invalid user-supplied configuration (bad config file, bad parameter range,
// mismatched dimensions at setup time). CLI maps this to exit code 1.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A computation produced a non-finite value or otherwise failed numerically.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// An API was called in a way its contract forbids (non-scalar backward root,
// empty evaluation set, ...).
struct usage_error : std::runtime_error {
    explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed serialized payload; `offset` is the byte position when known.
struct parse_error : std::runtime_error {
    std::size_t offset;
    parse_error(const std::string& msg, std::size_t off)
        : std::runtime_error(msg + " (offset " + std::to_string(off) + ")"), offset(off) {}
};

}  // namespace recup
