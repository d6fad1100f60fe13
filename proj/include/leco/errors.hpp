#pragma once

#include <stdexcept>
#include <string>

namespace leco {

// Invalid configuration values (bad ranges, inconsistent fields).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// API misuse (e.g. stepping a finished episode).
struct UsageError : std::logic_error {
  explicit UsageError(const std::string& msg) : std::logic_error("usage error: " + msg) {}
};

// Non-finite values encountered during numeric computation.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

}  // namespace leco
