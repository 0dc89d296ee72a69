#pragma once

#include <stdexcept>
#include <string>

namespace cbd {

// Error taxonomy used across the library. The CLI maps these to exit codes.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InternalError : std::runtime_error {
  explicit InternalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when an operation needs a layer kind the model does not have,
// e.g. BN-based repair on a BN-free network.
struct UnsupportedModelError : std::runtime_error {
  explicit UnsupportedModelError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cbd
