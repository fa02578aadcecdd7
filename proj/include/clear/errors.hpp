#pragma once

#include <stdexcept>
#include <string>

namespace clear {

// Error taxonomy mirrors the CLI exit codes: config=2, checkpoint=3,
// data=4, protocol=5. Math/shape contract violations use std::invalid_argument
// or std::domain_error and map to protocol violations at the CLI boundary.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ProtocolError : std::runtime_error {
  explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace clear
