#pragma once

#include <stdexcept>
#include <string>

namespace bevfuse {

// Bad configuration (invalid field values, shape mismatches against config).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or unreadable data on disk. Carries frame / field context.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& frame, const std::string& field, const std::string& msg)
      : std::runtime_error("data error [frame=" + frame + ", field=" + field + "]: " + msg),
        frame_id(frame),
        field_name(field) {}
  std::string frame_id;
  std::string field_name;
};

// Checkpoint / config incompatibility (hash mismatch and friends).
class IncompatError : public std::runtime_error {
 public:
  explicit IncompatError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace bevfuse
