#pragma once

#include <stdexcept>
#include <string>

namespace kd {

// Invalid arguments are reported with std::invalid_argument; the types below
// cover the remaining failure classes so callers can map them to exit codes.

/// Operation called in a state that forbids it (e.g. a second backward pass).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed checkpoint or data file. The message names the offending field.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or unknown configuration key/value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a training loss becomes non-finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace kd
