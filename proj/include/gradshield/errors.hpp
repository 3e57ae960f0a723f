#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gradshield {

// Raised for malformed arguments: shape mismatches, out-of-range knobs.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid experiment configuration; carries the offending field path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Missing, truncated or malformed on-disk artifact (checkpoint, image, ...).
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values. `step` is the training step where it surfaced, or -1.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what, long step = -1)
      : std::runtime_error(step >= 0 ? what + " at step " + std::to_string(step) : what),
        step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace gradshield
