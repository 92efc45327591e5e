#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace opcrash {

/// Operand extents do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN or infinity where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (bad enum, non-positive size, empty context, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or truncated binary container.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A rollout produced a non-finite state. `step()` is the 1-based step index
/// at which the state first became non-finite.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(std::size_t step)
      : std::runtime_error("rollout diverged at step " + std::to_string(step)),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace opcrash
