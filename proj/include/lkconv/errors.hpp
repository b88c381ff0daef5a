#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lkc {

/// Tensor shapes that are malformed or incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Arguments outside an operation's mathematical domain (even kernel, alpha <= 0, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a loss or gradient stops being finite. Carries the step index.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::int64_t step, const std::string& what)
      : std::runtime_error("non-finite value at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace lkc
