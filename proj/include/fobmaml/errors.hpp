#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fobmaml {

// Bad or inconsistent configuration (unknown keys, invalid ranges, missing fields).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller broke a precondition, e.g. mismatched dimensions.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

struct SingularityError : std::runtime_error {
  SingularityError(const std::string& what, double eigenvalue)
      : std::runtime_error(what), eigenvalue(eigenvalue) {}
  double eigenvalue;
};

// Inner solver diverged with the requested step size.
struct StepSizeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid estimator hyperparameter (nu = 0, K = 0, ...).
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Wraps a failure of one task inside a batch.
struct TaskError : std::runtime_error {
  TaskError(std::size_t index, const std::string& what)
      : std::runtime_error("task " + std::to_string(index) + ": " + what), task_index(index) {}
  std::size_t task_index;
};

}  // namespace fobmaml
