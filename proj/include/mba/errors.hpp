#pragma once

#include <stdexcept>

#include "mba/tensor.hpp"

namespace mba {

/// Invalid model/training configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Missing, corrupt or inconsistent files (datasets, checkpoints, images).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values or failed numerical checks.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A fusion wiring whose cross-branch dependencies form a cycle.
class PlanCycleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mba
