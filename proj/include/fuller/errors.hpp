#pragma once

#include <stdexcept>
#include <string>

namespace fuller {

// Operand shapes do not agree.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse: foreign tape handles, unknown regions, non-finite factors.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf appeared where only finite values are allowed.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateInputError : std::domain_error {
  using std::domain_error::domain_error;
};

struct UndefinedMetricError : std::domain_error {
  using std::domain_error::domain_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fuller
