#pragma once

#include <stdexcept>
#include <string>

namespace par {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or an unsatisfiable configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A softmax row with every entry masked.
class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by an operation or found in an input.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

}  // namespace par
