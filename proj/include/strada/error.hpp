#pragma once

#include <stdexcept>
#include <string>

namespace strada {

// Base for every error raised by the library. The CLI maps the concrete
// subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad argument from the caller (index out of range, invalid level, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// Shape mismatch between tensors.
class DimensionError : public InputError {
 public:
  using InputError::InputError;
};

// Inconsistent model / feature / run configuration.
class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

// Malformed or insufficient data (files, histories, splits).
class DataError : public Error {
 public:
  using Error::Error;
};

// Corrupt or truncated checkpoint.
class IntegrityError : public DataError {
 public:
  using DataError::DataError;
};

// Checkpoint and requested run disagree on configuration.
class CompatibilityError : public DataError {
 public:
  using DataError::DataError;
};

// NaN / Inf encountered during training or sampling.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace strada
