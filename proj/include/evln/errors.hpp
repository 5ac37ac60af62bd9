#pragma once

#include <stdexcept>
#include <string>

namespace evln {

/// Base of every error raised by the library. The CLI maps the subclasses
/// onto process exit codes (see cli.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation (log of a
// negative number, non-positive variance).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Invalid scalar hyperparameter (tau <= 0, n_samples < 2, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API contract, e.g. grad_check on a non-scalar function.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed dataset content: labels out of range, count mismatch, zero std.
class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk bytes (IDX, parameter container).
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or component.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace evln
