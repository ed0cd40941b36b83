#pragma once

#include <stdexcept>
#include <string>

namespace flexdepth {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: out-of-range depth, unknown strategy, malformed file.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A pruning rule removed every layer.
class EmptyNetworkError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Non-finite loss or gradient during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Internal invariant broken; indicates a bug rather than bad input.
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace flexdepth
