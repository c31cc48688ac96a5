#pragma once

#include <stdexcept>
#include <string>

namespace uniso {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or arity mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared at an operation boundary.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Input outside an operation's domain (bad value, degenerate data).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed file or token stream.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace uniso
