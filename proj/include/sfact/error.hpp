#pragma once

#include <stdexcept>
#include <string>

namespace sfact {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A size or index argument is outside its admissible range.
class InvalidDimension : public Error {
 public:
  using Error::Error;
};

/// Operands have incompatible shapes.
class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf appeared where finite values are required.
class NumericFault : public Error {
 public:
  using Error::Error;
};

/// A file or serialized object could not be parsed.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Input parsed but violates a semantic requirement (e.g. non-square matrix).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Sequences in a dataset do not share the model's length.
class LengthMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace sfact
