#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace stet {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor or matrix shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or parameter values (bad window size, ratio out of range, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A degenerate input for which the quantity is undefined (constant channel,
// empty mask, zero-variance series, all-padded softmax slice).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

// Too few observations for a statistic (fewer than 2 runs, 3 points, ...).
class InsufficientDataError : public DegenerateError {
 public:
  using DegenerateError::DegenerateError;
};

// A class id with no entry in a category map.
class MappingError : public Error {
 public:
  using Error::Error;
};

// Value outside the accepted domain (e.g. mu-law input with |x| > 1).
class RangeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. line() is 1-based, 0 when not applicable.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace stet
