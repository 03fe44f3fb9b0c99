#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kfbc {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Vector or matrix dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN / inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// An operation was called in a state that does not allow it.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Required data is missing from a record.
class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace kfbc
