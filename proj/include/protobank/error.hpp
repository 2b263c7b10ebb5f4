#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace protobank {

// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data (CSV rows, invariant violations).
class DataError : public Error {
 public:
  using Error::Error;
};

// A CSV row that violates the declaration schema; carries the 1-based line.
class SchemaError : public DataError {
 public:
  SchemaError(std::size_t line, const std::string& what)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// NaN/Inf produced anywhere in the numeric stack, or a shape mismatch.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Binary container problems: bad magic, version, checksum, truncation.
class FormatError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

// Bad configuration values or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace protobank
