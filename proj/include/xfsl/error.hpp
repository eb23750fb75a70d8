#pragma once

#include <stdexcept>
#include <string>

namespace xfsl {

// Base of every error raised by the library. The CLI maps the two families
// below onto exit codes: validation problems exit 2, numerical ones exit 3.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input: wrong shapes, bad configuration, malformed files.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Malformed file contents. `offset` is a byte offset for binary formats and a
// 1-based line number for line-oriented ones.
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : ValidationError(what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Non-finite values, degenerate statistics and similar runtime failures.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace xfsl
