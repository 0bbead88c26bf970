#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace chexopt {

// Base of every error the toolkit throws. The CLI maps the concrete
// subclass onto its exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes; the message names the op and the dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration, argument or precondition (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem / stream failure (exit code 3).
class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents, reported with the byte offset of the defect.
class ParseError : public IoError {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : IoError(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Numerically undefined result, e.g. a t statistic over zero-variance
// differences (exit code 4).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

// Misuse of the autodiff tape (non-scalar loss, second backward, ...).
class AutodiffError : public Error {
 public:
  using Error::Error;
};

}  // namespace chexopt
