#pragma once

#include <stdexcept>
#include <string>

namespace gxe {

// Invalid configuration or data. Maps to CLI exit code 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure (non-PD covariance, NaN loss, ...). Maps to exit code 2.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input file; carries file and line for the offending cell.
class ParseError : public ValidationError {
 public:
  ParseError(std::string file, long line, const std::string& msg)
      : ValidationError(file + ":" + std::to_string(line) + ": " + msg),
        file_(std::move(file)),
        line_(line) {}
  const std::string& file() const { return file_; }
  long line() const { return line_; }

 private:
  std::string file_;
  long line_;
};

}  // namespace gxe
