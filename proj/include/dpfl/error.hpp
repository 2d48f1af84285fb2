#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dpfl {

/// Base class for every error raised by the simulator.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or model dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An argument violated an operation's precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A configuration file or value is invalid. Raised before any compute.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A numeric quantity left the finite range.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file. Carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// No client update reached the server this round.
class EmptyRoundError : public Error {
 public:
  EmptyRoundError() : Error("empty round: no client updates to aggregate") {}
};

}  // namespace dpfl
