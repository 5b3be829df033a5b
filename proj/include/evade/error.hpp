#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace evade {

// Root of every error thrown by the library. The CLI maps subclasses onto
// exit codes: validation-like errors -> 1, transport-like errors -> 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input data or configuration.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : ValidationError(what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Violated function precondition (empty text, out-of-range probability...).
class PreconditionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Detector used before it was built, or similar lifecycle misuse.
class StateError : public Error {
 public:
  using Error::Error;
};

// Ensemble or registry invariant broken (unknown id, held-out member...).
class RegistryError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Network failure after the retry budget was spent.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int attempts)
      : Error(what), attempts_(attempts) {}
  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

// Peer answered, but with something that breaks the wire contract.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Judge verdicts: integer Likert score outside 1..5.
class RangeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Judge verdicts: required field missing or of the wrong type.
class SchemaError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Numerical breakdown inside training (non-finite gradient).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace evade
