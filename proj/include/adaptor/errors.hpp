#pragma once

#include <stdexcept>
#include <string>

namespace adaptor {

// Root of every error raised by the library. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/inf encountered, or a value outside a function's domain (log of <= 0).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of an operation (e.g. tau <= 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller violated an API contract (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Operation not allowed in the current object state (e.g. double backward).
class StateError : public Error {
 public:
  using Error::Error;
};

enum class ParseErrorKind {
  bad_magic,
  version_mismatch,
  truncated,
  checksum_mismatch,
  invalid_header,
  invalid_payload,
  io,
};

inline const char* to_string(ParseErrorKind kind) {
  switch (kind) {
    case ParseErrorKind::bad_magic: return "bad_magic";
    case ParseErrorKind::version_mismatch: return "version_mismatch";
    case ParseErrorKind::truncated: return "truncated";
    case ParseErrorKind::checksum_mismatch: return "checksum_mismatch";
    case ParseErrorKind::invalid_header: return "invalid_header";
    case ParseErrorKind::invalid_payload: return "invalid_payload";
    case ParseErrorKind::io: return "io";
  }
  return "unknown";
}

// Malformed or corrupted on-disk artifact. `kind()` distinguishes the cause.
class ParseError : public Error {
 public:
  ParseError(ParseErrorKind kind, const std::string& what)
      : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ParseErrorKind kind() const noexcept { return kind_; }

 private:
  ParseErrorKind kind_;
};

}  // namespace adaptor
