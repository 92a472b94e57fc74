#pragma once

#include <stdexcept>
#include <string>

namespace vigor {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite input or output where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

// Scene generation exhausted its rejection budget.
class GenerationError : public Error {
 public:
  using Error::Error;
};

// A scene cannot host the requested sample; callers resample.
class SkipError : public Error {
 public:
  using Error::Error;
};

// Two candidates are equally good under the requested relation.
class AmbiguityError : public Error {
 public:
  using Error::Error;
};

// Text could not be turned into a referential order. `raw()` holds the
// offending text for auditing.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::string raw = {})
      : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

class EmptyOrderError : public ParseError {
 public:
  using ParseError::ParseError;
};

// The language-model endpoint failed after all retries.
class EndpointError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace vigor
