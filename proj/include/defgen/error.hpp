#pragma once

#include <stdexcept>
#include <string>

namespace defgen {

// Base of every error the library raises. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed input text (a line that does not parse).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Well-formed input that lacks a required field or breaks a record invariant.
class SchemaError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace defgen
