#pragma once

#include <stdexcept>
#include <string>

namespace mic {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A split or truncation dimension outside its valid range.
class InvalidDimension : public Error {
 public:
  using Error::Error;
};

/// A sequence with no active tokens reached a masked statistic.
class DegenerateSequence : public Error {
 public:
  using Error::Error;
};

/// Too few rows for a batch statistic (variance, pairwise potential).
class InsufficientBatch : public Error {
 public:
  using Error::Error;
};

/// Shape mismatch or violated call contract.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Token id outside the encoder vocabulary.
class VocabError : public Error {
 public:
  using Error::Error;
};

/// Backward requested through an op that has no registered gradient.
class UnregisteredOp : public Error {
 public:
  using Error::Error;
};

/// Repeated evaluation of a loss returned different values.
class DeterminismError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration; the message names the offending field.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; the message carries the line number.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A loss or gradient became NaN/Inf. `component()` names the culprit.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string component, const std::string& what)
      : Error(what), component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

/// Correlation requested over a constant list.
class UndefinedCorrelation : public Error {
 public:
  using Error::Error;
};

}  // namespace mic
