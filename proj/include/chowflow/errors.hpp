#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace chowflow {

/// Violated precondition: wrong dimensions, out-of-range index, bad layout.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or infinity surfaced during evaluation. `where` names the op or
/// stage that produced it (an op tag, "rk4 step 7", "row 12", ...).
class NumericError : public std::runtime_error {
 public:
  NumericError(std::string where, const std::string& what)
      : std::runtime_error(what), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

/// The computation graph is not a DAG in insertion order.
class GraphCorruptionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A bracket intermediate could not be represented as an affine field.
class UnsupportedFieldError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed config, checkpoint, or data file.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace chowflow
