#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace woodflow {

// Base for every error raised by the library. The CLI maps the subclasses
// onto exit codes (see tools/cli.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or element-count mismatch.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Violated precondition (uninitialized actnorm, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad values in an input dataset.
class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed NTF file. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// File cannot be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, divergence.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// A matrix that had to be inverted or whose log-determinant was consumed is
// singular. `where` names the layer (and part) that requested it.
class SingularMatrixError : public NumericalError {
 public:
  explicit SingularMatrixError(const std::string& where)
      : NumericalError("singular matrix in " + where), where_(where) {}

  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

}  // namespace woodflow
