#ifndef PVM_ERROR_HPP
#define PVM_ERROR_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pvm {

/// Base of every error raised by the library. `kind()` is a stable short
/// identifier used in machine-readable error records.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Shape or length mismatch between collaborating objects.
class StructuralError : public Error {
 public:
  explicit StructuralError(const std::string& message) : Error("structural", message) {}
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& message) : Error("domain", message) {}
};

/// Non-finite value produced during evaluation. `index` names the offending
/// example (or coordinate) when known.
class NumericalError : public Error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  explicit NumericalError(const std::string& message, std::size_t index = npos)
      : Error("numerical", message), index_(index) {}

  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Iterative solver diverged.
class SolverError : public Error {
 public:
  SolverError(const std::string& message, int epoch)
      : Error("solver", message), epoch_(epoch) {}

  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

/// Surrogate fitting failed (no admissible factorization).
class FitError : public Error {
 public:
  explicit FitError(const std::string& message) : Error("fit", message) {}
};

/// Malformed input file. `offset` is a byte offset or line number, see message.
class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::size_t offset)
      : Error("parse", message), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ImputationError : public Error {
 public:
  explicit ImputationError(const std::string& message) : Error("imputation", message) {}
};

/// Invalid experiment configuration, detected before any solve.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

}  // namespace pvm

#endif  // PVM_ERROR_HPP
