#pragma once

#include <stdexcept>
#include <string>

namespace uflow {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A user-supplied model callable failed or returned something malformed
/// (wrong shape, non-symmetric or indefinite mass matrix, NaN).
class ModelError : public Error {
 public:
  using Error::Error;
};

/// The rows of Da_J are (numerically) linearly dependent, so the Gram
/// matrix Da_J M^-1 Da_J^T cannot be inverted.
class ConstraintDependenceError : public Error {
 public:
  using Error::Error;
};

/// An event whose guard is crossed with (near) zero speed.
class GrazingError : public Error {
 public:
  GrazingError(const std::string& what, int constraint) : Error(what), constraint_(constraint) {}
  int constraint() const { return constraint_; }

 private:
  int constraint_;
};

/// Active-set resolution did not reach a fixed point.
class InadmissibleError : public Error {
 public:
  using Error::Error;
};

/// Too many simultaneous constituents to enumerate their orderings.
class CombinatorialLimitError : public Error {
 public:
  using Error::Error;
};

/// A flow did not return to a Poincare section before t_final.
class NoReturnError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace uflow
