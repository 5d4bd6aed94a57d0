#pragma once

#include <stdexcept>
#include <string>

namespace ifdenoise {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed input record; the message carries the line number.
class FormatError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class SolverError : public Error {
 public:
  SolverError(const std::string& what, double residual = 0.0)
      : Error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

// Raised when (H + lambda I) has non-positive curvature along a search direction.
class IndefiniteHessianError : public SolverError {
 public:
  using SolverError::SolverError;
};

}  // namespace ifdenoise
