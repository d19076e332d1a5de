#pragma once

#include <stdexcept>
#include <string>

namespace udaseg {

/// Root of the library's exception hierarchy.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Input outside the mathematical domain of an operation (e.g. off-simplex).
class DomainError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

/// Geodesic between antipodal simplex points is not unique.
class GeodesicUndefinedError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// A training-time contract (e.g. frozen parameter groups) was broken.
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace udaseg
