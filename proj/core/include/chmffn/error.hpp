#pragma once

#include <stdexcept>
#include <string>

namespace chmffn {

// Every failure the library reports derives from Error. The CLI maps the
// subclasses onto its exit codes (config 2, data 3, numeric 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
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

class NumericError : public Error {
 public:
  using Error::Error;
};

// Undefined metric (zero denominator, degenerate kappa).
class MetricError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace chmffn
