#pragma once

#include <stdexcept>

namespace drmsm {

// Input that violates the dataset contract (bad values, missing covariates).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user configuration: unknown columns, invalid options.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failure: singular designs, non-convergent fits.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace drmsm
