#pragma once

#include <stdexcept>
#include <string>

namespace nhgnet {

/// Tensor shapes that do not agree for the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration or hyperparameter (kernel longer than the signal,
/// dropout rate >= 1, unknown variant name, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Problems reading, validating or labelling EEG data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Corrupt or incompatible model / sample file.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// NaN/Inf produced during a forward pass or found in a gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace nhgnet
