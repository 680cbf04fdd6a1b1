#pragma once

#include <stdexcept>
#include <string>

namespace cesaa {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dimension or mask mismatch between operands.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid or inconsistent configuration.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed input data: CSV cells, vocabularies, labels, empty datasets.
struct DataError : Error {
  using Error::Error;
};

/// Non-finite value encountered where a finite one is required.
struct NumericError : Error {
  using Error::Error;
};

/// Corrupt or incompatible serialized file.
struct FormatError : Error {
  using Error::Error;
};

}  // namespace cesaa
