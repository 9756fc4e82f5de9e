#pragma once

#include <stdexcept>
#include <string>

namespace flowcast {

// Base for all library errors; subtypes map onto CLI exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor/layer dimensions. Messages name the offending shapes.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration (bad field values, unknown keys, usage errors).
struct ConfigError : Error {
  using Error::Error;
};

// Malformed or unusable input data (CSV schema, timestamps, corrupt files).
struct DataError : Error {
  using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace flowcast
