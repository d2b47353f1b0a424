#pragma once

#include <stdexcept>
#include <string>

namespace vpnpp {

// Exception hierarchy. The CLI maps each family onto an exit code.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or argument value.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed, truncated, or inconsistent on-disk data.
struct DataError : Error {
  using Error::Error;
};

struct MalformedHeader : DataError {
  using DataError::DataError;
};

/// File payload disagrees with the dims its header declares.
struct ShapeMismatch : DataError {
  using DataError::DataError;
};

struct ShapeError : Error {
  using Error::Error;
};

/// A required upstream artifact (e.g. a teacher checkpoint) is absent.
struct MissingArtifact : Error {
  using Error::Error;
};

/// A parameter block declared frozen changed during training.
struct FrozenMutation : Error {
  using Error::Error;
};

/// A normalization was asked of a zero-norm vector.
struct DegenerateNorm : Error {
  using Error::Error;
};

}  // namespace vpnpp
