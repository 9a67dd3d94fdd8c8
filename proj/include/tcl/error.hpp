#pragma once

#include <stdexcept>
#include <string>

namespace tcl {

// Root of every error thrown by the library. The CLI maps the category to an
// exit code, so new error types must pick one of the intermediate bases.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of the API or an invalid configuration (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Problems with input data: manifests, frames, labels (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during optimization (exit code 4).
class DivergedError : public Error {
 public:
  DivergedError(const std::string& what, std::string parameter, int epoch)
      : Error(what), parameter_(std::move(parameter)), epoch_(epoch) {}
  const std::string& parameter() const noexcept { return parameter_; }
  int epoch() const noexcept { return epoch_; }

 private:
  std::string parameter_;
  int epoch_;
};

class InvalidShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class StaleTapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class InvalidLabelError : public DataError {
 public:
  using DataError::DataError;
};

class IngestionError : public DataError {
 public:
  using DataError::DataError;
};

class ManifestError : public DataError {
 public:
  using DataError::DataError;
};

class SamplingError : public DataError {
 public:
  using DataError::DataError;
};

class InvalidImageError : public DataError {
 public:
  using DataError::DataError;
};

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

// Bad magic or unsupported version byte.
class UnreadableCheckpointError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Truncated or internally inconsistent payload.
class CheckpointIntegrityError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class IncompatibleCheckpointError : public CheckpointError {
 public:
  IncompatibleCheckpointError(const std::string& what, std::string layer)
      : CheckpointError(what), layer_(std::move(layer)) {}
  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

class ProtocolError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace tcl
