// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace prbfpn {

// Process exit codes used by the CLI. Each error type maps to one code.
enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kShapeError = 3,
  kNumericsError = 4,
  kCheckpointMismatch = 5,
  kGradcheckFailed = 6,
  kContractError = 7,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::kFailure; }
};

/// Tensor shapes incompatible with an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kShapeError; }
};

/// A documented precondition of an API was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kContractError; }
};

/// Invalid structural or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kConfigError; }
};

/// Non-finite values where finite ones are required.
class NumericsError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kNumericsError; }
};

/// Checkpoint does not describe the constructed model. A ConfigError with
/// its own exit code so callers can tell the two apart.
class CheckpointMismatch : public ConfigError {
 public:
  using ConfigError::ConfigError;
  ExitCode exit_code() const noexcept override { return ExitCode::kCheckpointMismatch; }
};

}  // namespace prbfpn
