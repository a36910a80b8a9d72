#pragma once

#include <stdexcept>
#include <string>

namespace cam {

// Process exit codes used by the CLI. Each error family maps to one code.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kConfig = 2,
  kContract = 3,
  kNumeric = 4,
  kLoad = 5,
  kIo = 6,
  kInternal = 70,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual ExitCode exit_code() const noexcept { return ExitCode::kContract; }
};

/// Tensor or layer dimensions do not chain.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence, or a solver that failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kNumeric; }
};

/// Rejection sampling could not place every entity.
class DensityError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kConfig; }
};

/// Checkpoint could not be read back: truncated, corrupted, or wrong version.
class LoadError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kLoad; }
};

class IoError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kIo; }
};

}  // namespace cam
