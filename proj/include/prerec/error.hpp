#pragma once

#include <stdexcept>
#include <string>

namespace prerec {

// Process exit codes surfaced by the command-line front end.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kData = 3,
  kNumerical = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

// Invalid configuration, flag, or schedule.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ExitCode::kConfig, what) {}
};

// Malformed or inconsistent input data (files, ids, dimensions).
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ExitCode::kData, what) {}
};

// NaN/Inf during training or scoring.
class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ExitCode::kNumerical, what) {}
};

}  // namespace prerec
