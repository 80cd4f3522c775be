#pragma once

#include <stdexcept>
#include <string>

namespace lmbot {

/// Base for all pipeline errors. The exit code is what the CLI returns.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual int exit_code() const noexcept = 0;
};

/// Invalid configuration or out-of-range hyperparameter.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

/// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Numerical or optimisation failure during training.
class TrainingError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

}  // namespace lmbot
