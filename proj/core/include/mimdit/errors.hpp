#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mimdit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument outside its documented range (k, t, severity...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent architecture or experiment configuration.
class ConfigurationError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (non-scalar loss, segment drift,
/// unlabeled data, incompatible checkpoint...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class PersistenceError : public Error {
 public:
  PersistenceError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Non-finite values during training or sampling. `step` is the training step
/// or sampler step index at which the failure was detected.
class NumericalError : public Error {
 public:
  NumericalError(std::size_t step, const std::string& what)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace mimdit
