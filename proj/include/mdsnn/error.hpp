#pragma once

#include <stdexcept>
#include <string>

namespace mdsnn {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A forward op produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. backward() on a tape that never ran forward.
class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Training aborted on a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, int step, const std::string& what)
      : Error("training diverged at epoch " + std::to_string(epoch) +
              ", step " + std::to_string(step) + ": " + what),
        epoch_(epoch),
        step_(step) {}

  int epoch() const { return epoch_; }
  int step() const { return step_; }

 private:
  int epoch_;
  int step_;
};

}  // namespace mdsnn
