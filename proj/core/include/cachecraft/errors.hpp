#pragma once

#include <stdexcept>
#include <string>

namespace cachecraft {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid model/store/tier configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A prefill request or inference plan is internally inconsistent.
class PlanError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class PlacementError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// No candidate satisfied the quality constraint during calibration.
class InfeasibleError : public Error {
 public:
  InfeasibleError(const std::string& what, double best_quality)
      : Error(what), best_quality_(best_quality) {}

  double best_quality() const noexcept { return best_quality_; }

 private:
  double best_quality_;
};

}  // namespace cachecraft
