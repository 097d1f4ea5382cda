#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace sgdthermo {

inline constexpr const char* kVersion = "1.0.0";

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// Thrown when a requested computation exceeds a capability gate
// (per-sample Hessian tensor too large, analytic gradient unavailable, ...).
class CapabilityError : public std::runtime_error {
public:
  explicit CapabilityError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when a training engine exceeds its divergence bound.
class DivergenceError : public std::runtime_error {
public:
  DivergenceError(const std::string& what, long step)
      : std::runtime_error(what), step_(step) {}
  long step() const { return step_; }

private:
  long step_;
};

// Configuration / input-file validation failure (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Enumeration oracle asked for an instance beyond its exhaustive range.
class OracleLimitError : public std::runtime_error {
public:
  explicit OracleLimitError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace sgdthermo
