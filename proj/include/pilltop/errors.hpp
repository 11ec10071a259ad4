#pragma once

#include <stdexcept>
#include <string>

namespace pilltop {

/// Base class for all errors raised by the library. Each subclass maps to a
/// distinct process exit code in the command-line tool.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InvalidGeometryError : public Error {
 public:
  using Error::Error;
};

/// Non-finite residual or singular linear system inside the forward solver.
class SolverError : public Error {
 public:
  using Error::Error;
};

class NonconvergenceError : public SolverError {
 public:
  NonconvergenceError(const std::string& what, int step, double residual_norm)
      : SolverError(what), step_(step), residual_norm_(residual_norm) {}

  int step() const { return step_; }
  double residual_norm() const { return residual_norm_; }

 private:
  int step_;
  double residual_norm_;
};

class AdjointError : public Error {
 public:
  AdjointError(const std::string& what, int step) : Error(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

/// The design no longer describes a pill (e.g. the solid volume vanished).
class DegenerateDesignError : public Error {
 public:
  using Error::Error;
};

}  // namespace pilltop
