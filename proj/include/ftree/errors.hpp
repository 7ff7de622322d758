#pragma once

#include <stdexcept>
#include <string>

namespace ftree {

/// Root of the library's exception hierarchy.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad arguments or input data. The CLI maps these to exit code 2.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A constructed object fails its invariants. CLI exit code 3.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A numerical procedure could not produce a result. CLI exit code 4.
class SolverError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public InputError {
 public:
  using InputError::InputError;
};

class DomainError : public InputError {
 public:
  using InputError::InputError;
};

/// Raised whenever a first moment is required but the shape parameter is >= 1.
class InfiniteMeanError : public InputError {
 public:
  using InputError::InputError;
};

class FitError : public InputError {
 public:
  using InputError::InputError;
};

class ContractError : public InputError {
 public:
  using InputError::InputError;
};

class EstimationError : public SolverError {
 public:
  using SolverError::SolverError;
};

class DegenerateEstimateError : public EstimationError {
 public:
  using EstimationError::EstimationError;
};

class EvaluationError : public SolverError {
 public:
  using SolverError::SolverError;
};

class InfeasibleError : public SolverError {
 public:
  using SolverError::SolverError;
};

class UnboundedError : public SolverError {
 public:
  using SolverError::SolverError;
};

class DualSolveError : public SolverError {
 public:
  using SolverError::SolverError;
};

/// Tree construction failed at a specific node.
class BuildError : public SolverError {
 public:
  BuildError(const std::string& what, int node) : SolverError(what), node_(node) {}
  [[nodiscard]] int node() const noexcept { return node_; }

 private:
  int node_;
};

}  // namespace ftree
