#pragma once

#include <stdexcept>
#include <string>

namespace meltr {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes incompatible with the requested operation.
struct ShapeError : Error {
    using Error::Error;
};

// Misuse of computation graphs (mixed graphs, stale handles, detached operands
// where attached ones are required).
struct GraphError : Error {
    using Error::Error;
};

// An operation produced NaN/Inf, or non-finite values entered the engine.
struct NonFiniteError : Error {
    using Error::Error;
};

// Invalid configuration (bad keys, out-of-range hyperparameters).
struct ConfigError : Error {
    using Error::Error;
};

// Numerical solver failures.
struct SolverError : Error {
    using Error::Error;
};

struct SingularHessianError : SolverError {
    using SolverError::SolverError;
};

struct NegativeCurvatureError : SolverError {
    using SolverError::SolverError;
};

struct NeumannDivergenceError : SolverError {
    using SolverError::SolverError;
};

}  // namespace meltr
