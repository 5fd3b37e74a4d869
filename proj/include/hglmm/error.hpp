#pragma once

#include <stdexcept>
#include <string>

namespace hglmm {

// Error taxonomy. The CLI maps each kind to its exit code.

/// Malformed or inconsistent input data (non-finite values, ragged nesting,
/// bad CSV cells).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A fit could not produce an estimate (e.g. unidentifiable dispersion).
class FitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Iterative solver ran out of iterations.
class ConvergenceError : public FitError {
public:
    ConvergenceError(const std::string& what, int iterations, double gradient_norm)
        : FitError(what), iterations_(iterations), gradient_norm_(gradient_norm) {}

    int iterations() const noexcept { return iterations_; }
    double gradient_norm() const noexcept { return gradient_norm_; }

private:
    int iterations_;
    double gradient_norm_;
};

/// Caller passed arguments that violate an API contract.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Broken internal invariant (dimension mismatch between modules).
class InternalError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

}  // namespace hglmm
