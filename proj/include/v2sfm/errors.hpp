#pragma once

#include <stdexcept>
#include <string>

namespace v2sfm {

// Bad inputs, malformed configs, dataset validation failures. CLI exit code 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/contract violations between arrays and operations.
struct ShapeError : ValidationError {
    explicit ShapeError(const std::string& msg) : ValidationError(msg) {}
};

// Numerical failure states: non-finite values, guarded divisions, NaN loss.
// CLI exit code 3.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Euler extraction at gimbal lock.
struct DegeneratePoseError : std::runtime_error {
    explicit DegeneratePoseError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace v2sfm
