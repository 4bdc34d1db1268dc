#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace hwreg {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or spatial extents do not agree with what an operation needs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or configuration value.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A computed value became NaN or infinite.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A fixed-point solve ran out of iterations. Carries the best iterate seen
/// (flattened, in double precision) and its residual.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual, int iterations,
                   std::vector<double> best_iterate = {})
      : Error(what + " (residual " + std::to_string(residual) + " after " +
              std::to_string(iterations) + " iterations)"),
        residual_(residual),
        iterations_(iterations),
        best_(std::move(best_iterate)) {}

  double residual() const noexcept { return residual_; }
  int iterations() const noexcept { return iterations_; }
  const std::vector<double>& best_iterate() const noexcept { return best_; }

 private:
  double residual_;
  int iterations_;
  std::vector<double> best_;
};

}  // namespace hwreg
