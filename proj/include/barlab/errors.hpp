#pragma once

#include <stdexcept>
#include <string>

namespace barlab {

// Bad user input: config files, CLI arguments, malformed dumps.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Model- or noise-level problems: instability without override, calibration
// failure, fixed-point non-convergence, degenerate limit matrices.
struct ModelError : std::runtime_error {
  explicit ModelError(const std::string& what) : std::runtime_error(what) {}
};

// Raised by the least-squares path when the design Gram matrix is numerically
// rank deficient (reciprocal condition below 1e-12).
struct SingularDesign : std::runtime_error {
  explicit SingularDesign(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace barlab
