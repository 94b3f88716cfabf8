#pragma once

#include <stdexcept>
#include <string>

namespace bidmix {

// Malformed input data, schema violations, or broken artifact chains.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid parameter values or dimension mismatches.
class ModelError : public std::runtime_error {
 public:
  explicit ModelError(const std::string& msg) : std::runtime_error(msg) {}
};

// An iterative routine could not make progress (degenerate state, divergence).
class ConvergenceError : public std::runtime_error {
 public:
  explicit ConvergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace bidmix
