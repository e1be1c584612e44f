#pragma once

#include <stdexcept>

namespace evifuse {

// Distribution parameters outside their domain (gamma <= 0, alpha <= 1, ...).
struct ParameterDomainError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A caller-side precondition was violated (empty input, bad lambda, ...).
struct PreconditionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// An intermediate value left the representable range; raised instead of
// silently producing NaN/Inf.
struct NumericRangeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes or graph wiring do not line up.
struct StructuralError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API used out of order, e.g. backward on an empty tape.
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

// Malformed, truncated or version-mismatched file.
struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed configuration; the message names the offending field.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Output files or directories that cannot be created or written.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace evifuse
