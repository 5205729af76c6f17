#pragma once

#include <stdexcept>

namespace pcan {

// Shape or rank disagreement between tensors.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A value outside an operation's documented domain.
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse: non-scalar backward output, unknown parameter name, etc.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// An index table disagrees with the data it describes.
struct CorruptionError : std::logic_error {
  using std::logic_error::logic_error;
};

// Byte-level problem in a file being read.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Well-formed file whose contents violate a documented range.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Missing or unreadable file.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Degenerate vector where a unit norm is required.
struct NormalizationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// finite_diff_check cannot trust its own result (e.g. non-deterministic fn).
struct CheckError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A primitive produced NaN or Inf.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad key, value, or section in a run configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace pcan
