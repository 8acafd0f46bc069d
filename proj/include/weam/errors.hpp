#pragma once

#include <stdexcept>
#include <string>

namespace weam {

/// Shape or extent disagreement between tensors.
struct dimension_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Violation of an operation's calling contract (non-scalar loss, empty
/// memory, overlong sequence, ...).
struct contract_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value (tau out of range, residual width mismatch,
/// malformed task spec, ...).
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Token id outside the vocabulary.
struct vocab_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite or out-of-domain numeric input (NaN into softmax, log of a
/// non-positive value).
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File-level problems: missing paths, line-count mismatches, bad UTF-8.
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint failed its checksum, or is truncated / wrong version.
struct integrity_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A function handed to the gradient checker produced two different values
/// for the same inputs.
struct determinism_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training loss blew up and stayed up.
struct divergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace weam
