#pragma once

#include <stdexcept>
#include <string>

namespace mtaesth {

/// Base class for all library errors.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: bad key, inconsistent shapes, infeasible spec.
struct config_error : error {
  using error::error;
};

/// Operation called with inputs violating its contract.
struct input_error : error {
  using error::error;
};

/// Dataset problems: malformed files, failed validation, empty splits.
struct data_error : error {
  using error::error;
};

/// Numerical failure: divergence, non-convergence, NaN.
struct numerical_error : error {
  using error::error;
};

/// Matrix has an eigenvalue below the allowed negative tolerance.
struct not_psd_error : numerical_error {
  using numerical_error::numerical_error;
};

/// Matrix is singular (or numerically singular) where an inverse is needed.
struct singular_error : numerical_error {
  using numerical_error::numerical_error;
};

/// A subtask or parameter block has collapsed to zero where that is undefined.
struct degenerate_error : error {
  using error::error;
};

/// Checkpoint cannot be loaded or does not match the requested architecture.
struct checkpoint_error : error {
  using error::error;
};

/// Training aborted mid-run (non-finite loss).
struct train_error : error {
  using error::error;
};

}  // namespace mtaesth
