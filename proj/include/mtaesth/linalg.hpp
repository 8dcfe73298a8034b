#pragma once

#include <cstddef>
#include <vector>

namespace mtaesth {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return v[r * cols + c];
  }
};

/// Symmetric real matrix. Full row-major storage; construction from raw
/// entries enforces symmetry to 1e-10 absolute and finiteness.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(std::size_t order) : order_(order), e_(order * order, 0.0) {}

  static SymMatrix identity(std::size_t order);
  /// Validating constructor; throws input_error on asymmetry or non-finite
  /// entries. Off-diagonal pairs are averaged so the result is exactly
  /// symmetric.
  static SymMatrix from_entries(std::size_t order, std::vector<double> entries);

  std::size_t order() const { return order_; }
  double& at(std::size_t i, std::size_t j) { return e_[i * order_ + j]; }
  double at(std::size_t i, std::size_t j) const { return e_[i * order_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return at(i, j); }

  double trace() const;
  double max_abs() const;
  const std::vector<double>& entries() const { return e_; }

 private:
  std::size_t order_ = 0;
  std::vector<double> e_;
};

struct EigenDecomposition {
  std::vector<double> values;  ///< descending
  Matrix vectors;              ///< column k pairs with values[k]; orthonormal
};

/// Cyclic Jacobi eigendecomposition. Accurate for the small orders used
/// here (C+M subtasks, tens at most). Throws numerical_error if the
/// off-diagonal mass has not vanished within the sweep budget.
EigenDecomposition sym_eigendecompose(const SymMatrix& m);

/// Relative jitter used by default for PSD tolerance and ridge terms.
inline constexpr double kDefaultJitter = 1e-8;

/// Symmetric PSD square root. Eigenvalues in [-jitter*trace(m), 0) are
/// clamped to zero (round-off from Gram-matrix accumulation); anything
/// below that raises not_psd_error.
SymMatrix psd_sqrt(const SymMatrix& m, double jitter = kDefaultJitter);

/// Inverse of (m + ridge*I). Raises singular_error when the smallest
/// shifted eigenvalue falls below 1e-12 * trace(m + ridge*I).
SymMatrix sym_inverse(const SymMatrix& m, double ridge = 0.0);

/// Normalizes a covariance to correlations: r_ij = w_ij / sqrt(w_ii w_jj).
/// Diagonal entries are exactly 1. A nonpositive diagonal entry raises
/// degenerate_error naming the subtask index.
SymMatrix covariance_to_correlation(const SymMatrix& omega);

/// Gram matrix WᵀW (symmetric by construction).
SymMatrix gram(const Matrix& w);

/// General helpers used by the objectives and training code.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_sym(const Matrix& a, const SymMatrix& s);
double frobenius_sq(const Matrix& a);

}  // namespace mtaesth
