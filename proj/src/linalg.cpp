#include "mtaesth/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mtaesth/errors.hpp"

namespace mtaesth {

namespace {

constexpr double kSymTol = 1e-10;

void check_symmetric(std::size_t order, const std::vector<double>& e) {
  for (std::size_t i = 0; i < order; ++i) {
    for (std::size_t j = 0; j < order; ++j) {
      const double x = e[i * order + j];
      if (!std::isfinite(x)) {
        throw input_error("matrix entry (" + std::to_string(i) + "," +
                          std::to_string(j) + ") is not finite");
      }
      if (j > i && std::abs(x - e[j * order + i]) > kSymTol) {
        throw input_error("matrix is not symmetric at (" + std::to_string(i) +
                          "," + std::to_string(j) + "): " + std::to_string(x) +
                          " vs " + std::to_string(e[j * order + i]));
      }
    }
  }
}

}  // namespace

SymMatrix SymMatrix::identity(std::size_t order) {
  SymMatrix m(order);
  for (std::size_t i = 0; i < order; ++i) m.at(i, i) = 1.0;
  return m;
}

SymMatrix SymMatrix::from_entries(std::size_t order,
                                  std::vector<double> entries) {
  if (entries.size() != order * order) {
    throw input_error("entry count " + std::to_string(entries.size()) +
                      " does not match order " + std::to_string(order));
  }
  check_symmetric(order, entries);
  SymMatrix m(order);
  for (std::size_t i = 0; i < order; ++i) {
    for (std::size_t j = i; j < order; ++j) {
      const double avg = 0.5 * (entries[i * order + j] + entries[j * order + i]);
      m.at(i, j) = avg;
      m.at(j, i) = avg;
    }
  }
  return m;
}

double SymMatrix::trace() const {
  double t = 0.0;
  for (std::size_t i = 0; i < order_; ++i) t += at(i, i);
  return t;
}

double SymMatrix::max_abs() const {
  double m = 0.0;
  for (double x : e_) m = std::max(m, std::abs(x));
  return m;
}

EigenDecomposition sym_eigendecompose(const SymMatrix& m) {
  check_symmetric(m.order(), m.entries());
  const std::size_t n = m.order();
  std::vector<double> a = m.entries();
  Matrix q(n, n);
  for (std::size_t i = 0; i < n; ++i) q(i, i) = 1.0;

  auto off_norm = [&]() {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += a[i * n + j] * a[i * n + j];
    return std::sqrt(2.0 * s);
  };

  double fro = 0.0;
  for (double x : a) fro += x * x;
  fro = std::sqrt(fro);
  const double stop = 1e-14 * std::max(fro, 1.0);

  const int max_sweeps = 64;
  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    if (off_norm() <= stop) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t qi = p + 1; qi < n; ++qi) {
        const double apq = a[p * n + qi];
        if (std::abs(apq) <= 1e-300) continue;
        const double app = a[p * n + p];
        const double aqq = a[qi * n + qi];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(1.0 + theta * theta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;

        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p];
          const double akq = a[k * n + qi];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + qi] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k];
          const double aqk = a[qi * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[qi * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double qkp = q(k, p);
          const double qkq = q(k, qi);
          q(k, p) = c * qkp - s * qkq;
          q(k, qi) = s * qkp + c * qkq;
        }
      }
    }
  }
  if (sweep == max_sweeps && off_norm() > stop) {
    throw numerical_error("Jacobi eigendecomposition did not converge in " +
                          std::to_string(max_sweeps) + " sweeps");
  }

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
    return a[i * n + i] > a[j * n + j];
  });

  EigenDecomposition d;
  d.values.resize(n);
  d.vectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    d.values[k] = a[idx[k] * n + idx[k]];
    for (std::size_t r = 0; r < n; ++r) d.vectors(r, k) = q(r, idx[k]);
  }
  return d;
}

namespace {

/// Q diag(f(λ)) Qᵀ, symmetrized exactly.
SymMatrix reassemble(const EigenDecomposition& d,
                     const std::vector<double>& f) {
  const std::size_t n = d.values.size();
  SymMatrix out(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        s += d.vectors(i, k) * f[k] * d.vectors(j, k);
      }
      out.at(i, j) = s;
      out.at(j, i) = s;
    }
  }
  return out;
}

}  // namespace

SymMatrix psd_sqrt(const SymMatrix& m, double jitter) {
  EigenDecomposition d = sym_eigendecompose(m);
  const double tol = jitter * std::abs(m.trace());
  std::vector<double> roots(d.values.size());
  for (std::size_t k = 0; k < d.values.size(); ++k) {
    double lam = d.values[k];
    if (lam < -tol) {
      throw not_psd_error("eigenvalue " + std::to_string(lam) +
                          " below PSD tolerance " + std::to_string(-tol));
    }
    roots[k] = std::sqrt(std::max(lam, 0.0));
  }
  return reassemble(d, roots);
}

SymMatrix sym_inverse(const SymMatrix& m, double ridge) {
  if (ridge < 0.0) throw input_error("ridge must be nonnegative");
  EigenDecomposition d = sym_eigendecompose(m);
  const std::size_t n = d.values.size();
  const double shifted_trace = m.trace() + ridge * static_cast<double>(n);
  std::vector<double> inv(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double lam = d.values[k] + ridge;
    if (lam <= 0.0 || lam < 1e-12 * shifted_trace) {
      throw singular_error("matrix is singular: shifted eigenvalue " +
                           std::to_string(lam));
    }
    inv[k] = 1.0 / lam;
  }
  return reassemble(d, inv);
}

SymMatrix covariance_to_correlation(const SymMatrix& omega) {
  const std::size_t n = omega.order();
  for (std::size_t i = 0; i < n; ++i) {
    if (!(omega.at(i, i) > 0.0)) {
      throw degenerate_error("degenerate subtask " + std::to_string(i) +
                             ": variance " + std::to_string(omega.at(i, i)));
    }
  }
  SymMatrix r(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double x =
          omega.at(i, j) / std::sqrt(omega.at(i, i) * omega.at(j, j));
      r.at(i, j) = x;
      r.at(j, i) = x;
    }
  }
  return r;
}

SymMatrix gram(const Matrix& w) {
  SymMatrix g(w.cols);
  for (std::size_t i = 0; i < w.cols; ++i) {
    for (std::size_t j = i; j < w.cols; ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < w.rows; ++r) s += w(r, i) * w(r, j);
      g.at(i, j) = s;
      g.at(j, i) = s;
    }
  }
  return g;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw input_error("matmul dimension mismatch");
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
    }
  }
  return c;
}

Matrix matmul_sym(const Matrix& a, const SymMatrix& s) {
  if (a.cols != s.order()) throw input_error("matmul dimension mismatch");
  Matrix c(a.rows, s.order());
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < s.order(); ++j) c(i, j) += aik * s.at(k, j);
    }
  }
  return c;
}

double frobenius_sq(const Matrix& a) {
  double s = 0.0;
  for (double x : a.v) s += x * x;
  return s;
}

}  // namespace mtaesth
