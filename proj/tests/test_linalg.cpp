#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "mtaesth/errors.hpp"
#include "mtaesth/linalg.hpp"
#include "mtaesth/rng.hpp"

using namespace mtaesth;

namespace {

SymMatrix sym2(double a, double b, double c, double d) {
  return SymMatrix::from_entries(2, {a, b, c, d});
}

// independent dense multiply, used as the oracle side of every check
Matrix mul(const SymMatrix& a, const SymMatrix& b) {
  const std::size_t n = a.order();
  Matrix c(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += a.at(i, k) * b.at(k, j);
      c(i, j) = s;
    }
  return c;
}

double max_abs_diff(const Matrix& a, const SymMatrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < b.order(); ++i)
    for (std::size_t j = 0; j < b.order(); ++j)
      m = std::max(m, std::abs(a(i, j) - b.at(i, j)));
  return m;
}

double max_abs_diff_identity(const Matrix& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j)
      m = std::max(m, std::abs(a(i, j) - (i == j ? 1.0 : 0.0)));
  return m;
}

SymMatrix random_spd(std::size_t n, Rng& rng, double diag_boost = 0.0) {
  Matrix a(n, n);
  for (double& x : a.v) x = rng.normal();
  SymMatrix g = gram(a);
  for (std::size_t i = 0; i < n; ++i) g.at(i, i) += diag_boost;
  return g;
}

}  // namespace

TEST_CASE("eigendecomposition: diagonal and identity") {
  auto d = sym_eigendecompose(sym2(3, 0, 0, 1));
  CHECK(d.values[0] == doctest::Approx(3.0));
  CHECK(d.values[1] == doctest::Approx(1.0));
  CHECK(std::abs(d.vectors(0, 0)) == doctest::Approx(1.0));
  CHECK(std::abs(d.vectors(1, 1)) == doctest::Approx(1.0));

  auto id = sym_eigendecompose(SymMatrix::identity(5));
  for (double v : id.values) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("eigendecomposition: 2x2 hand oracle") {
  // char poly of [[2,1],[1,2]]: (2-l)^2 - 1 = 0 -> l in {3, 1}
  auto d = sym_eigendecompose(sym2(2, 1, 1, 2));
  CHECK(d.values[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(d.values[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("eigendecomposition: reconstruction and orthonormality") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 9;
    SymMatrix m = random_spd(n, rng);
    // make some of them indefinite
    if (trial % 3 == 0) {
      for (std::size_t i = 0; i < n; ++i) m.at(i, i) -= 2.0;
    }
    auto d = sym_eigendecompose(m);
    const double tol = 1e-8 * (1.0 + m.max_abs());

    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0) CHECK(d.values[i - 1] >= d.values[i]);
      for (std::size_t j = 0; j < n; ++j) {
        double recon = 0.0;
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          recon += d.vectors(i, k) * d.values[k] * d.vectors(j, k);
          dot += d.vectors(k, i) * d.vectors(k, j);
        }
        CHECK(std::abs(recon - m.at(i, j)) < tol);
        CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-8);
      }
    }
  }
}

TEST_CASE("eigendecomposition rejects asymmetry and non-finite input") {
  CHECK_THROWS_AS(sym_eigendecompose(SymMatrix::from_entries(2, {1, 2, 3, 4})),
                  input_error);
  CHECK_THROWS_AS(
      SymMatrix::from_entries(2, {1, std::nan(""), std::nan(""), 4}),
      input_error);
}

TEST_CASE("psd_sqrt: diagonal and identity") {
  SymMatrix r = psd_sqrt(sym2(4, 0, 0, 9));
  CHECK(r.at(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(r.at(1, 1) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(std::abs(r.at(0, 1)) < 1e-12);

  SymMatrix id = psd_sqrt(SymMatrix::identity(3));
  CHECK(max_abs_diff(mul(id, id), SymMatrix::identity(3)) < 1e-12);
}

TEST_CASE("psd_sqrt squares back to the input") {
  SymMatrix m = sym2(2, 1, 1, 2);
  SymMatrix r = psd_sqrt(m);
  CHECK(max_abs_diff(mul(r, r), m) < 1e-10);
}

TEST_CASE("psd_sqrt property: 200 random PSD instances") {
  Rng rng(1234);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 10;
    SymMatrix m = random_spd(n, rng);
    SymMatrix r = psd_sqrt(m);
    const double scale = std::max(1.0, m.max_abs());
    CHECK(max_abs_diff(mul(r, r), m) / scale < 1e-7);
    // result stays symmetric PSD
    auto d = sym_eigendecompose(r);
    CHECK(d.values.back() > -1e-10 * scale);
  }
}

TEST_CASE("psd_sqrt clamps round-off negatives and rejects real ones") {
  SymMatrix tiny(2);
  tiny.at(0, 0) = 1.0;
  tiny.at(1, 1) = -1e-12;  // within jitter * trace
  SymMatrix r = psd_sqrt(tiny);
  CHECK(r.at(1, 1) == 0.0);

  CHECK_THROWS_AS(psd_sqrt(sym2(1, 0, 0, -1)), not_psd_error);
}

TEST_CASE("sym_inverse: diagonal and identity") {
  SymMatrix inv = sym_inverse(sym2(2, 0, 0, 4));
  CHECK(inv.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(inv.at(1, 1) == doctest::Approx(0.25).epsilon(1e-12));

  SymMatrix id = sym_inverse(SymMatrix::identity(4));
  CHECK(max_abs_diff(mul(id, SymMatrix::identity(4)), SymMatrix::identity(4)) <
        1e-12);
}

TEST_CASE("sym_inverse property: product with input is the identity") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 8;
    SymMatrix m = random_spd(n, rng, 0.5);
    SymMatrix inv = sym_inverse(m);
    CHECK(max_abs_diff_identity(mul(m, inv)) < 1e-6);
  }
}

TEST_CASE("sym_inverse: ridge shifts the spectrum") {
  SymMatrix inv = sym_inverse(sym2(1, 0, 0, 0), 1.0);
  CHECK(inv.at(0, 0) == doctest::Approx(0.5));
  CHECK(inv.at(1, 1) == doctest::Approx(1.0));
}

TEST_CASE("sym_inverse rejects singular input") {
  CHECK_THROWS_AS(sym_inverse(SymMatrix(3)), singular_error);
  CHECK_THROWS_AS(sym_inverse(sym2(1, 1, 1, 1)), singular_error);
}

TEST_CASE("covariance_to_correlation: closed forms") {
  SymMatrix c = covariance_to_correlation(sym2(0.5, -0.3, -0.3, 0.5));
  CHECK(c.at(0, 0) == 1.0);
  CHECK(c.at(1, 1) == 1.0);
  CHECK(c.at(0, 1) == doctest::Approx(-0.6).epsilon(1e-12));

  SymMatrix scaled(3);
  for (std::size_t i = 0; i < 3; ++i) scaled.at(i, i) = 0.2;
  SymMatrix u = covariance_to_correlation(scaled);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(u.at(i, j) == (i == j ? 1.0 : 0.0));
}

TEST_CASE("covariance_to_correlation matches the scalar oracle elementwise") {
  Rng rng(7);
  SymMatrix m = random_spd(6, rng, 3.0);
  SymMatrix c = covariance_to_correlation(m);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      const double expect =
          m.at(i, j) / std::sqrt(m.at(i, i) * m.at(j, j));
      CHECK(std::abs(c.at(i, j) - (i == j ? 1.0 : expect)) < 1e-12);
      CHECK(c.at(i, j) <= 1.0 + 1e-10);
      CHECK(c.at(i, j) >= -1.0 - 1e-10);
    }
  }
}

TEST_CASE("covariance_to_correlation is idempotent") {
  Rng rng(8);
  SymMatrix m = random_spd(5, rng, 2.0);
  SymMatrix once = covariance_to_correlation(m);
  SymMatrix twice = covariance_to_correlation(once);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      CHECK(std::abs(once.at(i, j) - twice.at(i, j)) < 1e-10);
}

TEST_CASE("covariance_to_correlation names the degenerate subtask") {
  SymMatrix m(3);
  m.at(0, 0) = 1.0;
  m.at(2, 2) = 1.0;  // subtask 1 has zero variance
  try {
    covariance_to_correlation(m);
    FAIL("expected degenerate_error");
  } catch (const degenerate_error& e) {
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
}

TEST_CASE("sqrt/inverse round trip: inv(sqrt(m)) * sqrt(m) = I") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    SymMatrix m = random_spd(4 + trial % 4, rng, 0.5);
    SymMatrix r = psd_sqrt(m);
    SymMatrix rinv = sym_inverse(r);
    CHECK(max_abs_diff_identity(mul(rinv, r)) < 1e-6);
  }
}
