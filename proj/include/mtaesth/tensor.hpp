#pragma once

#include <cstddef>
#include <vector>

namespace mtaesth {

/// Batched NHWC activation tensor. Dense activations use h = w = 1 with the
/// feature dimension in c.
struct Tensor {
  std::size_t n = 0, h = 0, w = 0, c = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::size_t n_, std::size_t h_, std::size_t w_, std::size_t c_)
      : n(n_), h(h_), w(w_), c(c_), v(n_ * h_ * w_ * c_, 0.0) {}

  std::size_t size() const { return v.size(); }
  std::size_t per_sample() const { return h * w * c; }

  double* sample(std::size_t i) { return v.data() + i * per_sample(); }
  const double* sample(std::size_t i) const {
    return v.data() + i * per_sample();
  }

  double& at(std::size_t i, std::size_t y, std::size_t x, std::size_t ch) {
    return v[((i * h + y) * w + x) * c + ch];
  }
  double at(std::size_t i, std::size_t y, std::size_t x, std::size_t ch) const {
    return v[((i * h + y) * w + x) * c + ch];
  }

  void zero() { std::fill(v.begin(), v.end(), 0.0); }

  bool same_shape(const Tensor& o) const {
    return n == o.n && h == o.h && w == o.w && c == o.c;
  }
};

}  // namespace mtaesth
