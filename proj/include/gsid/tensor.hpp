#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gsid/errors.hpp"

namespace gsid {

// Dense row-major tensor of doubles. Most of the library works with rank-2
// tensors (matrices); vectors are stored as 1 x n.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
      : shape(std::move(dims)), values(count(shape), fill) {}

  Tensor(std::vector<std::size_t> dims, std::vector<double> data)
      : shape(std::move(dims)), values(std::move(data)) {
    if (values.size() != count(shape)) {
      throw ShapeError("tensor value count " + std::to_string(values.size()) +
                       " does not match shape product " + std::to_string(count(shape)));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor row_vector(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor({1, n}, std::move(data));
  }

  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  static std::size_t count(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }

  [[nodiscard]] std::size_t size() const { return values.size(); }
  [[nodiscard]] std::size_t rank() const { return shape.size(); }

  // Rows/cols view every tensor as a matrix: the last dimension is the
  // column count, everything before it folds into rows.
  [[nodiscard]] std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
  [[nodiscard]] std::size_t rows() const {
    const std::size_t c = cols();
    return c == 0 ? 0 : values.size() / c;
  }

  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {values.data() + r * cols(), cols()}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const {
    return {values.data() + r * cols(), cols()};
  }

  [[nodiscard]] bool all_finite() const {
    for (double v : values) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  [[nodiscard]] bool same_shape(const Tensor& other) const {
    return rows() == other.rows() && cols() == other.cols();
  }
};

template <typename Rng>
Tensor random_normal(std::vector<std::size_t> dims, double stddev, Rng& rng) {
  Tensor t(std::move(dims));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values) v = dist(rng);
  return t;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

namespace kernels {

// C (m x n) += A (m x k) * B (k x n), all row-major.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C (m x n) += A (m x k) * B^T, B stored n x k.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C (k x n) += A^T * B, A stored m x k, B stored m x n.
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

}  // namespace kernels
}  // namespace gsid
