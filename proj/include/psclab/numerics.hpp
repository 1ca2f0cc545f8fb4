#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "psclab/tensor.hpp"

namespace psclab {

// Deterministic summation order: row-major, left to right.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul expects 2-D operands");
  if (a.cols() != b.rows()) throw ShapeError("matmul inner dimension mismatch");
  a.require_finite("matmul lhs");
  b.require_finite("matmul rhs");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      for (std::size_t j = 0; j < n; ++j) c.at(i, j) += aip * b.at(p, j);
    }
  return c;
}

// y = A x for 2-D A and flat x.
inline std::vector<double> matvec(const Tensor& a, const std::vector<double>& x) {
  if (a.ndim() != 2 || a.cols() != x.size()) throw ShapeError("matvec dimension mismatch");
  std::vector<double> y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a.at(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw ShapeError("transpose expects 2-D");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double silu_scalar(double x) { return x * sigmoid(x); }

inline double silu_deriv(double x) {
  const double s = sigmoid(x);
  return s + x * s * (1.0 - s);
}

inline Tensor silu(const Tensor& x) {
  x.require_finite("silu input");
  Tensor y = x;
  for (auto& v : y.data()) v = silu_scalar(v);
  return y;
}

// sigma2 of the gate: 1/2 tanh, range strictly inside (-0.5, 0.5).
// tanh saturates to exactly +-1 in f64, so saturated values are pulled
// one ulp inward to keep the open-interval invariant.
inline double half_tanh_scalar(double x) {
  const double v = 0.5 * std::tanh(x);
  if (v >= 0.5) return std::nextafter(0.5, 0.0);
  if (v <= -0.5) return std::nextafter(-0.5, 0.0);
  return v;
}

inline Tensor half_tanh(const Tensor& x) {
  x.require_finite("half_tanh input");
  Tensor y = x;
  for (auto& v : y.data()) v = half_tanh_scalar(v);
  return y;
}

// Row-wise softmax over the last dimension, max-subtracted.
inline Tensor softmax_rows(const Tensor& x) {
  x.require_finite("softmax input");
  if (x.ndim() < 1 || x.shape().back() < 1) throw ShapeError("softmax needs last dim >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t nrows = x.size() / n;
  Tensor y = x;
  for (std::size_t r = 0; r < nrows; ++r) {
    double* row = y.data().data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
  }
  return y;
}

// Numerical rank via Gaussian elimination with partial pivoting.
// A pivot counts if |pivot| > rel_tol * max|a|. SVD deliberately
// avoided: matrices in scope are tiny, well-conditioned rotations.
inline int matrix_rank(const Tensor& a, double rel_tol = 1e-8) {
  if (rel_tol <= 0) throw RangeError("matrix_rank: rel_tol must be positive");
  if (a.size() == 0) return 0;
  if (a.ndim() != 2) throw ShapeError("matrix_rank expects 2-D");
  a.require_finite("matrix_rank input");
  const std::size_t m = a.rows(), n = a.cols();
  double amax = 0.0;
  for (double v : a.data()) amax = std::max(amax, std::abs(v));
  if (amax == 0.0) return 0;
  const double tol = rel_tol * amax;

  Tensor w = a;
  int rank = 0;
  std::size_t row = 0;
  for (std::size_t col = 0; col < n && row < m; ++col) {
    std::size_t piv = row;
    for (std::size_t i = row + 1; i < m; ++i)
      if (std::abs(w.at(i, col)) > std::abs(w.at(piv, col))) piv = i;
    if (std::abs(w.at(piv, col)) <= tol) continue;
    if (piv != row)
      for (std::size_t j = 0; j < n; ++j) std::swap(w.at(piv, j), w.at(row, j));
    for (std::size_t i = row + 1; i < m; ++i) {
      const double f = w.at(i, col) / w.at(row, col);
      for (std::size_t j = col; j < n; ++j) w.at(i, j) -= f * w.at(row, j);
    }
    ++row;
    ++rank;
  }
  return rank;
}

// Central-difference gradient oracle; step cbrt(eps) * max(1, |x_i|).
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x) {
  const double h0 = std::cbrt(std::numeric_limits<double>::epsilon());
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = probe[i];
    const double h = h0 * std::max(1.0, std::abs(xi));
    probe[i] = xi + h;
    const double fp = f(probe);
    probe[i] = xi - h;
    const double fm = f(probe);
    probe[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_grad: non-finite function value");
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace psclab
