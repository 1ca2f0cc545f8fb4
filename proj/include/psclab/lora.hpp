#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "psclab/numerics.hpp"
#include "psclab/tensor.hpp"

namespace psclab {

// Low-rank factor pair attached to a frozen W [d x k]:
// effective weight W + scale * B A, with B [d x r], A [r x k].
struct LoraAdapter {
  Tensor a;  // [r x k]
  Tensor b;  // [d x r]
  std::size_t rank = 0;
  double scale = 1.0;

  void validate(std::size_t d, std::size_t k) const {
    if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("lora: factors must be 2-D");
    if (a.rows() != rank || a.cols() != k || b.rows() != d || b.cols() != rank)
      throw ShapeError("lora: factor shapes do not match W and rank");
    if (rank > std::min(d, k) / 2)
      throw ConfigError("lora: rank exceeds min(d,k)/2");
  }
};

// A uniform(-1/sqrt(k), 1/sqrt(k)), B zero, scale 1; the adapter is a
// no-op at step 0.
inline LoraAdapter init_lora(RngState& rng, std::size_t d, std::size_t k, std::size_t rank,
                             double scale = 1.0) {
  LoraAdapter ad;
  ad.rank = rank;
  ad.scale = scale;
  const double bound = 1.0 / std::sqrt(static_cast<double>(k));
  ad.a = rng.uniform_tensor({rank, k}, -bound, bound);
  ad.b = Tensor({d, rank});
  ad.validate(d, k);
  return ad;
}

// W x + scale * B (A x); W is never touched.
inline std::vector<double> lora_forward(const Tensor& w, const LoraAdapter& adapter,
                                        const std::vector<double>& x) {
  adapter.validate(w.rows(), w.cols());
  std::vector<double> y = matvec(w, x);
  std::vector<double> ax = matvec(adapter.a, x);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    double s = 0.0;
    for (std::size_t r = 0; r < adapter.rank; ++r) s += adapter.b.at(i, r) * ax[r];
    y[i] += adapter.scale * s;
  }
  return y;
}

inline Tensor lora_merge(const Tensor& w, const LoraAdapter& adapter) {
  adapter.validate(w.rows(), w.cols());
  Tensor merged = w;
  const Tensor ba = matmul(adapter.b, adapter.a);
  for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += adapter.scale * ba[i];
  return merged;
}

struct LoraGrads {
  Tensor da;  // [r x k]
  Tensor db;  // [d x r]
};

// Gradients of W x + scale * B A x wrt A and B; W gets none.
// dA = scale * B^T upstream x^T, dB = scale * upstream (A x)^T.
inline LoraGrads lora_backward(const Tensor& w, const LoraAdapter& adapter,
                               const std::vector<double>& x, const std::vector<double>& upstream) {
  adapter.validate(w.rows(), w.cols());
  if (x.size() != w.cols() || upstream.size() != w.rows())
    throw ShapeError("lora backward: vector shapes do not match W");
  LoraGrads g{Tensor({adapter.rank, w.cols()}), Tensor({w.rows(), adapter.rank})};
  std::vector<double> ax = matvec(adapter.a, x);
  std::vector<double> btu(adapter.rank, 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t r = 0; r < adapter.rank; ++r) btu[r] += adapter.b.at(i, r) * upstream[i];
  for (std::size_t r = 0; r < adapter.rank; ++r)
    for (std::size_t j = 0; j < w.cols(); ++j) g.da.at(r, j) = adapter.scale * btu[r] * x[j];
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t r = 0; r < adapter.rank; ++r)
      g.db.at(i, r) = adapter.scale * upstream[i] * ax[r];
  return g;
}

// Input gradient of the adapted projection: W^T u + scale * A^T B^T u.
inline std::vector<double> lora_input_grad(const Tensor& w, const LoraAdapter& adapter,
                                           const std::vector<double>& upstream) {
  std::vector<double> dx(w.cols(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) dx[j] += w.at(i, j) * upstream[i];
  std::vector<double> btu(adapter.rank, 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t r = 0; r < adapter.rank; ++r) btu[r] += adapter.b.at(i, r) * upstream[i];
  for (std::size_t r = 0; r < adapter.rank; ++r)
    for (std::size_t j = 0; j < w.cols(); ++j)
      dx[j] += adapter.scale * adapter.a.at(r, j) * btu[r];
  return dx;
}

}  // namespace psclab
