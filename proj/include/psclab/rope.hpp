#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "psclab/numerics.hpp"
#include "psclab/tensor.hpp"

namespace psclab {

// Coordinate pairing of the d_h-dimensional head space into d_h/2
// rotation planes. HalfBlocks pairs (i, i+d_h/2), the block-wise
// organization used by transformers-style checkpoints; PairInterleaved
// pairs (2i, 2i+1), the textbook form. HalfBlocks is the default.
enum class PairLayout { PairInterleaved, HalfBlocks };

inline std::pair<std::size_t, std::size_t> pair_indices(PairLayout layout, std::size_t pair,
                                                        std::size_t dim) {
  if (layout == PairLayout::PairInterleaved) return {2 * pair, 2 * pair + 1};
  return {pair, pair + dim / 2};
}

// How the per-pair rotary frequencies are produced: the base geometric
// decay or one of the context-extension rescales.
struct FrequencySchedule {
  enum class Kind { Base, PI, NTKAware, YaRN, Custom };

  Kind kind = Kind::Base;
  std::size_t dim = 0;     // head dimension, even
  double base = 1.0e4;     // b
  // PI
  std::size_t pretrained_context = 0;  // L
  std::size_t extended_context = 0;    // L'
  // NTKAware / YaRN
  double scale = 1.0;  // s
  // YaRN
  double blend = 0.0;  // gamma
  bool yarn_ramp = false;
  // Custom (LongRoPE-style searched factors), length dim/2, each divides theta_i
  std::vector<double> factors;

  static FrequencySchedule make_base(double b, std::size_t d) {
    FrequencySchedule s;
    s.kind = Kind::Base;
    s.base = b;
    s.dim = d;
    s.validate();
    return s;
  }
  static FrequencySchedule make_pi(double b, std::size_t d, std::size_t L, std::size_t L_ext) {
    FrequencySchedule s;
    s.kind = Kind::PI;
    s.base = b;
    s.dim = d;
    s.pretrained_context = L;
    s.extended_context = L_ext;
    s.validate();
    return s;
  }
  static FrequencySchedule make_ntk(double b, std::size_t d, double scale) {
    FrequencySchedule s;
    s.kind = Kind::NTKAware;
    s.base = b;
    s.dim = d;
    s.scale = scale;
    s.validate();
    return s;
  }
  static FrequencySchedule make_yarn(double b, std::size_t d, double scale, double blend,
                                     bool ramp = false) {
    FrequencySchedule s;
    s.kind = Kind::YaRN;
    s.base = b;
    s.dim = d;
    s.scale = scale;
    s.blend = blend;
    s.yarn_ramp = ramp;
    s.validate();
    return s;
  }
  static FrequencySchedule make_custom(std::size_t d, std::vector<double> factors,
                                       double b = 1.0e4) {
    FrequencySchedule s;
    s.kind = Kind::Custom;
    s.base = b;
    s.dim = d;
    s.factors = std::move(factors);
    s.validate();
    return s;
  }

  void validate() const {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("schedule: dim must be even and >= 2");
    if (base <= 1.0) throw ConfigError("schedule: base must exceed 1");
    switch (kind) {
      case Kind::PI:
        if (pretrained_context < 1 || extended_context < pretrained_context)
          throw ConfigError("schedule: need extended_context >= pretrained_context >= 1");
        break;
      case Kind::NTKAware:
        if (scale < 1.0) throw ConfigError("schedule: NTK scale must be >= 1");
        break;
      case Kind::YaRN:
        if (scale < 1.0) throw ConfigError("schedule: YaRN scale must be >= 1");
        if (blend < 0.0 || blend > 1.0) throw ConfigError("schedule: blend must be in [0,1]");
        break;
      case Kind::Custom:
        if (factors.size() != dim / 2)
          throw ConfigError("schedule: custom factors must have length dim/2");
        for (double f : factors)
          if (!(f > 0.0)) throw ConfigError("schedule: custom factors must be positive");
        break;
      case Kind::Base:
        break;
    }
  }
};

// theta_i per variant; index i is 0-based throughout, so the base
// schedule reads b^(-2i/d) for i in [0, d/2).
inline Tensor frequencies(const FrequencySchedule& s) {
  s.validate();
  const std::size_t half = s.dim / 2;
  Tensor theta({half});
  for (std::size_t i = 0; i < half; ++i)
    theta[i] = std::pow(s.base, -2.0 * static_cast<double>(i) / static_cast<double>(s.dim));

  switch (s.kind) {
    case FrequencySchedule::Kind::Base:
      break;
    case FrequencySchedule::Kind::PI: {
      const double r = static_cast<double>(s.pretrained_context) /
                       static_cast<double>(s.extended_context);
      for (auto& t : theta.data()) t *= r;
      break;
    }
    case FrequencySchedule::Kind::NTKAware: {
      const double b_ntk =
          s.base * std::pow(s.scale, static_cast<double>(s.dim) / static_cast<double>(s.dim - 2));
      for (std::size_t i = 0; i < half; ++i)
        theta[i] = std::pow(b_ntk, -2.0 * static_cast<double>(i) / static_cast<double>(s.dim));
      break;
    }
    case FrequencySchedule::Kind::YaRN: {
      for (std::size_t i = 0; i < half; ++i) {
        double g = s.blend;
        if (s.yarn_ramp) {
          // Linear ramp: keep high frequencies (small i), interpolate
          // low ones. Scalar blend stays the default.
          g = (half > 1) ? 1.0 - static_cast<double>(i) / static_cast<double>(half - 1) : 1.0;
        }
        theta[i] = (1.0 - g) * theta[i] / s.scale + g * theta[i];
      }
      break;
    }
    case FrequencySchedule::Kind::Custom:
      for (std::size_t i = 0; i < half; ++i) theta[i] /= s.factors[i];
      break;
  }
  return theta;
}

// Materialized cos/sin tables for positions [0, max_pos).
struct RotaryCache {
  Tensor cos_table;  // [max_pos x d/2]
  Tensor sin_table;
  Tensor freqs;  // [d/2]
  PairLayout layout = PairLayout::HalfBlocks;
  std::size_t dim = 0;

  std::size_t max_pos() const { return cos_table.rows(); }
};

inline RotaryCache build_cache(const Tensor& freqs, std::size_t max_pos,
                               PairLayout layout = PairLayout::HalfBlocks) {
  if (max_pos < 1) throw RangeError("build_cache: max_pos must be >= 1");
  if (freqs.ndim() != 1) throw ShapeError("build_cache: freqs must be 1-D");
  const std::size_t half = freqs.size();
  RotaryCache cache;
  cache.cos_table = Tensor({max_pos, half});
  cache.sin_table = Tensor({max_pos, half});
  cache.freqs = freqs;
  cache.layout = layout;
  cache.dim = 2 * half;
  for (std::size_t m = 0; m < max_pos; ++m)
    for (std::size_t i = 0; i < half; ++i) {
      const double a = static_cast<double>(m) * freqs[i];
      cache.cos_table.at(m, i) = std::cos(a);
      cache.sin_table.at(m, i) = std::sin(a);
    }
  return cache;
}

// Rotate one d-dimensional vector in place by position m. Each pair
// turns through the standard 2-D rotation [[cos,-sin],[sin,cos]].
inline void rotate_inplace(double* x, std::size_t dim, const double* cos_row,
                           const double* sin_row, PairLayout layout) {
  for (std::size_t p = 0; p < dim / 2; ++p) {
    const auto [a, b] = pair_indices(layout, p, dim);
    const double c = cos_row[p], s = sin_row[p];
    const double xa = x[a], xb = x[b];
    x[a] = c * xa - s * xb;
    x[b] = s * xa + c * xb;
  }
}

// Inverse rotation (transpose); used by backward passes.
inline void rotate_inplace_inverse(double* x, std::size_t dim, const double* cos_row,
                                   const double* sin_row, PairLayout layout) {
  for (std::size_t p = 0; p < dim / 2; ++p) {
    const auto [a, b] = pair_indices(layout, p, dim);
    const double c = cos_row[p], s = sin_row[p];
    const double xa = x[a], xb = x[b];
    x[a] = c * xa + s * xb;
    x[b] = -s * xa + c * xb;
  }
}

inline std::vector<double> rotate_vector(std::vector<double> x, std::size_t m,
                                         const Tensor& freqs, PairLayout layout) {
  const std::size_t dim = x.size();
  if (freqs.size() * 2 != dim) throw ShapeError("rotate_vector: freqs/dim mismatch");
  std::vector<double> cs(freqs.size()), sn(freqs.size());
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    cs[i] = std::cos(static_cast<double>(m) * freqs[i]);
    sn[i] = std::sin(static_cast<double>(m) * freqs[i]);
  }
  rotate_inplace(x.data(), dim, cs.data(), sn.data(), layout);
  return x;
}

// Dense d x d rotation matrix R_{Theta,m}; oracle-side builder for
// rank and composition checks.
inline Tensor rotation_matrix(const Tensor& freqs, std::size_t m, PairLayout layout) {
  const std::size_t dim = 2 * freqs.size();
  Tensor r = Tensor::identity(dim);
  for (std::size_t p = 0; p < freqs.size(); ++p) {
    const auto [a, b] = pair_indices(layout, p, dim);
    const double ang = static_cast<double>(m) * freqs[p];
    r.at(a, a) = std::cos(ang);
    r.at(a, b) = -std::sin(ang);
    r.at(b, a) = std::sin(ang);
    r.at(b, b) = std::cos(ang);
  }
  return r;
}

// x: [batch x heads x seq x d_h], positions per sequence slot.
inline Tensor apply_rotary(const Tensor& x, const std::vector<std::size_t>& positions,
                           const RotaryCache& cache) {
  if (x.ndim() != 4) throw ShapeError("apply_rotary expects a 4-D tensor");
  const std::size_t batch = x.dim(0), heads = x.dim(1), seq = x.dim(2), dh = x.dim(3);
  if (dh != cache.dim) throw ShapeError("apply_rotary: head dim does not match cache");
  if (positions.size() != seq) throw ShapeError("apply_rotary: positions length != seq");
  for (std::size_t pos : positions)
    if (pos >= cache.max_pos()) throw RangeError("apply_rotary: position outside cache range");

  Tensor y = x;
  const std::size_t half = dh / 2;
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < seq; ++t) {
        double* row = y.data().data() + ((bi * heads + h) * seq + t) * dh;
        const double* cs = cache.cos_table.data().data() + positions[t] * half;
        const double* sn = cache.sin_table.data().data() + positions[t] * half;
        rotate_inplace(row, dh, cs, sn, cache.layout);
      }
  return y;
}

// <R_m W_q x_m, R_n W_k x_n>; depends on m - n only for fixed contents.
inline double relative_score(const Tensor& xm, const Tensor& xn, const Tensor& wq,
                             const Tensor& wk, std::size_t m, std::size_t n, const Tensor& freqs,
                             PairLayout layout = PairLayout::HalfBlocks) {
  std::vector<double> q = rotate_vector(matvec(wq, xm.data()), m, freqs, layout);
  std::vector<double> k = rotate_vector(matvec(wk, xn.data()), n, freqs, layout);
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * k[i];
  return s;
}

}  // namespace psclab
