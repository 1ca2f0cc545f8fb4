#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "psclab/numerics.hpp"
#include "psclab/tensor.hpp"

namespace psclab {

enum class PscPlacement { Pre, Post };

// One head's gate weights. The gate is P(x) = 1/2 tanh(W2 silu(W1 x)),
// dataflow matching the einsum pair 'bnsd,ndr->bnsr' / 'bnsr,nrd->bnsd':
// z1[r] = sum_d x[d] W1[d,r], out[d] = sum_r u[r] W2[r,d].
struct PscHeadWeights {
  Tensor w1;  // [d_h x d_h]
  Tensor w2;  // [d_h x d_h]

  std::size_t head_dim() const { return w1.rows(); }

  void validate() const {
    if (w1.ndim() != 2 || w1.rows() != w1.cols()) throw ShapeError("psc: W1 must be square");
    if (!w2.same_shape(w1)) throw ShapeError("psc: W2 must match W1");
  }
};

// W1 uniform(-1/sqrt(d_h), 1/sqrt(d_h)), W2 zero. Zero last layer
// makes the module an exact identity at step 0.
inline PscHeadWeights init_psc_head(RngState& rng, std::size_t d_h) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_h));
  PscHeadWeights w;
  w.w1 = rng.uniform_tensor({d_h, d_h}, -bound, bound);
  w.w2 = Tensor({d_h, d_h});
  return w;
}

// Head-wise block-diagonal calibration for queries and keys.
// k_heads has n_kv_heads entries; k-gating runs per kv head, before
// any GQA head repetition.
struct PscModule {
  std::vector<PscHeadWeights> q_heads;
  std::vector<PscHeadWeights> k_heads;
  PscPlacement placement = PscPlacement::Pre;
  std::size_t d_h = 0;
};

inline PscModule init_psc_module(RngState& rng, std::size_t n_heads, std::size_t n_kv_heads,
                                 std::size_t d_h, PscPlacement placement) {
  PscModule m;
  m.placement = placement;
  m.d_h = d_h;
  m.q_heads.reserve(n_heads);
  m.k_heads.reserve(n_kv_heads);
  for (std::size_t h = 0; h < n_heads; ++h) m.q_heads.push_back(init_psc_head(rng, d_h));
  for (std::size_t h = 0; h < n_kv_heads; ++h) m.k_heads.push_back(init_psc_head(rng, d_h));
  return m;
}

namespace detail {

// Forward for one d_h vector; optionally captures intermediates for
// the backward pass.
inline void gate_vector(const PscHeadWeights& w, const double* x, double* p, double* z1_out,
                        double* u_out) {
  const std::size_t d = w.head_dim();
  std::vector<double> z1(d, 0.0), u(d);
  for (std::size_t dd = 0; dd < d; ++dd) {
    const double xv = x[dd];
    const double* row = w.w1.data().data() + dd * d;
    for (std::size_t r = 0; r < d; ++r) z1[r] += xv * row[r];
  }
  for (std::size_t r = 0; r < d; ++r) u[r] = silu_scalar(z1[r]);
  for (std::size_t dd = 0; dd < d; ++dd) p[dd] = 0.0;
  for (std::size_t r = 0; r < d; ++r) {
    const double uv = u[r];
    const double* row = w.w2.data().data() + r * d;
    for (std::size_t dd = 0; dd < d; ++dd) p[dd] += uv * row[dd];
  }
  for (std::size_t dd = 0; dd < d; ++dd) p[dd] = half_tanh_scalar(p[dd]);
  if (z1_out)
    for (std::size_t r = 0; r < d; ++r) z1_out[r] = z1[r];
  if (u_out)
    for (std::size_t r = 0; r < d; ++r) u_out[r] = u[r];
}

// Backward through out = x + P(x) * x (elementwise) for one vector.
// dp arrives as upstream * x; the direct path upstream * (1 + p) is
// accumulated by the caller.
inline void gate_backward_vector(const PscHeadWeights& w, const double* x, const double* p,
                                 const double* z1, const double* u, const double* dp, double* dx,
                                 Tensor& dw1, Tensor& dw2) {
  const std::size_t d = w.head_dim();
  // through sigma2 = 1/2 tanh: p = 0.5 t, dt/dz2 = 1 - t^2, t = 2p
  std::vector<double> dz2(d);
  for (std::size_t dd = 0; dd < d; ++dd) dz2[dd] = dp[dd] * 0.5 * (1.0 - 4.0 * p[dd] * p[dd]);
  // out[d] = sum_r u[r] W2[r,d]
  std::vector<double> du(d, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    const double* row = w.w2.data().data() + r * d;
    double* grow = dw2.data().data() + r * d;
    double acc = 0.0;
    for (std::size_t dd = 0; dd < d; ++dd) {
      grow[dd] += u[r] * dz2[dd];
      acc += row[dd] * dz2[dd];
    }
    du[r] = acc;
  }
  std::vector<double> dz1(d);
  for (std::size_t r = 0; r < d; ++r) dz1[r] = du[r] * silu_deriv(z1[r]);
  // z1[r] = sum_d x[d] W1[d,r]
  for (std::size_t dd = 0; dd < d; ++dd) {
    const double* row = w.w1.data().data() + dd * d;
    double* grow = dw1.data().data() + dd * d;
    double acc = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      grow[r] += x[dd] * dz1[r];
      acc += row[r] * dz1[r];
    }
    dx[dd] += acc;
  }
}

inline void check_heads(const Tensor& x, const std::vector<PscHeadWeights>& heads) {
  if (x.ndim() != 4) throw ShapeError("psc: expected [batch x heads x seq x d_h]");
  if (x.dim(1) != heads.size()) throw ConfigError("psc: head count does not match weights");
  for (const auto& w : heads) {
    w.validate();
    if (w.head_dim() != x.dim(3)) throw ConfigError("psc: head dim does not match weights");
  }
}

}  // namespace detail

// P(x) over [batch x heads x seq x d_h]; every output in (-0.5, 0.5).
inline Tensor gate(const Tensor& x, const std::vector<PscHeadWeights>& heads) {
  detail::check_heads(x, heads);
  const std::size_t batch = x.dim(0), nh = x.dim(1), seq = x.dim(2), d = x.dim(3);
  Tensor p(x.shape());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < nh; ++h)
      for (std::size_t t = 0; t < seq; ++t) {
        const std::size_t off = ((b * nh + h) * seq + t) * d;
        detail::gate_vector(heads[h], x.data().data() + off, p.data().data() + off, nullptr,
                            nullptr);
      }
  return p;
}

// Pre-calibration: x + P(x) * x = (1 + P(x)) * x.
inline Tensor apply_pre(const Tensor& x, const std::vector<PscHeadWeights>& heads) {
  Tensor p = gate(x, heads);
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = (1.0 + p[i]) * x[i];
  return y;
}

// Post-calibration: (P(f) + 1) * f on position-encoded embeddings.
// Same arithmetic as apply_pre; the distinction is where the model
// invokes it relative to the rotary transform.
inline Tensor apply_post(const Tensor& f, const std::vector<PscHeadWeights>& heads) {
  return apply_pre(f, heads);
}

struct PscGrads {
  std::vector<Tensor> dw1;
  std::vector<Tensor> dw2;
  Tensor dx;
};

// Analytic gradients of out = (1 + P(x)) * x under `upstream`.
inline PscGrads backward(const Tensor& x, const std::vector<PscHeadWeights>& heads,
                         const Tensor& upstream) {
  detail::check_heads(x, heads);
  if (!upstream.same_shape(x)) throw ShapeError("psc backward: upstream shape mismatch");
  const std::size_t batch = x.dim(0), nh = x.dim(1), seq = x.dim(2), d = x.dim(3);
  PscGrads g;
  g.dx = Tensor(x.shape());
  for (std::size_t h = 0; h < nh; ++h) {
    g.dw1.emplace_back(Tensor({d, d}));
    g.dw2.emplace_back(Tensor({d, d}));
  }
  std::vector<double> p(d), z1(d), u(d), dp(d);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < nh; ++h)
      for (std::size_t t = 0; t < seq; ++t) {
        const std::size_t off = ((b * nh + h) * seq + t) * d;
        const double* xv = x.data().data() + off;
        const double* up = upstream.data().data() + off;
        double* dx = g.dx.data().data() + off;
        detail::gate_vector(heads[h], xv, p.data(), z1.data(), u.data());
        for (std::size_t i = 0; i < d; ++i) {
          dx[i] += up[i] * (1.0 + p[i]);
          dp[i] = up[i] * xv[i];
        }
        detail::gate_backward_vector(heads[h], xv, p.data(), z1.data(), u.data(), dp.data(), dx,
                                     g.dw1[h], g.dw2[h]);
      }
  return g;
}

// 2 d_h^2 weights per head and gate stage, for q and k, per layer.
inline std::uint64_t param_count(std::uint64_t layers, std::uint64_t n_heads,
                                 std::uint64_t n_kv_heads, std::uint64_t d_h) {
  if (layers == 0 || n_heads == 0 || n_kv_heads == 0 || d_h == 0)
    throw RangeError("param_count: all arguments must be positive");
  return 2 * d_h * d_h * (n_heads + n_kv_heads) * layers;
}

}  // namespace psclab
