#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "psclab/numerics.hpp"
#include "psclab/rope.hpp"
#include "psclab/tensor.hpp"

namespace psclab {

// Optimal vs actual frequency sets for one head at position m; the
// correction between them is the block-diagonal rotation by
// m * (theta_star - theta_hat) per pair.
struct PhaseShiftSpec {
  Tensor theta_star;  // [d/2]
  Tensor theta_hat;   // [d/2]
  std::size_t m = 0;
  PairLayout layout = PairLayout::HalfBlocks;

  std::size_t dim() const { return 2 * theta_star.size(); }

  void validate() const {
    if (theta_star.ndim() != 1 || !theta_star.same_shape(theta_hat))
      throw ShapeError("phase shift spec: frequency vectors must be 1-D and equal length");
    if (theta_star.size() == 0) throw ShapeError("phase shift spec: empty frequency vectors");
    for (std::size_t i = 0; i < theta_star.size(); ++i)
      if (!(theta_star[i] > 0.0) || !(theta_hat[i] > 0.0))
        throw RangeError("phase shift spec: frequencies must be positive");
  }
};

// R~(Theta* - Theta^, m): block-diagonal, each block rotates by
// m * (theta*_i - theta^_i).
inline Tensor build_shift_matrix(const PhaseShiftSpec& spec) {
  spec.validate();
  Tensor delta({spec.theta_star.size()});
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = spec.theta_star[i] - spec.theta_hat[i];
  // rotation_matrix scales by m; reuse it on the signed deltas.
  Tensor r = Tensor::identity(spec.dim());
  for (std::size_t p = 0; p < delta.size(); ++p) {
    const auto [a, b] = pair_indices(spec.layout, p, spec.dim());
    const double ang = static_cast<double>(spec.m) * delta[p];
    r.at(a, a) = std::cos(ang);
    r.at(a, b) = -std::sin(ang);
    r.at(b, a) = std::sin(ang);
    r.at(b, b) = std::cos(ang);
  }
  return r;
}

// max |R~(Theta*-Theta^,m) . R(Theta^,m) - R(Theta*,m)|, both sides
// built independently. Contract: <= 1e-10.
inline double verify_composition(const PhaseShiftSpec& spec) {
  spec.validate();
  const Tensor shift = build_shift_matrix(spec);
  const Tensor actual = rotation_matrix(spec.theta_hat, spec.m, spec.layout);
  const Tensor ideal = rotation_matrix(spec.theta_star, spec.m, spec.layout);
  const Tensor composed = matmul(shift, actual);
  double err = 0.0;
  for (std::size_t i = 0; i < composed.size(); ++i)
    err = std::max(err, std::abs(composed[i] - ideal[i]));
  return err;
}

// rank(R~ - I) by pivoted elimination. Theory: twice the number of
// pairs whose shift angle is not a multiple of 2*pi; asserted in tests
// against expected_shift_rank.
inline int shift_rank(const PhaseShiftSpec& spec, double rel_tol = 1e-8) {
  const Tensor shift = build_shift_matrix(spec);
  Tensor diff = shift;
  for (std::size_t i = 0; i < spec.dim(); ++i) diff.at(i, i) -= 1.0;
  return matrix_rank(diff, rel_tol);
}

// Counting oracle for shift_rank. Angle tolerance 1e-9 rad around
// multiples of 2*pi.
inline int expected_shift_rank(const PhaseShiftSpec& spec, double angle_tol = 1e-9) {
  spec.validate();
  constexpr double two_pi = 2.0 * 3.14159265358979323846;
  int shifted = 0;
  for (std::size_t i = 0; i < spec.theta_star.size(); ++i) {
    const double ang = static_cast<double>(spec.m) * (spec.theta_star[i] - spec.theta_hat[i]);
    const double wrapped = std::abs(std::remainder(ang, two_pi));
    if (wrapped > angle_tol) ++shifted;
  }
  return 2 * shifted;
}

// Per-pair phase/norm statistics of an embedding matrix, each pair
// read as a complex number.
struct PhaseNormStats {
  std::vector<double> phases;  // atan2(y, x), in (-pi, pi]
  std::vector<double> norms;   // hypot(x, y)
  std::vector<std::size_t> phase_hist;
  std::vector<std::size_t> norm_hist;
  double phase_mean = 0.0, phase_stddev = 0.0;
  double norm_mean = 0.0, norm_stddev = 0.0;
  double norm_min = 0.0, norm_max = 0.0;
  std::size_t bins = 0;
};

inline PhaseNormStats phase_norm_distribution(const Tensor& embeddings, PairLayout layout,
                                              std::size_t bins = 64) {
  if (embeddings.ndim() != 2 || embeddings.cols() % 2 != 0)
    throw ShapeError("phase_norm_distribution expects [tokens x even d]");
  embeddings.require_finite("phase_norm_distribution input");
  const std::size_t tokens = embeddings.rows(), d = embeddings.cols();
  PhaseNormStats st;
  st.bins = bins;
  st.phases.reserve(tokens * d / 2);
  st.norms.reserve(tokens * d / 2);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t p = 0; p < d / 2; ++p) {
      const auto [a, b] = pair_indices(layout, p, d);
      const double x = embeddings.at(t, a), y = embeddings.at(t, b);
      st.phases.push_back(std::atan2(y, x));
      st.norms.push_back(std::hypot(x, y));
    }

  auto moments = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    sd = 0.0;
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(v.size()));
  };
  moments(st.phases, st.phase_mean, st.phase_stddev);
  moments(st.norms, st.norm_mean, st.norm_stddev);
  st.norm_min = *std::min_element(st.norms.begin(), st.norms.end());
  st.norm_max = *std::max_element(st.norms.begin(), st.norms.end());

  auto histogram = [bins](const std::vector<double>& v, double lo, double hi) {
    std::vector<std::size_t> h(bins, 0);
    const double span = (hi > lo) ? hi - lo : 1.0;
    for (double x : v) {
      auto idx = static_cast<std::size_t>((x - lo) / span * static_cast<double>(bins));
      h[std::min(idx, bins - 1)]++;
    }
    return h;
  };
  constexpr double pi = 3.14159265358979323846;
  st.phase_hist = histogram(st.phases, -pi, pi);
  st.norm_hist = histogram(st.norms, st.norm_min, st.norm_max);
  return st;
}

}  // namespace psclab
