#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fuller/errors.hpp"
#include "fuller/tape.hpp"
#include "fuller/tensor.hpp"

namespace fuller {

inline constexpr Real kInf = std::numeric_limits<Real>::infinity();

// Per-task loss weights; normalized to sum to the task count.
struct TaskWeights {
  std::vector<Real> values;

  static TaskWeights uniform(std::size_t tasks) { return {std::vector<Real>(tasks, 1.0)}; }

  std::size_t size() const noexcept { return values.size(); }
  Real operator[](std::size_t i) const { return values.at(i); }
  Real sum() const {
    Real s = 0;
    for (Real v : values) s += v;
    return s;
  }
};

// ||g_det|| / ||g_seg||, +inf when the denominator vanishes.
inline Real gamma_task(std::span<const Real> g_det, std::span<const Real> g_seg) {
  if (g_det.size() != g_seg.size()) {
    throw ShapeError("gamma_task: lengths " + std::to_string(g_det.size()) + " and " + std::to_string(g_seg.size()));
  }
  const Real den = l2_norm(g_seg);
  if (den == 0) return kInf;
  return l2_norm(g_det) / den;
}

inline Real gamma_modal(Real norm_lid, Real norm_img) {
  if (norm_img == 0) return kInf;
  return norm_lid / norm_img;
}

namespace detail {

// Solves A x = b in place by Gaussian elimination with partial pivoting.
// Returns false when a pivot is negligible relative to the matrix scale.
inline bool solve_linear(std::vector<std::vector<Real>>& a, std::vector<Real>& b) {
  const std::size_t n = b.size();
  Real scale = 0;
  for (const auto& row : a) {
    for (Real v : row) scale = std::max(scale, std::abs(v));
  }
  if (scale == 0) return false;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    }
    if (std::abs(a[piv][col]) <= 1e-13 * scale) return false;
    std::swap(a[piv], a[col]);
    std::swap(b[piv], b[col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const Real f = a[r][col] / a[col][col];
      for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  for (std::size_t i = n; i-- > 0;) {
    Real s = b[i];
    for (std::size_t c = i + 1; c < n; ++c) s -= a[i][c] * b[c];
    b[i] = s / a[i][i];
  }
  return true;
}

}  // namespace detail

// Equal-projection task weighting. Finds weights alpha (sum = T) such that
// g_agg = sum_i alpha_i g_i satisfies g_agg . u_i = const for the unit
// directions u_i = g_i / ||g_i||.
//
// For two tasks the condition reduces to alpha_1 ||g_1|| = alpha_2 ||g_2||.
// For T > 2, with alpha = T * (1 - sum(beta), beta_2..beta_T), the unknowns
// beta solve
//
//   sum_i beta_i (g_i - g_1) . (u_1 - u_j) = -g_1 . (u_1 - u_j),  j = 2..T.
//
// Weights are not clamped; for T > 2 strongly conflicting gradients can
// produce a negative weight.
inline TaskWeights imtl_weights(std::span<const std::vector<Real>> grads) {
  const std::size_t T = grads.size();
  if (T < 2) throw UsageError("imtl_weights: need at least two task gradients");
  std::vector<Real> norms(T);
  for (std::size_t i = 0; i < T; ++i) {
    if (grads[i].size() != grads[0].size()) throw ShapeError("imtl_weights: gradient lengths differ");
    norms[i] = l2_norm(grads[i]);
    if (norms[i] == 0) throw DegenerateInputError("imtl_weights: task " + std::to_string(i) + " has a zero gradient");
  }

  bool all_parallel = true;
  for (std::size_t i = 0; i < T && all_parallel; ++i) {
    for (std::size_t j = i + 1; j < T && all_parallel; ++j) {
      const Real c = dot(grads[i], grads[j]) / (norms[i] * norms[j]);
      all_parallel = std::abs(c) > 1.0 - 1e-12;
    }
  }
  if (all_parallel) return TaskWeights::uniform(T);

  const Real t = static_cast<Real>(T);
  if (T == 2) {
    const Real s = norms[0] + norms[1];
    return {{t * norms[1] / s, t * norms[0] / s}};
  }

  const std::size_t dim = grads[0].size();
  std::vector<std::vector<Real>> units(T, std::vector<Real>(dim));
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t k = 0; k < dim; ++k) units[i][k] = grads[i][k] / norms[i];
  }
  const std::size_t n = T - 1;
  std::vector<std::vector<Real>> a(n, std::vector<Real>(n));
  std::vector<Real> b(n);
  std::vector<Real> du(dim), dg(dim);
  for (std::size_t j = 1; j < T; ++j) {
    for (std::size_t k = 0; k < dim; ++k) du[k] = units[0][k] - units[j][k];
    b[j - 1] = -dot(grads[0], du);
    for (std::size_t i = 1; i < T; ++i) {
      for (std::size_t k = 0; k < dim; ++k) dg[k] = grads[i][k] - grads[0][k];
      a[j - 1][i - 1] = dot(dg, du);
    }
  }
  if (!detail::solve_linear(a, b)) return TaskWeights::uniform(T);

  TaskWeights w{std::vector<Real>(T)};
  Real rest = 1.0;
  for (std::size_t i = 1; i < T; ++i) {
    w.values[i] = t * b[i - 1];
    rest -= b[i - 1];
  }
  w.values[0] = t * rest;
  for (Real v : w.values) {
    if (!std::isfinite(v)) return TaskWeights::uniform(T);
  }
  return w;
}

inline TaskWeights imtl_weights(const std::vector<Real>& g1, const std::vector<Real>& g2) {
  const std::vector<Real> both[] = {g1, g2};
  return imtl_weights(std::span<const std::vector<Real>>(both));
}

inline std::vector<Real> aggregate_gradient(std::span<const std::vector<Real>> grads, const TaskWeights& w) {
  std::vector<Real> agg(grads.empty() ? 0 : grads[0].size(), 0.0);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (std::size_t k = 0; k < agg.size(); ++k) agg[k] += w[i] * grads[i][k];
  }
  return agg;
}

// Simplified norm-balancing baseline: w_i = geomean(norms) / norm_i, then
// rescaled to sum to T. Any zero norm falls back to uniform weights.
inline TaskWeights gradnorm_like_weights(std::span<const Real> task_grad_norms) {
  const std::size_t T = task_grad_norms.size();
  if (T == 0) throw UsageError("gradnorm_like_weights: no tasks");
  Real log_sum = 0;
  for (Real n : task_grad_norms) {
    if (!(n > 0) || !std::isfinite(n)) return TaskWeights::uniform(T);
    log_sum += std::log(n);
  }
  const Real gmean = std::exp(log_sum / static_cast<Real>(T));
  TaskWeights w{std::vector<Real>(T)};
  Real sum = 0;
  for (std::size_t i = 0; i < T; ++i) {
    w.values[i] = gmean / task_grad_norms[i];
    sum += w.values[i];
  }
  for (Real& v : w.values) v *= static_cast<Real>(T) / sum;
  return w;
}

struct GateValue {
  Real value = 1.0;
  bool zero_denominator = false;
};

// Composition function for the modality gates:
//   1                        if x / y <= 1
//   1 - tanh(alpha * x / y)  otherwise.
// y == 0 counts as the "<= 1" branch and is flagged. The second branch is
// evaluated as 2 / (exp(2z) + 1), which equals 1 - tanh(z) but keeps the gate
// strictly positive for large ratios.
inline GateValue sigma_checked(Real x, Real y, Real alpha_gate) {
  if (y == 0) return {1.0, true};
  const Real ratio = x / y;
  if (ratio <= 1.0) return {1.0, false};
  const Real g = 2.0 / (std::exp(2.0 * alpha_gate * ratio) + 1.0);
  return {std::max(g, std::numeric_limits<Real>::min()), false};
}

inline Real sigma(Real x, Real y, Real alpha_gate) { return sigma_checked(x, y, alpha_gate).value; }

// Momentum-smoothed modality gates.
struct IntraCalibState {
  Real w_lid = 1.0;
  Real w_img = 1.0;
  Real alpha_gate = 0.1;
  Real m = 0.2;
  std::size_t t = 0;
  // Raw gates of the last update, before smoothing.
  Real raw_lid = 1.0;
  Real raw_img = 1.0;
  bool zero_norm = false;  // last update saw a zero fusion-split norm

  static IntraCalibState initial(Real alpha_gate = 0.1, Real m = 0.2) {
    IntraCalibState s;
    s.alpha_gate = alpha_gate;
    s.m = m;
    return s;
  }
};

inline IntraCalibState update_gates(IntraCalibState state, Real norm_lid, Real norm_img) {
  if (norm_lid < 0 || norm_img < 0) throw UsageError("update_gates: norms must be non-negative");
  const GateValue lid = sigma_checked(norm_lid, norm_img, state.alpha_gate);
  const GateValue img = sigma_checked(norm_img, norm_lid, state.alpha_gate);
  state.raw_lid = lid.value;
  state.raw_img = img.value;
  state.zero_norm = lid.zero_denominator || img.zero_denominator;
  state.w_lid = state.m * state.w_lid + (1.0 - state.m) * lid.value;
  state.w_img = state.m * state.w_img + (1.0 - state.m) * img.value;
  ++state.t;
  return state;
}

// Scales the modality branch (encoder) gradients by their gates. The fusion
// layer, trunk, and heads are left untouched.
inline GradientMap apply_gates(GradientMap gm, const IntraCalibState& state) {
  gm.scale_region(RegionTag::LidarBranch, state.w_lid);
  gm.scale_region(RegionTag::ImageBranch, state.w_img);
  return gm;
}

}  // namespace fuller
