#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fuller/params.hpp"
#include "fuller/tape.hpp"

namespace fuller {

enum class FdStencil { three_point, five_point, seven_point };

// Central-difference gradient of a scalar function of all parameters in
// `params`, entry by entry:
//   three_point: (f(+h) - f(-h)) / 2h
//   five_point:  (f(-2h) - 8 f(-h) + 8 f(+h) - f(+2h)) / 12h
//   seven_point: (-f(-3h) + 9 f(-2h) - 45 f(-h) + 45 f(+h) - 9 f(+2h) + f(+3h)) / 60h
template <typename F>
GradientMap finite_difference_gradient(F&& f, const ParameterStore& params, Real h = 1e-5,
                                       FdStencil stencil = FdStencil::three_point) {
  if (!(h > 0)) throw UsageError("finite_difference_gradient: step must be positive");
  ParameterStore probe = params;
  std::vector<GradientMap::Entry> entries;
  entries.reserve(probe.size());
  for (std::size_t p = 0; p < probe.size(); ++p) {
    Tensor grad(probe[p].value.rows(), probe[p].value.cols());
    for (std::size_t i = 0; i < grad.size(); ++i) {
      Real& slot = probe[p].value.data()[i];
      const Real saved = slot;
      auto at = [&](Real offset) {
        slot = saved + offset;
        return f(static_cast<const ParameterStore&>(probe));
      };
      if (stencil == FdStencil::three_point) {
        grad.data()[i] = (at(h) - at(-h)) / (2 * h);
      } else if (stencil == FdStencil::five_point) {
        grad.data()[i] = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
      } else {
        grad.data()[i] = (-at(-3 * h) + 9 * at(-2 * h) - 45 * at(-h) + 45 * at(h) - 9 * at(2 * h) + at(3 * h)) / (60 * h);
      }
      slot = saved;
    }
    entries.push_back({probe[p].name, probe[p].tag, std::move(grad)});
  }
  return GradientMap(std::move(entries), 0);
}

struct GradientComparison {
  Real max_rel_error = 0;  // over entries with magnitude >= abs_floor
  Real max_abs_error = 0;  // over entries below abs_floor
  std::size_t entries = 0;
  std::size_t failures = 0;
  std::string worst;  // "<param>[<index>]" of the worst relative entry
};

// Elementwise comparison. Entries where both values are below `abs_floor`
// in magnitude are compared absolutely against `abs_tol`; all others by
// |a - b| / max(|a|, |b|) against `rel_tol`.
inline GradientComparison compare_gradients(const GradientMap& analytic, const GradientMap& numeric,
                                            Real rel_tol = 1e-5, Real abs_floor = 1e-8, Real abs_tol = 1e-8) {
  if (analytic.size() != numeric.size()) throw ShapeError("compare_gradients: parameter count mismatch");
  GradientComparison out;
  for (std::size_t p = 0; p < analytic.size(); ++p) {
    const Tensor& a = analytic[p];
    const Tensor& b = numeric[p];
    if (!a.same_shape(b)) throw ShapeError("compare_gradients: shape mismatch at " + analytic.entries()[p].name);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Real x = a.data()[i], y = b.data()[i];
      const Real mag = std::max(std::abs(x), std::abs(y));
      const Real diff = std::abs(x - y);
      ++out.entries;
      if (mag < abs_floor) {
        out.max_abs_error = std::max(out.max_abs_error, diff);
        if (diff > abs_tol) ++out.failures;
      } else {
        const Real rel = diff / mag;
        if (rel > out.max_rel_error) {
          out.max_rel_error = rel;
          out.worst = analytic.entries()[p].name + "[" + std::to_string(i) + "]";
        }
        if (rel > rel_tol) ++out.failures;
      }
    }
  }
  return out;
}

}  // namespace fuller
