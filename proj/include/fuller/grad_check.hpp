#pragma once

#include <cstdint>

#include "fuller/finite_difference.hpp"
#include "fuller/model.hpp"
#include "fuller/rng.hpp"
#include "fuller/tape.hpp"

namespace fuller {

struct GradCheckResult {
  NetConfig config;
  GradientComparison comparison;
  bool passed() const { return comparison.failures == 0; }
};

// Draws a small random two-branch network, random inputs, labels, masks and
// task weights from `seed`, then compares backward() of
//   a * softmax_ce(det) + b * sigmoid_bce(seg)
// against central finite differences (seven-point stencil by default).
inline GradCheckResult grad_check_random_network(std::uint64_t seed, Real h = 1e-2, Real rel_tol = 1e-5,
                                                 Activation act = Activation::tanh,
                                                 FdStencil stencil = FdStencil::seven_point) {
  Rng rng(derive_seed(seed, 20));
  auto width = [&](std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); };
  NetConfig cfg;
  cfg.d_lid = width(1, 6);
  cfg.d_img = width(1, 6);
  cfg.enc_widths.assign(width(1, 2), 0);
  for (auto& w : cfg.enc_widths) w = width(1, 5);
  cfg.d_fuse = width(1, 5);
  cfg.trunk_widths.assign(width(1, 2), 0);
  for (auto& w : cfg.trunk_widths) w = width(1, 5);
  cfg.K = width(2, 4);
  cfg.G = width(1, 4);
  cfg.activation = act;
  cfg.init_seed = derive_seed(seed, 21);
  const Network net = build_network(cfg);

  const std::size_t n = width(1, 4);
  Tensor x_lid(n, cfg.d_lid), x_img(n, cfg.d_img), det_t(n, cfg.K), seg_t(n, cfg.G);
  for (Real& v : x_lid.data()) v = rng.normal();
  for (Real& v : x_img.data()) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) det_t(i, rng.index(cfg.K)) = 1.0;
  for (Real& v : seg_t.data()) v = static_cast<Real>(rng.index(2));
  std::vector<Real> det_mask(n), seg_mask(n);
  for (std::size_t i = 0; i < n; ++i) {
    det_mask[i] = static_cast<Real>(rng.index(2));
    seg_mask[i] = static_cast<Real>(rng.index(2));
  }
  det_mask[0] = seg_mask[0] = 1.0;
  const Real a = rng.uniform(0.5, 2.0), b = rng.uniform(0.5, 2.0);

  auto build = [&](const ParameterStore& params, ForwardPass& fp) {
    Var ld = fp.tape.compute_loss(LossKind::softmax_ce, fp.det_logits, det_t, det_mask);
    Var ls = fp.tape.compute_loss(LossKind::sigmoid_bce, fp.seg_logits, seg_t, seg_mask);
    (void)params;
    return fp.tape.add(fp.tape.scale(ld, a), fp.tape.scale(ls, b));
  };
  auto loss = [&](const ParameterStore& params) {
    ForwardPass fp = forward(cfg, params, x_lid, x_img);
    return fp.tape.scalar(build(params, fp));
  };

  ForwardPass fp = forward(net, x_lid, x_img);
  const Var root = build(net.params, fp);
  const GradientMap analytic = fp.tape.backward(root);
  const GradientMap numeric = finite_difference_gradient(loss, net.params, h, stencil);
  return {cfg, compare_gradients(analytic, numeric, rel_tol)};
}

}  // namespace fuller
