#pragma once

#include "fuller/fuller.hpp"

namespace fuller::testing {

inline Parameter& param(Network& net, const char* name) { return net.params[net.params.index_of(name)]; }

// Two identical tasks on two identical modalities: a K = 2 softmax whose
// class-0 row is zero equals a single-cell sigmoid, and both encoders see the
// same inputs through mirrored weights.
struct Symmetric {
  ExperimentConfig cfg;
  Network net;
  Batch batch;

  Symmetric() {
    cfg.net.d_lid = cfg.net.d_img = 3;
    cfg.net.enc_widths = {4};
    cfg.net.d_fuse = 3;
    cfg.net.trunk_widths = {3};
    cfg.net.K = 2;
    cfg.net.G = 1;
    net = build_network(cfg.net_config());
    param(net, "enc_img.0.weight").value = param(net, "enc_lid.0.weight").value;
    param(net, "enc_img.0.bias").value = param(net, "enc_lid.0.bias").value;
    param(net, "fuse.weight_img").value = param(net, "fuse.weight_lid").value;
    Tensor& dw = param(net, "det_head.weight").value;
    Tensor& db = param(net, "det_head.bias").value;
    const Tensor& sw = param(net, "seg_head.weight").value;
    for (std::size_t j = 0; j < dw.cols(); ++j) {
      dw(0, j) = 0.0;
      dw(1, j) = sw(0, j);
    }
    db(0, 0) = 0.0;
    db(0, 1) = param(net, "seg_head.bias").value(0, 0);

    const std::size_t n = 4;
    Rng rng(17);
    batch = Batch{Tensor(n, 3), Tensor(n, 3), std::vector<std::size_t>(n), Tensor(n, 2), Tensor(n, 1),
                  std::vector<Real>(n, 1.0), std::vector<Real>(n, 1.0)};
    for (Real& v : batch.x_lid.data()) v = rng.normal();
    batch.x_img = batch.x_lid;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t label = i % 2;
      batch.det_labels[i] = label;
      batch.det_targets(i, label) = 1.0;
      batch.seg_masks(i, 0) = static_cast<Real>(label);
    }
  }
};

// Plain momentum descent on L_det + L_seg, written out by hand.
inline void vanilla_step(Network& net, std::vector<Tensor>& velocity, const Batch& batch, Real lr, Real mu) {
  ForwardPass fp = forward(net, batch.x_lid, batch.x_img);
  const Var ld = fp.tape.compute_loss(LossKind::softmax_ce, fp.det_logits, batch.det_targets, batch.det_mask);
  const Var ls = fp.tape.compute_loss(LossKind::sigmoid_bce, fp.seg_logits, batch.seg_masks, batch.seg_mask);
  const GradientMap g = fp.tape.backward(fp.tape.add(ld, ls));
  for (std::size_t p = 0; p < net.params.size(); ++p) {
    for (std::size_t i = 0; i < velocity[p].size(); ++i) {
      velocity[p].data()[i] = mu * velocity[p].data()[i] + g[p].data()[i];
      net.params[p].value.data()[i] -= lr * velocity[p].data()[i];
    }
  }
}

inline Batch first_batch(const ExperimentConfig& cfg) {
  const ExperimentData d = make_experiment_data(cfg);
  std::vector<std::size_t> idx(std::min(cfg.batch_size, d.train.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch(d.train, idx, cfg.net.K);
}

}  // namespace fuller::testing
