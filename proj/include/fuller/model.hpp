#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fuller/errors.hpp"
#include "fuller/params.hpp"
#include "fuller/rng.hpp"
#include "fuller/tape.hpp"

namespace fuller {

struct NetConfig {
  std::size_t d_lid = 64;
  std::size_t d_img = 16;
  std::vector<std::size_t> enc_widths{64};  // applied to both modality encoders
  std::size_t d_fuse = 32;
  std::vector<std::size_t> trunk_widths{32, 32};
  std::size_t K = 4;  // detection classes
  std::size_t G = 256;  // segmentation cells, a 16x16 grid
  Activation activation = Activation::tanh;
  std::uint64_t init_seed = 0;

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v < 1) throw ConfigError(std::string("net.") + what + " must be >= 1");
    };
    positive(d_lid, "d_lid");
    positive(d_img, "d_img");
    positive(d_fuse, "d_fuse");
    positive(G, "G");
    if (K < 2) throw ConfigError("net.K must be >= 2");
    if (enc_widths.empty()) throw ConfigError("net.enc_widths must have at least one layer");
    if (trunk_widths.empty()) throw ConfigError("net.trunk_widths must have at least one layer");
    for (auto w : enc_widths) positive(w, "enc_widths[i]");
    for (auto w : trunk_widths) positive(w, "trunk_widths[i]");
  }

  std::size_t enc_out() const { return enc_widths.back(); }
};

// Two-branch fusion network:
//
//   lidar -> [linear+act]* --+
//                            +-- concat -> fuse (intra-gradient layer) -> act
//   image -> [linear+act]* --+   -> fuse_out -> act -> [trunk linear+act]*
//                                -> det head (K), seg head (G)
//
// The fusion weight is stored as two column blocks, fuse.weight_lid and
// fuse.weight_img, joined on the tape with concat_columns so each block
// carries its own region tag.
struct Network {
  NetConfig config;
  ParameterStore params;
};

namespace detail {

inline void add_linear(ParameterStore& store, Rng& rng, const std::string& prefix, std::size_t in, std::size_t out,
                       RegionTag weight_tag, RegionTag bias_tag) {
  const Real bound = 1.0 / std::sqrt(static_cast<Real>(in));
  Tensor w(out, in);
  for (Real& v : w.data()) v = rng.uniform(-bound, bound);
  Tensor b(1, out);
  for (Real& v : b.data()) v = rng.uniform(-bound, bound);
  store.add(prefix + ".weight", weight_tag, std::move(w));
  store.add(prefix + ".bias", bias_tag, std::move(b));
}

}  // namespace detail

inline Network build_network(const NetConfig& cfg) {
  cfg.validate();
  Network net{cfg, {}};
  Rng rng(cfg.init_seed);
  auto& s = net.params;

  std::size_t in = cfg.d_lid;
  for (std::size_t i = 0; i < cfg.enc_widths.size(); ++i) {
    detail::add_linear(s, rng, "enc_lid." + std::to_string(i), in, cfg.enc_widths[i], RegionTag::LidarBranch,
                       RegionTag::LidarBranch);
    in = cfg.enc_widths[i];
  }
  in = cfg.d_img;
  for (std::size_t i = 0; i < cfg.enc_widths.size(); ++i) {
    detail::add_linear(s, rng, "enc_img." + std::to_string(i), in, cfg.enc_widths[i], RegionTag::ImageBranch,
                       RegionTag::ImageBranch);
    in = cfg.enc_widths[i];
  }

  const std::size_t enc = cfg.enc_out();
  const Real bound = 1.0 / std::sqrt(static_cast<Real>(2 * enc));
  Tensor w_lid(cfg.d_fuse, enc), w_img(cfg.d_fuse, enc), b_fuse(1, cfg.d_fuse);
  for (std::size_t r = 0; r < cfg.d_fuse; ++r) {
    for (std::size_t c = 0; c < enc; ++c) w_lid(r, c) = rng.uniform(-bound, bound);
    for (std::size_t c = 0; c < enc; ++c) w_img(r, c) = rng.uniform(-bound, bound);
  }
  for (Real& v : b_fuse.data()) v = rng.uniform(-bound, bound);
  s.add("fuse.weight_lid", RegionTag::FusionLidarSplit, std::move(w_lid));
  s.add("fuse.weight_img", RegionTag::FusionImageSplit, std::move(w_img));
  s.add("fuse.bias", RegionTag::FusionRest, std::move(b_fuse));

  detail::add_linear(s, rng, "fuse_out", cfg.d_fuse, cfg.d_fuse, RegionTag::SharedTrunk, RegionTag::SharedTrunk);
  in = cfg.d_fuse;
  for (std::size_t i = 0; i < cfg.trunk_widths.size(); ++i) {
    const bool last = i + 1 == cfg.trunk_widths.size();
    detail::add_linear(s, rng, "trunk." + std::to_string(i), in, cfg.trunk_widths[i],
                       last ? RegionTag::SharedLast : RegionTag::SharedTrunk, RegionTag::SharedTrunk);
    in = cfg.trunk_widths[i];
  }
  detail::add_linear(s, rng, "det_head", in, cfg.K, RegionTag::HeadDet, RegionTag::HeadDet);
  detail::add_linear(s, rng, "seg_head", in, cfg.G, RegionTag::HeadSeg, RegionTag::HeadSeg);

  for (RegionTag t : kAllRegionTags) {
    if (!s.has_region(t)) throw ConfigError("internal: region " + std::string(to_string(t)) + " left empty");
  }
  return net;
}

// Replaces the parameters of `net` with a checkpoint's, which must match
// names, tags, and shapes exactly.
inline void load_parameters(Network& net, const ParameterStore& loaded) {
  if (loaded.size() != net.params.size()) throw IoError("checkpoint parameter count does not match network");
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    const auto& a = net.params[i];
    const auto& b = loaded[i];
    if (a.name != b.name || a.tag != b.tag || !a.value.same_shape(b.value)) {
      throw IoError("checkpoint parameter '" + b.name + "' does not match network parameter '" + a.name + "'");
    }
  }
  net.params = loaded;
}

struct ForwardPass {
  Tape tape;
  Var det_logits;
  Var seg_logits;

  const Tensor& det() const { return tape.value(det_logits); }
  const Tensor& seg() const { return tape.value(seg_logits); }
};

// Forward over an explicit parameter store laid out by build_network(cfg).
inline ForwardPass forward(const NetConfig& cfg, const ParameterStore& params, const Tensor& x_lid,
                           const Tensor& x_img) {
  if (x_lid.rows() != x_img.rows()) {
    throw ShapeError("forward: batch mismatch x_lid " + x_lid.shape_string() + " vs x_img " + x_img.shape_string());
  }
  if (x_lid.cols() != cfg.d_lid || x_img.cols() != cfg.d_img) {
    throw ShapeError("forward: expected widths (" + std::to_string(cfg.d_lid) + ", " + std::to_string(cfg.d_img) +
                     "), got x_lid " + x_lid.shape_string() + ", x_img " + x_img.shape_string());
  }
  Tape tape(params);
  const Activation act = cfg.activation;
  std::size_t next = 0;
  auto dense = [&](Var x) {
    Var w = tape.parameter(next++);
    Var b = tape.parameter(next++);
    return tape.apply_linear(w, b, x);
  };

  Var h_lid = tape.constant(x_lid);
  for (std::size_t i = 0; i < cfg.enc_widths.size(); ++i) h_lid = tape.apply_activation(act, dense(h_lid));
  Var h_img = tape.constant(x_img);
  for (std::size_t i = 0; i < cfg.enc_widths.size(); ++i) h_img = tape.apply_activation(act, dense(h_img));

  Var w_lid = tape.parameter(next++);
  Var w_img = tape.parameter(next++);
  Var b_fuse = tape.parameter(next++);
  Var fused = tape.apply_linear(tape.concat_columns(w_lid, w_img), b_fuse, tape.concat_columns(h_lid, h_img));
  Var h = tape.apply_activation(act, fused);
  h = tape.apply_activation(act, dense(h));
  for (std::size_t i = 0; i < cfg.trunk_widths.size(); ++i) h = tape.apply_activation(act, dense(h));

  Var det = dense(h);
  Var seg = dense(h);
  return ForwardPass{std::move(tape), det, seg};
}

inline ForwardPass forward(const Network& net, const Tensor& x_lid, const Tensor& x_img) {
  return forward(net.config, net.params, x_lid, x_img);
}

struct SplitNorms {
  Real lid = 0;
  Real img = 0;
};

inline SplitNorms fusion_split_norms(const Network&, const GradientMap& gm) {
  return {gm.region_norm(RegionTag::FusionLidarSplit), gm.region_norm(RegionTag::FusionImageSplit)};
}

inline std::vector<Real> shared_last_gradient(const Network&, const GradientMap& gm) {
  return gm.region_gradient(RegionTag::SharedLast);
}

}  // namespace fuller
