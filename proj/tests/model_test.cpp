#include <gtest/gtest.h>

#include <cmath>

#include "fuller/finite_difference.hpp"
#include "fuller/model.hpp"
#include "fuller/rng.hpp"

using namespace fuller;

namespace {

NetConfig small_config() {
  NetConfig c;
  c.d_lid = 8;
  c.d_img = 4;
  c.enc_widths = {16};
  c.d_fuse = 6;
  c.trunk_widths = {5, 4};
  c.K = 3;
  c.G = 5;
  c.init_seed = 11;
  return c;
}

Tensor random_input(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(n, d);
  for (Real& v : t.data()) v = rng.normal();
  return t;
}

GradientMap map_with(std::vector<GradientMap::Entry> entries) { return GradientMap(std::move(entries), 0); }

}  // namespace

TEST(BuildNetwork, FusionBlockShapes) {
  const Network net = build_network(small_config());
  const auto& lid = net.params[net.params.index_of("fuse.weight_lid")];
  const auto& img = net.params[net.params.index_of("fuse.weight_img")];
  EXPECT_EQ(lid.tag, RegionTag::FusionLidarSplit);
  EXPECT_EQ(img.tag, RegionTag::FusionImageSplit);
  EXPECT_EQ(lid.value.shape(), std::make_pair(std::size_t{6}, std::size_t{16}));
  EXPECT_EQ(img.value.shape(), std::make_pair(std::size_t{6}, std::size_t{16}));
}

TEST(BuildNetwork, EveryRegionIsPopulated) {
  const Network net = build_network(small_config());
  for (RegionTag t : kAllRegionTags) EXPECT_TRUE(net.params.has_region(t)) << to_string(t);
  EXPECT_EQ(net.params[net.params.index_of("trunk.1.weight")].tag, RegionTag::SharedLast);
  EXPECT_EQ(net.params[net.params.index_of("trunk.1.bias")].tag, RegionTag::SharedTrunk);
}

TEST(BuildNetwork, SeedDeterminism) {
  NetConfig c = small_config();
  EXPECT_TRUE(build_network(c).params == build_network(c).params);
  NetConfig d = c;
  d.init_seed = 12;
  EXPECT_FALSE(build_network(c).params == build_network(d).params);
}

TEST(BuildNetwork, RejectsBadConfig) {
  NetConfig c = small_config();
  c.K = 1;
  EXPECT_THROW(build_network(c), ConfigError);
  c = small_config();
  c.trunk_widths.clear();
  EXPECT_THROW(build_network(c), ConfigError);
  c = small_config();
  c.enc_widths = {4, 0};
  EXPECT_THROW(build_network(c), ConfigError);
}

TEST(Forward, OutputShapes) {
  const Network net = build_network(small_config());
  const ForwardPass fp = forward(net, random_input(2, 8, 1), random_input(2, 4, 2));
  EXPECT_EQ(fp.det().shape(), std::make_pair(std::size_t{2}, std::size_t{3}));
  EXPECT_EQ(fp.seg().shape(), std::make_pair(std::size_t{2}, std::size_t{5}));
}

TEST(Forward, RejectsWrongWidths) {
  const Network net = build_network(small_config());
  EXPECT_THROW(forward(net, random_input(2, 7, 1), random_input(2, 4, 2)), ShapeError);
  EXPECT_THROW(forward(net, random_input(2, 8, 1), random_input(3, 4, 2)), ShapeError);
}

TEST(Forward, ZeroParametersGiveUniformDetection) {
  Network net = build_network(small_config());
  for (std::size_t i = 0; i < net.params.size(); ++i) net.params[i].value.scale(0.0);
  ForwardPass fp = forward(net, random_input(4, 8, 3), random_input(4, 4, 4));
  Tensor target(4, 3);
  for (std::size_t i = 0; i < 4; ++i) target(i, i % 3) = 1.0;
  const std::vector<Real> mask(4, 1.0);
  EXPECT_NEAR(fp.tape.scalar(fp.tape.compute_loss(LossKind::softmax_ce, fp.det_logits, target, mask)), std::log(3.0),
              1e-15);
}

TEST(Forward, DeadImageBlockIgnoresImageInput) {
  Network net = build_network(small_config());
  net.params[net.params.index_of("fuse.weight_img")].value.scale(0.0);
  const Tensor x_lid = random_input(3, 8, 5);
  const ForwardPass a = forward(net, x_lid, Tensor(3, 4));
  const ForwardPass b = forward(net, x_lid, random_input(3, 4, 6));
  EXPECT_EQ(a.det(), b.det());
  EXPECT_EQ(a.seg(), b.seg());
}

TEST(FusionSplitNorms, Examples) {
  const Network net = build_network(small_config());
  ForwardPass fp = forward(net, random_input(2, 8, 1), random_input(2, 4, 2));
  const std::vector<Real> none(2, 0.0);
  const GradientMap zero = fp.tape.backward(
      fp.tape.compute_loss(LossKind::sigmoid_bce, fp.seg_logits, Tensor(2, 5), none));
  const SplitNorms z = fusion_split_norms(net, zero);
  EXPECT_EQ(z.lid, 0.0);
  EXPECT_EQ(z.img, 0.0);

  const GradientMap gm = map_with({{"a", RegionTag::FusionLidarSplit, Tensor::from_rows({{3, 4}})},
                                   {"b", RegionTag::FusionImageSplit, Tensor::from_rows({{1}})}});
  const SplitNorms n = fusion_split_norms(net, gm);
  EXPECT_EQ(n.lid, 5.0);
  EXPECT_EQ(n.img, 1.0);
}

TEST(FusionSplitNorms, DoublingLossKeepsRatio) {
  const Network net = build_network(small_config());
  ForwardPass fp = forward(net, random_input(3, 8, 1), random_input(3, 4, 2));
  Tensor target(3, 3);
  target(0, 0) = target(1, 2) = target(2, 1) = 1.0;
  const std::vector<Real> mask(3, 1.0);
  const Var l = fp.tape.compute_loss(LossKind::softmax_ce, fp.det_logits, target, mask);
  const SplitNorms a = fusion_split_norms(net, fp.tape.backward(l));
  const SplitNorms b = fusion_split_norms(net, fp.tape.backward(fp.tape.scale(l, 2.0)));
  EXPECT_EQ(b.lid, 2.0 * a.lid);
  EXPECT_EQ(b.img, 2.0 * a.img);
  EXPECT_EQ(a.lid / a.img, b.lid / b.img);
}

TEST(SharedLastGradient, DelegatesAndMatchesFiniteDifferences) {
  const NetConfig cfg = small_config();
  const Network net = build_network(cfg);
  const Tensor x_lid = random_input(3, 8, 1), x_img = random_input(3, 4, 2);
  Tensor seg_t(3, 5);
  for (std::size_t i = 0; i < seg_t.size(); ++i) seg_t.data()[i] = static_cast<Real>(i % 2);
  const std::vector<Real> mask{1, 0, 1};
  auto loss = [&](const ParameterStore& p) {
    ForwardPass fp = forward(cfg, p, x_lid, x_img);
    return fp.tape.scalar(fp.tape.compute_loss(LossKind::sigmoid_bce, fp.seg_logits, seg_t, mask));
  };
  ForwardPass fp = forward(net, x_lid, x_img);
  const GradientMap gm = fp.tape.backward(fp.tape.compute_loss(LossKind::sigmoid_bce, fp.seg_logits, seg_t, mask));
  const auto g = shared_last_gradient(net, gm);
  EXPECT_EQ(g, gm.region_gradient(RegionTag::SharedLast));
  EXPECT_EQ(g.size(), 4u * 5u);

  const GradientMap numeric = finite_difference_gradient(loss, net.params, 1e-5);
  const auto n = numeric.region_gradient(RegionTag::SharedLast);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Real mag = std::max(std::abs(g[i]), std::abs(n[i]));
    if (mag < 1e-8) {
      EXPECT_LE(std::abs(g[i] - n[i]), 1e-8);
    } else {
      EXPECT_LE(std::abs(g[i] - n[i]) / mag, 1e-5) << i;
    }
  }
}

TEST(SharedLastGradient, ZeroForFullyMaskedBatch) {
  const Network net = build_network(small_config());
  ForwardPass fp = forward(net, random_input(2, 8, 1), random_input(2, 4, 2));
  const std::vector<Real> none(2, 0.0);
  const GradientMap gm = fp.tape.backward(fp.tape.compute_loss(LossKind::softmax_ce, fp.det_logits, Tensor(2, 3), none));
  for (Real v : shared_last_gradient(net, gm)) EXPECT_EQ(v, 0.0);
}

TEST(LoadParameters, RequiresMatchingLayout) {
  Network a = build_network(small_config());
  NetConfig other = small_config();
  other.init_seed = 99;
  const Network b = build_network(other);
  load_parameters(a, b.params);
  EXPECT_TRUE(a.params == b.params);

  other.d_fuse = 7;
  const Network c = build_network(other);
  EXPECT_THROW(load_parameters(a, c.params), IoError);
}
