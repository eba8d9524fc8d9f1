#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fuller/errors.hpp"
#include "fuller/rng.hpp"
#include "fuller/tensor.hpp"
#include "json.hpp"

namespace fuller {

struct SynthConfig {
  std::size_t n_samples = 4096;
  std::size_t d_lid = 64;
  std::size_t d_img = 16;
  std::size_t K = 4;
  std::size_t G = 256;
  Real rho = 0.1;  // cross-modal leakage
  Real noise_sigma = 0.1;
  std::uint64_t seed = 0;
  std::size_t latent_dim = 8;  // width of each task's latent factor

  void validate() const {
    if (n_samples < 1) throw ConfigError("data.n_samples must be >= 1");
    if (d_lid < 1 || d_img < 1 || G < 1 || latent_dim < 1) throw ConfigError("data widths must be >= 1");
    if (K < 2) throw ConfigError("data.K must be >= 2");
    if (!(rho >= 0 && rho <= 1)) throw ConfigError("data.rho must lie in [0, 1]");
    if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma)) throw ConfigError("data.noise_sigma must be >= 0");
  }
};

struct SyntheticSample {
  std::vector<Real> x_lid;
  std::vector<Real> x_img;
  std::size_t det_label = 0;
  std::vector<Real> seg_mask;  // 0/1 per cell
  std::array<std::uint8_t, 2> task_mask{1, 1};  // (det labeled, seg labeled)

  bool operator==(const SyntheticSample&) const = default;
};

using Dataset = std::vector<SyntheticSample>;

// Fixed random linear maps shared by every sample of one seed.
struct SynthStructure {
  Tensor lid_from_det;  // d_lid x latent
  Tensor lid_from_seg;
  Tensor img_from_det;  // d_img x latent
  Tensor img_from_seg;
  Tensor det_readout;  // K x latent
  Tensor seg_readout;  // G x latent
};

namespace detail {

inline Tensor gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, Real scale) {
  Tensor t(rows, cols);
  for (Real& v : t.data()) v = scale * rng.normal();
  return t;
}

// Rows orthonormalized (Gram-Schmidt) when rows <= cols, else unit-norm.
inline Tensor readout_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor r = gaussian_matrix(rng, rows, cols, 1.0);
  for (std::size_t i = 0; i < rows; ++i) {
    auto ri = r.row(i);
    if (rows <= cols) {
      for (std::size_t j = 0; j < i; ++j) {
        auto rj = r.row(j);
        const Real p = dot(ri, rj);
        for (std::size_t k = 0; k < cols; ++k) ri[k] -= p * rj[k];
      }
    }
    const Real n = l2_norm(ri);
    for (Real& v : ri) v /= n;
  }
  return r;
}

inline std::vector<Real> matvec(const Tensor& m, std::span<const Real> v) {
  std::vector<Real> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), v);
  return out;
}

}  // namespace detail

// Structure stream: derive_seed(seed, 0). Draw order: lid_from_det,
// lid_from_seg, img_from_det, img_from_seg (entries N(0, 1/latent)), then
// det_readout and seg_readout. The det readout is redrawn until every class
// frequency on 10,000 check latents (stream derive_seed(seed, 2)) lies in
// [0.5/K, 2/K].
inline SynthStructure make_structure(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, 0));
  const std::size_t L = cfg.latent_dim;
  const Real s = 1.0 / std::sqrt(static_cast<Real>(L));
  SynthStructure st;
  st.lid_from_det = detail::gaussian_matrix(rng, cfg.d_lid, L, s);
  st.lid_from_seg = detail::gaussian_matrix(rng, cfg.d_lid, L, s);
  st.img_from_det = detail::gaussian_matrix(rng, cfg.d_img, L, s);
  st.img_from_seg = detail::gaussian_matrix(rng, cfg.d_img, L, s);

  Rng check(derive_seed(cfg.seed, 2));
  std::vector<std::vector<Real>> latents(10000, std::vector<Real>(L));
  for (auto& z : latents) {
    for (Real& v : z) v = check.normal();
  }
  for (int attempt = 0;; ++attempt) {
    st.det_readout = detail::readout_matrix(rng, cfg.K, L);
    std::vector<std::size_t> hist(cfg.K, 0);
    for (const auto& z : latents) {
      const auto logits = detail::matvec(st.det_readout, z);
      std::size_t best = 0;
      for (std::size_t k = 1; k < cfg.K; ++k) {
        if (logits[k] > logits[best]) best = k;
      }
      ++hist[best];
    }
    bool ok = true;
    for (std::size_t h : hist) {
      const Real f = static_cast<Real>(h) / static_cast<Real>(latents.size());
      ok = ok && f >= 0.5 / static_cast<Real>(cfg.K) && f <= 2.0 / static_cast<Real>(cfg.K);
    }
    if (ok) break;
    if (attempt == 63) throw ConfigError("could not draw a non-degenerate detection readout");
  }
  st.seg_readout = detail::gaussian_matrix(rng, cfg.G, L, 1.0);
  return st;
}

// Sample stream: derive_seed(seed, 1). Per sample, in order: z_det (latent),
// z_seg (latent), lidar noise (d_lid), image noise (d_img), all N(0,1).
//   x_lid = (1-rho) A_ld z_det + rho A_ls z_seg + sigma e_lid
//   x_img = (1-rho) A_is z_seg + rho A_id z_det + sigma e_img
//   det_label = argmax(R_det z_det), seg_mask = [R_seg z_seg > 0]
// generate_dataset(cfg) with n samples is a prefix of the same cfg with more.
inline Dataset generate_dataset(const SynthConfig& cfg, const SynthStructure& st) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, 1));
  const std::size_t L = cfg.latent_dim;
  Dataset out;
  out.reserve(cfg.n_samples);
  std::vector<Real> z_det(L), z_seg(L);
  for (std::size_t n = 0; n < cfg.n_samples; ++n) {
    for (Real& v : z_det) v = rng.normal();
    for (Real& v : z_seg) v = rng.normal();
    SyntheticSample s;
    const auto ld = detail::matvec(st.lid_from_det, z_det);
    const auto ls = detail::matvec(st.lid_from_seg, z_seg);
    const auto id = detail::matvec(st.img_from_det, z_det);
    const auto is = detail::matvec(st.img_from_seg, z_seg);
    s.x_lid.resize(cfg.d_lid);
    s.x_img.resize(cfg.d_img);
    for (std::size_t i = 0; i < cfg.d_lid; ++i) {
      s.x_lid[i] = (1 - cfg.rho) * ld[i] + cfg.rho * ls[i] + cfg.noise_sigma * rng.normal();
    }
    for (std::size_t i = 0; i < cfg.d_img; ++i) {
      s.x_img[i] = (1 - cfg.rho) * is[i] + cfg.rho * id[i] + cfg.noise_sigma * rng.normal();
    }
    const auto logits = detail::matvec(st.det_readout, z_det);
    for (std::size_t k = 1; k < cfg.K; ++k) {
      if (logits[k] > logits[s.det_label]) s.det_label = k;
    }
    const auto cells = detail::matvec(st.seg_readout, z_seg);
    s.seg_mask.resize(cfg.G);
    for (std::size_t g = 0; g < cfg.G; ++g) s.seg_mask[g] = cells[g] > 0 ? 1.0 : 0.0;
    out.push_back(std::move(s));
  }
  return out;
}

inline Dataset generate_dataset(const SynthConfig& cfg) { return generate_dataset(cfg, make_structure(cfg)); }

enum class SplitScheme { full, disjoint_normal, disjoint_balance };
enum class DropModality { none, lidar, image };

inline std::string_view to_string(SplitScheme s) {
  switch (s) {
    case SplitScheme::full: return "full";
    case SplitScheme::disjoint_normal: return "disjoint-normal";
    case SplitScheme::disjoint_balance: return "disjoint-balance";
  }
  return "?";
}

inline SplitScheme split_scheme_from_string(std::string_view s) {
  if (s == "full") return SplitScheme::full;
  if (s == "disjoint-normal" || s == "disjoint_normal") return SplitScheme::disjoint_normal;
  if (s == "disjoint-balance" || s == "disjoint_balance") return SplitScheme::disjoint_balance;
  throw ConfigError("unknown split scheme '" + std::string(s) + "'");
}

inline std::string_view to_string(DropModality d) {
  switch (d) {
    case DropModality::none: return "none";
    case DropModality::lidar: return "lidar";
    case DropModality::image: return "image";
  }
  return "?";
}

inline DropModality drop_from_string(std::string_view s) {
  if (s == "none") return DropModality::none;
  if (s == "lidar") return DropModality::lidar;
  if (s == "image") return DropModality::image;
  throw ConfigError("unknown drop modality '" + std::string(s) + "'");
}

// Sets task masks only. Disjoint schemes label each sample for exactly one
// task: det-only for the first ceil(n*3/4) (normal) or ceil(n/2) (balance)
// entries of a seeded permutation, seg-only for the rest.
inline Dataset apply_split(Dataset data, SplitScheme scheme, std::uint64_t seed) {
  const std::size_t n = data.size();
  if (scheme == SplitScheme::full) {
    for (auto& s : data) s.task_mask = {1, 1};
    return data;
  }
  const std::size_t n_det = scheme == SplitScheme::disjoint_normal ? (3 * n + 3) / 4 : (n + 1) / 2;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 3));
  rng.shuffle(order);
  for (std::size_t i = 0; i < n; ++i) {
    data[order[i]].task_mask = i < n_det ? std::array<std::uint8_t, 2>{1, 0} : std::array<std::uint8_t, 2>{0, 1};
  }
  return data;
}

struct Batch {
  Tensor x_lid;
  Tensor x_img;
  std::vector<std::size_t> det_labels;
  Tensor det_targets;  // one-hot
  Tensor seg_masks;
  std::vector<Real> det_mask;
  std::vector<Real> seg_mask;

  std::size_t size() const noexcept { return det_labels.size(); }
  bool operator==(const Batch&) const = default;
};

inline Batch make_batch(const Dataset& data, std::span<const std::size_t> indices, std::size_t K) {
  if (indices.empty() || data.empty()) throw UsageError("make_batch: empty batch");
  const std::size_t dl = data[0].x_lid.size(), di = data[0].x_img.size(), g = data[0].seg_mask.size();
  const std::size_t n = indices.size();
  Batch b{Tensor(n, dl), Tensor(n, di), std::vector<std::size_t>(n), Tensor(n, K), Tensor(n, g),
          std::vector<Real>(n), std::vector<Real>(n)};
  for (std::size_t r = 0; r < n; ++r) {
    const auto& s = data.at(indices[r]);
    std::copy(s.x_lid.begin(), s.x_lid.end(), b.x_lid.row(r).begin());
    std::copy(s.x_img.begin(), s.x_img.end(), b.x_img.row(r).begin());
    std::copy(s.seg_mask.begin(), s.seg_mask.end(), b.seg_masks.row(r).begin());
    if (s.det_label >= K) throw ShapeError("make_batch: label " + std::to_string(s.det_label) + " >= K");
    b.det_labels[r] = s.det_label;
    b.det_targets(r, s.det_label) = 1.0;
    b.det_mask[r] = s.task_mask[0];
    b.seg_mask[r] = s.task_mask[1];
  }
  return b;
}

inline Batch make_batch(const Dataset& data, std::size_t K) {
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_batch(data, all, K);
}

// Zero-fills the selected modality's inputs; labels and masks untouched.
inline Batch drop_modality(Batch batch, DropModality which) {
  if (which == DropModality::lidar) batch.x_lid = Tensor(batch.x_lid.rows(), batch.x_lid.cols());
  if (which == DropModality::image) batch.x_img = Tensor(batch.x_img.rows(), batch.x_img.cols());
  return batch;
}

// One JSON object per line:
//   {"x_lid":[...],"x_img":[...],"det_label":k,"seg_mask":[0,1,...],"task_mask":[1,1]}
// Reals are written in shortest round-trip form.
inline nlohmann::json sample_to_json(const SyntheticSample& s) {
  std::vector<int> seg(s.seg_mask.size());
  for (std::size_t i = 0; i < seg.size(); ++i) seg[i] = s.seg_mask[i] != 0.0;
  return {{"x_lid", s.x_lid},
          {"x_img", s.x_img},
          {"det_label", s.det_label},
          {"seg_mask", seg},
          {"task_mask", {s.task_mask[0], s.task_mask[1]}}};
}

inline SyntheticSample sample_from_json(const nlohmann::json& j) {
  SyntheticSample s;
  s.x_lid = j.at("x_lid").get<std::vector<Real>>();
  s.x_img = j.at("x_img").get<std::vector<Real>>();
  s.det_label = j.at("det_label").get<std::size_t>();
  for (int v : j.at("seg_mask").get<std::vector<int>>()) s.seg_mask.push_back(v);
  const auto tm = j.at("task_mask").get<std::vector<int>>();
  if (tm.size() != 2) throw IoError("task_mask must have two entries");
  s.task_mask = {static_cast<std::uint8_t>(tm[0]), static_cast<std::uint8_t>(tm[1])};
  return s;
}

inline void write_dataset_jsonl(std::ostream& os, const Dataset& data) {
  for (const auto& s : data) os << sample_to_json(s).dump() << '\n';
}

inline Dataset read_dataset_jsonl(std::istream& is) {
  Dataset out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) out.push_back(sample_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace fuller
