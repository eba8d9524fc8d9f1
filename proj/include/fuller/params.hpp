#pragma once

#include <array>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fuller/errors.hpp"
#include "fuller/tensor.hpp"

namespace fuller {

// Partition of the learnable parameters. The three Fusion* tags together
// cover the first fusion layer (the intra-gradient layer); SharedLast is the
// weight of the final trunk layer.
enum class RegionTag {
  LidarBranch,
  ImageBranch,
  FusionLidarSplit,
  FusionImageSplit,
  FusionRest,
  SharedTrunk,
  SharedLast,
  HeadDet,
  HeadSeg,
};

inline constexpr std::array<RegionTag, 9> kAllRegionTags = {
    RegionTag::LidarBranch,      RegionTag::ImageBranch, RegionTag::FusionLidarSplit,
    RegionTag::FusionImageSplit, RegionTag::FusionRest,  RegionTag::SharedTrunk,
    RegionTag::SharedLast,       RegionTag::HeadDet,     RegionTag::HeadSeg,
};

inline constexpr std::string_view to_string(RegionTag tag) {
  switch (tag) {
    case RegionTag::LidarBranch: return "LidarBranch";
    case RegionTag::ImageBranch: return "ImageBranch";
    case RegionTag::FusionLidarSplit: return "FusionLidarSplit";
    case RegionTag::FusionImageSplit: return "FusionImageSplit";
    case RegionTag::FusionRest: return "FusionRest";
    case RegionTag::SharedTrunk: return "SharedTrunk";
    case RegionTag::SharedLast: return "SharedLast";
    case RegionTag::HeadDet: return "HeadDet";
    case RegionTag::HeadSeg: return "HeadSeg";
  }
  return "?";
}

inline RegionTag region_tag_from_string(std::string_view s) {
  for (RegionTag t : kAllRegionTags) {
    if (to_string(t) == s) return t;
  }
  throw UsageError("unknown region tag '" + std::string(s) + "'");
}

struct Parameter {
  std::string name;
  RegionTag tag;
  Tensor value;
};

// Ordered collection of named, region-tagged parameters. Declaration order
// is the canonical flattening order for region gradients.
class ParameterStore {
 public:
  std::size_t add(std::string name, RegionTag tag, Tensor value) {
    if (find(name)) throw UsageError("duplicate parameter name '" + name + "'");
    params_.push_back({std::move(name), tag, std::move(value)});
    return params_.size() - 1;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_.at(i); }
  const Parameter& operator[](std::size_t i) const { return params_.at(i); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }
  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::size_t index_of(std::string_view name) const {
    auto i = find(name);
    if (!i) throw UsageError("no parameter named '" + std::string(name) + "'");
    return *i;
  }

  bool has_region(RegionTag tag) const {
    for (const auto& p : params_) {
      if (p.tag == tag) return true;
    }
    return false;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  bool operator==(const ParameterStore& o) const {
    if (params_.size() != o.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& a = params_[i];
      const auto& b = o.params_[i];
      if (a.name != b.name || a.tag != b.tag || !(a.value == b.value)) return false;
    }
    return true;
  }

 private:
  std::vector<Parameter> params_;
};

// Checkpoint text format, one parameter per line after the header:
//
//   fuller-checkpoint 1 <count>
//   <name> <RegionTag> <rows> <cols> <v0> <v1> ...
//
// Values are C99 hexadecimal floats (printf "%a"), so a save/load round trip
// is bit-exact and the bytes are platform independent.
inline void write_checkpoint(std::ostream& os, const ParameterStore& store) {
  os << "fuller-checkpoint 1 " << store.size() << '\n';
  char buf[64];
  for (const auto& p : store) {
    os << p.name << ' ' << to_string(p.tag) << ' ' << p.value.rows() << ' ' << p.value.cols();
    for (Real v : p.value.data()) {
      std::snprintf(buf, sizeof buf, " %a", v);
      os << buf;
    }
    os << '\n';
  }
}

inline ParameterStore read_checkpoint(std::istream& is) {
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  if (!(is >> magic >> version >> count) || magic != "fuller-checkpoint" || version != 1) {
    throw IoError("not a fuller checkpoint (bad header)");
  }
  ParameterStore store;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name, tag;
    std::size_t rows = 0, cols = 0;
    if (!(is >> name >> tag >> rows >> cols)) throw IoError("truncated checkpoint at parameter " + std::to_string(i));
    std::vector<Real> data(rows * cols);
    for (Real& v : data) {
      std::string tok;
      if (!(is >> tok)) throw IoError("truncated values for parameter '" + name + "'");
      char* end = nullptr;
      v = std::strtod(tok.c_str(), &end);
      if (end != tok.c_str() + tok.size()) throw IoError("bad value '" + tok + "' for parameter '" + name + "'");
    }
    store.add(name, region_tag_from_string(tag), Tensor(rows, cols, std::move(data)));
  }
  return store;
}

inline void save_checkpoint(const std::string& path, const ParameterStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  write_checkpoint(os, store);
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

inline ParameterStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  try {
    return read_checkpoint(is);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

}  // namespace fuller
