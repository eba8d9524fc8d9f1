#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fuller/errors.hpp"
#include "fuller/params.hpp"
#include "fuller/tensor.hpp"

namespace fuller {

enum class Activation { relu, tanh };
enum class LossKind { mse, softmax_ce, sigmoid_bce };

inline std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation activation_from_string(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

// Handle to a node on a specific tape.
struct Var {
  std::uint64_t tape = 0;
  std::uint32_t index = 0;
};

// Per-parameter gradients produced by one backward pass from one scalar root.
class GradientMap {
 public:
  struct Entry {
    std::string name;
    RegionTag tag;
    Tensor grad;
  };

  GradientMap() = default;
  GradientMap(std::vector<Entry> entries, std::uint32_t root) : entries_(std::move(entries)), root_(root) {}

  std::span<const Entry> entries() const noexcept { return entries_; }
  std::span<Entry> entries() noexcept { return entries_; }
  std::uint32_t root() const noexcept { return root_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const Tensor& operator[](std::size_t i) const { return entries_.at(i).grad; }

  bool has_region(RegionTag tag) const {
    return std::any_of(entries_.begin(), entries_.end(), [tag](const Entry& e) { return e.tag == tag; });
  }

  // Flattened copy of every entry tagged `tag`: parameters in declaration
  // order, each row-major.
  std::vector<Real> region_gradient(RegionTag tag) const {
    require_region(tag);
    std::vector<Real> out;
    for (const auto& e : entries_) {
      if (e.tag == tag) out.insert(out.end(), e.grad.data().begin(), e.grad.data().end());
    }
    return out;
  }

  Real region_norm(RegionTag tag) const {
    require_region(tag);
    Real s = 0;
    for (const auto& e : entries_) {
      if (e.tag != tag) continue;
      for (Real v : e.grad.data()) s += v * v;
    }
    return std::sqrt(s);
  }

  void scale_region(RegionTag tag, Real factor) {
    if (!std::isfinite(factor)) throw UsageError("non-finite gradient scale factor");
    require_region(tag);
    for (auto& e : entries_) {
      if (e.tag == tag) e.grad.scale(factor);
    }
  }

  bool operator==(const GradientMap& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].tag != o.entries_[i].tag || !(entries_[i].grad == o.entries_[i].grad)) return false;
    }
    return true;
  }

 private:
  void require_region(RegionTag tag) const {
    if (!has_region(tag)) throw UsageError("gradient map has no region " + std::string(to_string(tag)));
  }

  std::vector<Entry> entries_;
  std::uint32_t root_ = 0;
};

inline std::vector<Real> region_gradient(const GradientMap& gm, RegionTag tag) { return gm.region_gradient(tag); }

inline GradientMap scale_region_gradients(GradientMap gm, RegionTag tag, Real factor) {
  gm.scale_region(tag, factor);
  return gm;
}

// Append-only record of a forward computation. Every node caches its forward
// value; parents always precede their children. backward() may be called any
// number of times with different roots; each call starts from fresh adjoints.
class Tape {
 public:
  explicit Tape(const ParameterStore& store) : store_(&store), id_(next_id()) {}

  Var constant(Tensor value) {
    value.require_finite("constant input");
    Node n;
    n.kind = Kind::constant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var parameter(std::size_t index) {
    Node n;
    n.kind = Kind::parameter;
    n.param = index;
    n.value = (*store_)[index].value;
    n.needs_grad = true;
    return push(std::move(n));
  }

  Var parameter(std::string_view name) { return parameter(store_->index_of(name)); }

  // x W^T + b, one sample per row of x.
  Var apply_linear(Var w, Var b, Var x) {
    const Tensor& W = value(w);
    const Tensor& B = value(b);
    const Tensor& X = value(x);
    if (X.cols() != W.cols() || B.rows() != 1 || B.cols() != W.rows()) {
      throw ShapeError("apply_linear: W " + W.shape_string() + ", b " + B.shape_string() + ", x " + X.shape_string());
    }
    const std::size_t n = X.rows(), in = X.cols(), out = W.rows();
    Tensor y(n, out);
    for (std::size_t i = 0; i < n; ++i) {
      const Real* xr = X.row(i).data();
      for (std::size_t j = 0; j < out; ++j) {
        const Real* wr = W.row(j).data();
        Real acc = 0;
        for (std::size_t k = 0; k < in; ++k) acc += xr[k] * wr[k];
        y(i, j) = acc + B(0, j);
      }
    }
    return push_op(Kind::linear, {w, b, x}, std::move(y), "apply_linear");
  }

  Var concat_columns(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rows() != B.rows()) {
      throw ShapeError("concat_columns: row mismatch " + A.shape_string() + " vs " + B.shape_string());
    }
    Tensor y(A.rows(), A.cols() + B.cols());
    for (std::size_t i = 0; i < A.rows(); ++i) {
      std::copy(A.row(i).begin(), A.row(i).end(), y.row(i).begin());
      std::copy(B.row(i).begin(), B.row(i).end(), y.row(i).begin() + static_cast<std::ptrdiff_t>(A.cols()));
    }
    return push_op(Kind::concat, {a, b}, std::move(y), "concat_columns");
  }

  Var apply_activation(Activation kind, Var x) {
    Tensor y = value(x);
    if (kind == Activation::relu) {
      for (Real& v : y.data()) v = v > 0 ? v : 0.0;
    } else {
      for (Real& v : y.data()) v = std::tanh(v);
    }
    return push_op(kind == Activation::relu ? Kind::relu : Kind::tanh, {x}, std::move(y), "apply_activation");
  }

  Var add(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B)) throw ShapeError("add: " + A.shape_string() + " vs " + B.shape_string());
    Tensor y = A;
    for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] += B.data()[i];
    return push_op(Kind::add, {a, b}, std::move(y), "add");
  }

  // Elementwise product.
  Var mul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B)) throw ShapeError("mul: " + A.shape_string() + " vs " + B.shape_string());
    Tensor y = A;
    for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] *= B.data()[i];
    return push_op(Kind::mul, {a, b}, std::move(y), "mul");
  }

  Var scale(Var x, Real factor) {
    if (!std::isfinite(factor)) throw UsageError("scale: non-finite factor");
    Tensor y = value(x);
    y.scale(factor);
    Var v = push_op(Kind::scale, {x}, std::move(y), "scale");
    nodes_[v.index].factor = factor;
    return v;
  }

  // Mean per-sample loss over rows whose mask entry is nonzero. mse and
  // sigmoid_bce average over columns within a sample; softmax_ce expects a
  // one-hot (or probability) target row. An all-zero mask yields exactly 0.
  Var compute_loss(LossKind kind, Var pred, const Tensor& target, std::span<const Real> mask) {
    const Tensor& P = value(pred);
    if (!P.same_shape(target)) {
      throw ShapeError("compute_loss: pred " + P.shape_string() + " vs target " + target.shape_string());
    }
    if (mask.size() != P.rows()) {
      throw ShapeError("compute_loss: mask length " + std::to_string(mask.size()) + " vs batch " +
                       std::to_string(P.rows()));
    }
    Real active = 0;
    for (Real m : mask) {
      if (!(m == 0.0 || m == 1.0)) throw UsageError("compute_loss: mask entries must be 0 or 1");
      active += m;
    }
    target.require_finite("loss target");

    const std::size_t n = P.rows(), c = P.cols();
    // aux holds dLoss/dPred, already divided by the active count.
    Tensor grad(n, c);
    Real total = 0;
    if (active > 0) {
      for (std::size_t i = 0; i < n; ++i) {
        if (mask[i] == 0.0) continue;
        auto p = P.row(i);
        auto t = target.row(i);
        auto g = grad.row(i);
        Real li = 0;
        switch (kind) {
          case LossKind::mse:
            for (std::size_t j = 0; j < c; ++j) {
              const Real d = p[j] - t[j];
              li += d * d;
              g[j] = 2.0 * d / static_cast<Real>(c);
            }
            li /= static_cast<Real>(c);
            break;
          case LossKind::softmax_ce: {
            const Real mx = *std::max_element(p.begin(), p.end());
            Real z = 0;
            for (std::size_t j = 0; j < c; ++j) z += std::exp(p[j] - mx);
            const Real log_z = std::log(z) + mx;
            Real tsum = 0;
            for (std::size_t j = 0; j < c; ++j) {
              li -= t[j] * (p[j] - log_z);
              tsum += t[j];
            }
            for (std::size_t j = 0; j < c; ++j) g[j] = std::exp(p[j] - log_z) * tsum - t[j];
            break;
          }
          case LossKind::sigmoid_bce:
            for (std::size_t j = 0; j < c; ++j) {
              const Real x = p[j];
              li += std::max(x, 0.0) - x * t[j] + std::log1p(std::exp(-std::abs(x)));
              const Real s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
              g[j] = (s - t[j]) / static_cast<Real>(c);
            }
            li /= static_cast<Real>(c);
            break;
        }
        total += li;
        for (Real& v : g) v /= active;
      }
      total /= active;
    }
    Var v = push_op(Kind::loss, {pred}, Tensor(1, 1, {total}), "compute_loss");
    nodes_[v.index].aux = std::move(grad);
    return v;
  }

  const Tensor& value(Var v) const { return node(v).value; }
  Real scalar(Var v) const { return node(v).value.item(); }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::uint64_t id() const noexcept { return id_; }
  const ParameterStore& store() const noexcept { return *store_; }

  // Exact reverse-mode gradients of the scalar `root` with respect to every
  // parameter of the store. Parameters the root does not depend on get zeros.
  GradientMap backward(Var root) const {
    const Node& r = node(root);
    if (r.value.rows() != 1 || r.value.cols() != 1) {
      throw UsageError("backward: root must be a scalar, got " + r.value.shape_string());
    }
    std::vector<Tensor> adj(root.index + 1);
    adj[root.index] = Tensor(1, 1, {1.0});

    std::vector<GradientMap::Entry> entries;
    entries.reserve(store_->size());
    for (const auto& p : *store_) entries.push_back({p.name, p.tag, Tensor(p.value.rows(), p.value.cols())});

    for (std::size_t idx = root.index + 1; idx-- > 0;) {
      const Node& n = nodes_[idx];
      if (!n.needs_grad || adj[idx].empty()) continue;
      const Tensor& g = adj[idx];
      switch (n.kind) {
        case Kind::constant:
          break;
        case Kind::parameter: {
          Tensor& dst = entries[n.param].grad;
          for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += g.data()[i];
          break;
        }
        case Kind::linear: {
          const Tensor& W = nodes_[n.parents[0]].value;
          const Tensor& X = nodes_[n.parents[2]].value;
          const std::size_t rows = X.rows(), in = X.cols(), out = W.rows();
          if (nodes_[n.parents[0]].needs_grad) {
            Tensor& dW = grad_slot(adj, n.parents[0]);
            for (std::size_t i = 0; i < rows; ++i) {
              const Real* xr = X.row(i).data();
              for (std::size_t j = 0; j < out; ++j) {
                const Real gij = g(i, j);
                if (gij == 0.0) continue;
                Real* dwr = &dW(j, 0);
                for (std::size_t k = 0; k < in; ++k) dwr[k] += gij * xr[k];
              }
            }
          }
          if (nodes_[n.parents[1]].needs_grad) {
            Tensor& dB = grad_slot(adj, n.parents[1]);
            for (std::size_t i = 0; i < rows; ++i) {
              for (std::size_t j = 0; j < out; ++j) dB(0, j) += g(i, j);
            }
          }
          if (nodes_[n.parents[2]].needs_grad) {
            Tensor& dX = grad_slot(adj, n.parents[2]);
            for (std::size_t i = 0; i < rows; ++i) {
              Real* dxr = &dX(i, 0);
              for (std::size_t j = 0; j < out; ++j) {
                const Real gij = g(i, j);
                if (gij == 0.0) continue;
                const Real* wr = W.row(j).data();
                for (std::size_t k = 0; k < in; ++k) dxr[k] += gij * wr[k];
              }
            }
          }
          break;
        }
        case Kind::concat: {
          const std::size_t left = nodes_[n.parents[0]].value.cols();
          if (nodes_[n.parents[0]].needs_grad) {
            Tensor& dA = grad_slot(adj, n.parents[0]);
            for (std::size_t i = 0; i < g.rows(); ++i) {
              for (std::size_t j = 0; j < left; ++j) dA(i, j) += g(i, j);
            }
          }
          if (nodes_[n.parents[1]].needs_grad) {
            Tensor& dB = grad_slot(adj, n.parents[1]);
            for (std::size_t i = 0; i < g.rows(); ++i) {
              for (std::size_t j = left; j < g.cols(); ++j) dB(i, j - left) += g(i, j);
            }
          }
          break;
        }
        case Kind::relu: {
          const Tensor& X = nodes_[n.parents[0]].value;
          Tensor& dX = grad_slot(adj, n.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (X.data()[i] > 0) dX.data()[i] += g.data()[i];
          }
          break;
        }
        case Kind::tanh: {
          Tensor& dX = grad_slot(adj, n.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) {
            const Real y = n.value.data()[i];
            dX.data()[i] += g.data()[i] * (1.0 - y * y);
          }
          break;
        }
        case Kind::add: {
          for (int p = 0; p < 2; ++p) {
            if (!nodes_[n.parents[p]].needs_grad) continue;
            Tensor& d = grad_slot(adj, n.parents[p]);
            for (std::size_t i = 0; i < g.size(); ++i) d.data()[i] += g.data()[i];
          }
          break;
        }
        case Kind::mul: {
          for (int p = 0; p < 2; ++p) {
            if (!nodes_[n.parents[p]].needs_grad) continue;
            const Tensor& other = nodes_[n.parents[1 - p]].value;
            Tensor& d = grad_slot(adj, n.parents[p]);
            for (std::size_t i = 0; i < g.size(); ++i) d.data()[i] += g.data()[i] * other.data()[i];
          }
          break;
        }
        case Kind::scale: {
          Tensor& d = grad_slot(adj, n.parents[0]);
          for (std::size_t i = 0; i < g.size(); ++i) d.data()[i] += g.data()[i] * n.factor;
          break;
        }
        case Kind::loss: {
          Tensor& d = grad_slot(adj, n.parents[0]);
          const Real s = g.item();
          for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] += s * n.aux.data()[i];
          break;
        }
      }
    }
    return GradientMap(std::move(entries), root.index);
  }

 private:
  enum class Kind { constant, parameter, linear, concat, relu, tanh, add, mul, scale, loss };

  struct Node {
    Kind kind = Kind::constant;
    std::array<std::uint32_t, 3> parents{};
    Tensor value;
    Tensor aux;
    Real factor = 1.0;
    std::size_t param = 0;
    bool needs_grad = false;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  const Node& node(Var v) const {
    if (v.tape != id_ || v.index >= nodes_.size()) throw UsageError("variable does not belong to this tape");
    return nodes_[v.index];
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{id_, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var push_op(Kind kind, std::initializer_list<Var> parents, Tensor value, const char* what) {
    value.require_finite(what);
    Node n;
    n.kind = kind;
    std::size_t i = 0;
    for (Var p : parents) {
      node(p);
      n.parents[i++] = p.index;
      n.needs_grad = n.needs_grad || nodes_[p.index].needs_grad;
    }
    n.value = std::move(value);
    return push(std::move(n));
  }

  Tensor& grad_slot(std::vector<Tensor>& adj, std::uint32_t idx) const {
    if (adj[idx].empty() && !nodes_[idx].value.empty()) {
      adj[idx] = Tensor(nodes_[idx].value.rows(), nodes_[idx].value.cols());
    }
    return adj[idx];
  }

  const ParameterStore* store_;
  std::uint64_t id_;
  std::vector<Node> nodes_;
};

inline GradientMap backward(const Tape& tape, Var root) { return tape.backward(root); }

}  // namespace fuller
