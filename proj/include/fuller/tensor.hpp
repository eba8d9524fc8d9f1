#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fuller/errors.hpp"

namespace fuller {

using Real = double;

// Dense row-major matrix of doubles. Rank 0/1 values are represented as
// 1x1 and 1xN tensors respectively.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  Tensor(std::size_t rows, std::size_t cols, std::vector<Real> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(rows_, cols_));
    }
    require_finite("tensor construction");
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<Real>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<Real> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged initializer for tensor");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(r, c, std::move(data));
  }

  static Tensor scalar(Real v) { return Tensor(1, 1, {v}); }

  static Tensor filled(std::size_t rows, std::size_t cols, Real v) {
    return Tensor(rows, cols, std::vector<Real>(rows * cols, v));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::pair<std::size_t, std::size_t> shape() const noexcept { return {rows_, cols_}; }
  bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  Real& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  std::span<Real> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  Real item() const {
    if (rows_ != 1 || cols_ != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(rows_, cols_));
    return data_[0];
  }

  bool all_finite() const noexcept {
    for (Real v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void require_finite(const char* where) const {
    if (!all_finite()) throw NumericError(std::string("non-finite value in ") + where);
  }

  void scale(Real f) noexcept {
    for (Real& v : data_) v *= f;
  }

  bool operator==(const Tensor& o) const = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }
  std::string shape_string() const { return shape_string(rows_, cols_); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

inline Real dot(std::span<const Real> a, std::span<const Real> b) {
  if (a.size() != b.size()) throw ShapeError("dot of vectors with lengths " + std::to_string(a.size()) + " and " +
                                             std::to_string(b.size()));
  return std::inner_product(a.begin(), a.end(), b.begin(), Real{0});
}

inline Real l2_norm(std::span<const Real> v) { return std::sqrt(dot(v, v)); }

inline Real cosine_similarity(std::span<const Real> a, std::span<const Real> b) {
  return dot(a, b) / (l2_norm(a) * l2_norm(b));
}

}  // namespace fuller
