#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fuller/errors.hpp"
#include "fuller/tensor.hpp"

namespace fuller {

// Toy surrogates: classification accuracy stands in for mAP, pooled mask IoU
// for mIoU.
struct TaskMetrics {
  Real det_accuracy = 0;
  Real seg_iou = 0;

  std::vector<Real> as_vector() const { return {det_accuracy, seg_iou}; }
};

inline std::size_t argmax_row(std::span<const Real> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

// Running tallies so metrics can be pooled over several batches.
struct DetectionTally {
  std::size_t correct = 0;
  std::size_t total = 0;

  void add(const Tensor& logits, std::span<const std::size_t> labels, std::span<const Real> mask = {}) {
    if (labels.size() != logits.rows()) {
      throw ShapeError("detection: " + std::to_string(labels.size()) + " labels for logits " + logits.shape_string());
    }
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      if (!mask.empty() && mask[i] == 0.0) continue;
      ++total;
      if (argmax_row(logits.row(i)) == labels[i]) ++correct;
    }
  }

  Real value() const { return total == 0 ? 0.0 : static_cast<Real>(correct) / static_cast<Real>(total); }
};

struct IouTally {
  std::size_t intersection = 0;
  std::size_t union_ = 0;

  void add(const Tensor& logits, const Tensor& masks, std::span<const Real> sample_mask = {}) {
    if (!logits.same_shape(masks)) {
      throw ShapeError("segmentation: logits " + logits.shape_string() + " vs masks " + masks.shape_string());
    }
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      if (!sample_mask.empty() && sample_mask[i] == 0.0) continue;
      for (std::size_t j = 0; j < logits.cols(); ++j) {
        const bool pred = logits(i, j) >= 0.0;
        const bool truth = masks(i, j) >= 0.5;
        intersection += pred && truth;
        union_ += pred || truth;
      }
    }
  }

  Real value() const { return union_ == 0 ? 1.0 : static_cast<Real>(intersection) / static_cast<Real>(union_); }
};

// Fraction of rows whose argmax equals the label; ties go to the lowest index.
inline Real detection_accuracy(const Tensor& logits, std::span<const std::size_t> labels) {
  DetectionTally t;
  t.add(logits, labels);
  return t.value();
}

// Pooled IoU of {logit >= 0} against {mask >= 0.5}; an empty union is 1.
inline Real segmentation_iou(const Tensor& logits, const Tensor& masks) {
  IouTally t;
  t.add(logits, masks);
  return t.value();
}

// Multi-task performance drop relative to single-task baselines:
//   ((-1)^l / T) * sum_i (model_i - baseline_i) / baseline_i
// With l = 1 lower is better.
inline Real delta_mtl(std::span<const Real> model, std::span<const Real> baseline, int l = 1) {
  if (model.size() != baseline.size() || model.empty()) {
    throw ShapeError("delta_mtl: need equal, non-zero task counts");
  }
  if (l != 0 && l != 1) throw UsageError("delta_mtl: l must be 0 or 1");
  Real sum = 0;
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (baseline[i] == 0) throw UndefinedMetricError("delta_mtl: baseline metric " + std::to_string(i) + " is zero");
    sum += (model[i] - baseline[i]) / baseline[i];
  }
  const Real sign = l == 1 ? -1.0 : 1.0;
  return sign * sum / static_cast<Real>(model.size());
}

inline Real delta_mtl(const TaskMetrics& model, const TaskMetrics& baseline, int l = 1) {
  const auto m = model.as_vector();
  const auto b = baseline.as_vector();
  return delta_mtl(m, b, l);
}

}  // namespace fuller
