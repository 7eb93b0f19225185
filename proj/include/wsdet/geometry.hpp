// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsdet {

/// Class labels with the fixed total order background < class_1 < class_2.
/// For the breast-ultrasound analogy class_1 plays benign, class_2 malignant.
enum class ClassLabel : int { background = 0, class_1 = 1, class_2 = 2 };

inline constexpr int kNumClasses = 3;

inline const char* to_string(ClassLabel c) {
  switch (c) {
    case ClassLabel::background: return "background";
    case ClassLabel::class_1: return "class_1";
    case ClassLabel::class_2: return "class_2";
  }
  throw std::invalid_argument("unknown ClassLabel value");
}

inline ClassLabel label_from_string(const std::string& s) {
  if (s == "background") return ClassLabel::background;
  if (s == "class_1") return ClassLabel::class_1;
  if (s == "class_2") return ClassLabel::class_2;
  throw std::invalid_argument("unknown class label: " + s);
}

/// Axis-aligned box in continuous pixel coordinates.
/// Valid boxes have strictly positive area: x_min < x_max, y_min < y_max.
struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }

  bool valid() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
           std::isfinite(y_max) && x_min < x_max && y_min < y_max;
  }

  bool operator==(const BoundingBox& o) const = default;
};

inline void require_valid(const BoundingBox& b, const char* what) {
  if (!b.valid()) {
    throw std::invalid_argument(std::string(what) + ": degenerate bounding box [" +
                                std::to_string(b.x_min) + "," + std::to_string(b.y_min) + "," +
                                std::to_string(b.x_max) + "," + std::to_string(b.y_max) + "]");
  }
}

/// A scored, class-labeled prediction. label is never background.
struct Detection {
  BoundingBox box;
  ClassLabel label = ClassLabel::class_1;
  double score = 0.0;

  bool operator==(const Detection& o) const = default;
};

/// Ground truth for one image: a single box plus its class.
struct Annotation {
  BoundingBox box;
  ClassLabel label = ClassLabel::class_1;
};

/// Intersection over union under the continuous-area convention.
/// Throws on degenerate input boxes.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

enum class NmsMode { class_agnostic, per_class };

/// Greedy non-maximum suppression in descending score order. A detection is
/// removed iff it overlaps an already kept detection with IoU strictly above
/// iou_threshold (same class only in per_class mode). Equal scores keep input
/// order, so the output is deterministic.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold,
                                  NmsMode mode) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw std::invalid_argument("nms: iou_threshold must lie in (0,1)");
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return dets[i].score > dets[j].score; });
  std::vector<Detection> kept;
  kept.reserve(dets.size());
  for (std::size_t idx : order) {
    const Detection& d = dets[idx];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (mode == NmsMode::per_class && k.label != d.label) continue;
      if (iou(k.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

/// Outcome of matching one image's detections against its single GT box.
/// localized: some detection overlaps GT with IoU > threshold, class ignored.
/// true_positive: some detection overlaps and carries the GT label.
/// tp_flags marks which detections are true positives; the rest are FPs.
struct MatchRecord {
  bool localized = false;
  bool true_positive = false;
  std::vector<bool> tp_flags;
};

inline MatchRecord match_to_gt(const std::vector<Detection>& dets, const Annotation& gt,
                               double iou_threshold) {
  require_valid(gt.box, "match_to_gt");
  MatchRecord rec;
  rec.tp_flags.resize(dets.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const double v = iou(dets[i].box, gt.box);
    if (v > iou_threshold) {
      rec.localized = true;
      if (dets[i].label == gt.label) {
        rec.true_positive = true;
        rec.tp_flags[i] = true;
      }
    }
  }
  return rec;
}

}  // namespace wsdet
