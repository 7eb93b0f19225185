// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "wsdet/data.hpp"
#include "wsdet/detector.hpp"
#include "wsdet/geometry.hpp"
#include "wsdet/manifest.hpp"
#include "wsdet/metrics.hpp"

namespace wsdet {

/// Two differing-class detections covering the same object: the trigger for
/// promoting a weak image to a strong annotation.
struct DoublePrediction {
  Detection det_a;
  Detection det_b;
  double pair_iou = 0.0;
  std::string image_id;
};

/// Among all unordered pairs with differing labels and IoU above the
/// threshold, picks the pair with maximum IoU; ties break toward the higher
/// combined score, then the earlier pair. Input must already be the image's
/// final (per-class NMS'd, thresholded) detections.
inline std::optional<DoublePrediction> find_double_prediction(const std::vector<Detection>& dets,
                                                              double iou_threshold = 0.5) {
  std::optional<DoublePrediction> best;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (dets[i].label == dets[j].label) continue;
      const double v = iou(dets[i].box, dets[j].box);
      if (!(v > iou_threshold)) continue;
      const double score = dets[i].score + dets[j].score;
      if (!best || v > best->pair_iou ||
          (v == best->pair_iou && score > best->det_a.score + best->det_b.score)) {
        best = DoublePrediction{dets[i], dets[j], v, ""};
      }
    }
  }
  return best;
}

/// Resolves the pair with the image-level label: the member carrying that
/// label becomes the annotation. Absent when no member (or both, impossible
/// for differing labels) matches.
inline std::optional<Annotation> annotate_from_pair(const DoublePrediction& pair,
                                                    ClassLabel image_label) {
  const bool a = pair.det_a.label == image_label;
  const bool b = pair.det_b.label == image_label;
  if (a == b) return std::nullopt;
  const Detection& chosen = a ? pair.det_a : pair.det_b;
  return Annotation{chosen.box, image_label};
}

struct ActiveSelectionConfig {
  double score_threshold = 0.5;
  double nms_threshold = 0.5;
  double pair_iou_threshold = 0.5;
  std::set<ClassLabel> class_filter{ClassLabel::class_2};
};

struct ActiveSelection {
  DatasetManifest active;                // strong samples with origin = active
  std::vector<ImageDetections> dump;     // per-image final detections, for audit
  std::size_t double_prediction_count = 0;
};

/// Runs the trained model over every weak image, promotes double predictions
/// that disambiguate to the image label, and keeps classes in the filter.
/// Inference failures skip the image with a warning; curation must not die on
/// one bad file.
inline ActiveSelection build_active_set(Detector& det, const DatasetManifest& weak,
                                        const std::filesystem::path& manifest_dir,
                                        const ActiveSelectionConfig& cfg) {
  ActiveSelection out;
  out.active.split = Split::train_strong;
  for (const auto& sample : weak.samples) {
    std::vector<Detection> dets;
    try {
      const LoadedSample loaded = load_sample(sample, manifest_dir);
      dets = det.detect(loaded.image, cfg.score_threshold, cfg.nms_threshold);
    } catch (const std::exception& e) {
      std::cerr << "warning: build_active_set: skipping '" << sample.image_id << "': " << e.what()
                << '\n';
      continue;
    }
    out.dump.push_back({sample.image_id, dets});
    auto pair = find_double_prediction(dets, cfg.pair_iou_threshold);
    if (!pair) continue;
    ++out.double_prediction_count;
    pair->image_id = sample.image_id;
    const auto annotation = annotate_from_pair(*pair, sample.label);
    if (!annotation) continue;
    if (!cfg.class_filter.contains(annotation->label)) continue;

    Sample promoted;
    promoted.image_id = sample.image_id;
    promoted.image_path = sample.image_path;
    promoted.supervision = Supervision::strong;
    promoted.label = annotation->label;
    promoted.box = annotation->box;
    promoted.origin = Origin::active;
    validate_sample(promoted);
    out.active.samples.push_back(std::move(promoted));
  }
  return out;
}

/// D_active concatenated onto D_strong; active samples train exactly like
/// original strong ones, the origin field survives only for reporting.
inline DatasetManifest merge_strong(const DatasetManifest& strong, const DatasetManifest& active) {
  DatasetManifest merged = strong;
  merged.split = Split::train_strong;
  merged.samples.insert(merged.samples.end(), active.samples.begin(), active.samples.end());
  validate_manifest(merged);
  return merged;
}

}  // namespace wsdet
