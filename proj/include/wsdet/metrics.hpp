// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wsdet/geometry.hpp"

namespace wsdet {

/// Final detections of one image.
struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;
};

/// Ground truth of the test set: exactly one annotation per image.
using GtMap = std::map<std::string, Annotation>;

enum class MapConvention { continuous, eleven_point };

inline const char* to_string(MapConvention c) {
  return c == MapConvention::continuous ? "continuous" : "eleven_point";
}

struct ImageMatchOutcome {
  std::string image_id;
  bool localized = false;
  bool true_positive = false;
  std::size_t detection_count = 0;
};

namespace detail {
inline const Annotation& gt_for(const GtMap& gts, const std::string& image_id) {
  const auto it = gts.find(image_id);
  if (it == gts.end()) {
    throw std::runtime_error("evaluation: image '" + image_id + "' has no ground truth");
  }
  return it->second;
}
}  // namespace detail

/// Per-image match records; the denominator is the GT image set, images with
/// no listed detections count as undetected.
inline std::vector<ImageMatchOutcome> match_all(const std::vector<ImageDetections>& dets,
                                                const GtMap& gts, double iou_threshold) {
  std::map<std::string, const std::vector<Detection>*> by_id;
  for (const auto& d : dets) {
    detail::gt_for(gts, d.image_id);  // reject detections for unknown images
    by_id[d.image_id] = &d.detections;
  }
  std::vector<ImageMatchOutcome> out;
  out.reserve(gts.size());
  for (const auto& [id, gt] : gts) {
    ImageMatchOutcome o;
    o.image_id = id;
    if (const auto it = by_id.find(id); it != by_id.end()) {
      const MatchRecord rec = match_to_gt(*it->second, gt, iou_threshold);
      o.localized = rec.localized;
      o.true_positive = rec.true_positive;
      o.detection_count = it->second->size();
    }
    out.push_back(std::move(o));
  }
  return out;
}

/// Percentage of images holding at least one true-positive detection.
inline double corloc(const std::vector<ImageDetections>& dets, const GtMap& gts,
                     double iou_threshold = 0.5) {
  if (gts.empty()) throw std::invalid_argument("corloc: empty ground truth");
  const auto matches = match_all(dets, gts, iou_threshold);
  std::size_t hit = 0;
  for (const auto& m : matches) hit += m.true_positive ? 1 : 0;
  return 100.0 * double(hit) / double(matches.size());
}

/// Percentage of images whose GT box is overlapped by any detection, class
/// ignored.
inline double fraction_detected(const std::vector<ImageDetections>& dets, const GtMap& gts,
                                double iou_threshold = 0.5) {
  if (gts.empty()) throw std::invalid_argument("fraction_detected: empty ground truth");
  const auto matches = match_all(dets, gts, iou_threshold);
  std::size_t hit = 0;
  for (const auto& m : matches) hit += m.localized ? 1 : 0;
  return 100.0 * double(hit) / double(matches.size());
}

/// Mean average precision with IoU-threshold matching; one GT per image,
/// consumable once. Classes without any GT are excluded (with a warning).
inline double mean_average_precision(const std::vector<ImageDetections>& dets, const GtMap& gts,
                                     double iou_threshold = 0.5,
                                     MapConvention convention = MapConvention::continuous) {
  if (gts.empty()) throw std::invalid_argument("mean_average_precision: empty ground truth");
  double ap_sum = 0.0;
  int classes = 0;
  for (int c = 1; c < kNumClasses; ++c) {
    const ClassLabel cls = static_cast<ClassLabel>(c);
    std::size_t n_gt = 0;
    for (const auto& [id, gt] : gts) n_gt += gt.label == cls ? 1 : 0;
    if (n_gt == 0) {
      std::cerr << "warning: mean_average_precision: no GT of class " << to_string(cls)
                << "; class excluded\n";
      continue;
    }

    // rank this class's detections by score, stable in input order
    struct Ranked {
      double score;
      const std::string* image_id;
      const Detection* det;
    };
    std::vector<Ranked> ranked;
    for (const auto& img : dets) {
      detail::gt_for(gts, img.image_id);
      for (const auto& d : img.detections) {
        if (d.label == cls) ranked.push_back({d.score, &img.image_id, &d});
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

    std::map<std::string, bool> consumed;
    std::vector<bool> is_tp(ranked.size(), false);
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      const Annotation& gt = detail::gt_for(gts, *ranked[i].image_id);
      if (gt.label != cls) continue;
      if (consumed[*ranked[i].image_id]) continue;
      if (iou(ranked[i].det->box, gt.box) > iou_threshold) {
        is_tp[i] = true;
        consumed[*ranked[i].image_id] = true;
      }
    }

    // precision/recall points walking down the ranking
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      tp += is_tp[i] ? 1 : 0;
      precision.push_back(double(tp) / double(i + 1));
      recall.push_back(double(tp) / double(n_gt));
    }
    // interpolated precision: max precision at any recall >= r
    std::vector<double> interp = precision;
    for (int i = int(interp.size()) - 2; i >= 0; --i) {
      interp[std::size_t(i)] = std::max(interp[std::size_t(i)], interp[std::size_t(i) + 1]);
    }

    double ap = 0.0;
    if (convention == MapConvention::continuous) {
      double prev_recall = 0.0;
      for (std::size_t i = 0; i < interp.size(); ++i) {
        ap += (recall[i] - prev_recall) * interp[i];
        prev_recall = recall[i];
      }
    } else {
      for (int k = 0; k <= 10; ++k) {
        const double r = k / 10.0;
        double best = 0.0;
        for (std::size_t i = 0; i < interp.size(); ++i) {
          if (recall[i] >= r) {
            best = interp[i];
            break;
          }
        }
        ap += best / 11.0;
      }
    }
    ap_sum += ap;
    ++classes;
  }
  if (classes == 0) return 0.0;
  return 100.0 * ap_sum / double(classes);
}

/// Everything an evaluation run reports, with its thresholds echoed.
struct MetricsReport {
  double corloc = 0.0;
  double fraction_detected = 0.0;
  std::optional<double> map;
  std::vector<ImageMatchOutcome> per_image;
  std::size_t detection_count = 0;
  double iou_threshold = 0.5;
  double score_threshold = 0.5;      // CorLoc / fraction operating point
  double map_score_threshold = 0.05;  // looser mAP operating point
  MapConvention map_convention = MapConvention::continuous;

  nlohmann::json to_json() const {
    nlohmann::json j{{"corloc", corloc},
                     {"fraction_detected", fraction_detected},
                     {"detection_count", detection_count},
                     {"iou_threshold", iou_threshold},
                     {"score_threshold", score_threshold},
                     {"map_score_threshold", map_score_threshold},
                     {"map_convention", to_string(map_convention)}};
    if (map) j["map"] = *map;
    auto arr = nlohmann::json::array();
    for (const auto& m : per_image) {
      arr.push_back({{"image_id", m.image_id},
                     {"localized", m.localized},
                     {"true_positive", m.true_positive},
                     {"detections", m.detection_count}});
    }
    j["per_image"] = arr;
    return j;
  }
};

/// Detection dump, one image per line.
inline void write_detection_dump(const std::vector<ImageDetections>& dets,
                                 const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_detection_dump: cannot open " + path.string());
  for (const auto& img : dets) {
    nlohmann::json j{{"image_id", img.image_id}, {"detections", nlohmann::json::array()}};
    for (const auto& d : img.detections) {
      j["detections"].push_back({{"box", {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max}},
                                 {"label", to_string(d.label)},
                                 {"score", d.score}});
    }
    out << j.dump() << '\n';
  }
}

inline std::vector<ImageDetections> read_detection_dump(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_detection_dump: cannot open " + path.string());
  std::vector<ImageDetections> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ImageDetections img;
      img.image_id = j.at("image_id").get<std::string>();
      for (const auto& d : j.at("detections")) {
        const auto& b = d.at("box");
        img.detections.push_back({{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                                   b[3].get<double>()},
                                  label_from_string(d.at("label").get<std::string>()),
                                  d.at("score").get<double>()});
      }
      out.push_back(std::move(img));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("read_detection_dump: " + path.string() + ":" +
                               std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace wsdet
