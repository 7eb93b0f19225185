// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wsdet/geometry.hpp"

namespace wsdet {

enum class Supervision { strong, weak };
enum class Origin { original, active };

inline const char* to_string(Supervision s) { return s == Supervision::strong ? "strong" : "weak"; }
inline const char* to_string(Origin o) { return o == Origin::original ? "original" : "active"; }

/// One image record. Strong supervision means a GT box is present; weak means
/// an image-level label only.
struct Sample {
  std::string image_id;
  std::string image_path;
  Supervision supervision = Supervision::weak;
  ClassLabel label = ClassLabel::class_1;
  std::optional<BoundingBox> box;
  Origin origin = Origin::original;

  bool operator==(const Sample& o) const = default;
};

enum class Split { train_strong, train_weak, test };

struct DatasetManifest {
  std::vector<Sample> samples;
  Split split = Split::train_strong;

  std::map<ClassLabel, std::size_t> class_counts() const {
    std::map<ClassLabel, std::size_t> counts;
    for (const auto& s : samples) ++counts[s.label];
    return counts;
  }

  bool operator==(const DatasetManifest& o) const = default;
};

/// Enforces per-sample invariants; names the offending sample in the message.
inline void validate_sample(const Sample& s) {
  const std::string who = "sample '" + s.image_id + "': ";
  if (s.label == ClassLabel::background) {
    throw std::runtime_error(who + "label must not be background");
  }
  if (s.supervision == Supervision::strong) {
    if (!s.box.has_value()) throw std::runtime_error(who + "strong sample is missing its box");
    if (!s.box->valid()) throw std::runtime_error(who + "strong sample has a degenerate box");
    if (s.box->x_min < 0.0 || s.box->y_min < 0.0) {
      throw std::runtime_error(who + "box extends outside image bounds");
    }
  } else if (s.box.has_value()) {
    throw std::runtime_error(who + "weak sample must not carry a box");
  }
}

inline void validate_manifest(const DatasetManifest& m) {
  for (const auto& s : m.samples) validate_sample(s);
  if (m.split == Split::test) {
    for (const auto& s : m.samples) {
      if (s.supervision != Supervision::strong) {
        throw std::runtime_error("sample '" + s.image_id +
                                 "': test split requires strong supervision");
      }
    }
  }
}

inline nlohmann::json sample_to_json(const Sample& s) {
  nlohmann::json j{{"image_id", s.image_id},
                   {"image_path", s.image_path},
                   {"supervision", to_string(s.supervision)},
                   {"label", to_string(s.label)},
                   {"origin", to_string(s.origin)}};
  if (s.box) j["box"] = {s.box->x_min, s.box->y_min, s.box->x_max, s.box->y_max};
  return j;
}

inline Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.image_id = j.at("image_id").get<std::string>();
  s.image_path = j.at("image_path").get<std::string>();
  const auto sup = j.at("supervision").get<std::string>();
  if (sup == "strong") s.supervision = Supervision::strong;
  else if (sup == "weak") s.supervision = Supervision::weak;
  else throw std::runtime_error("unknown supervision: " + sup);
  s.label = label_from_string(j.at("label").get<std::string>());
  if (j.contains("box")) {
    const auto& b = j.at("box");
    if (!b.is_array() || b.size() != 4) throw std::runtime_error("box must be [x0,y0,x1,y1]");
    s.box = BoundingBox{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                        b[3].get<double>()};
  }
  if (j.contains("origin")) {
    const auto o = j.at("origin").get<std::string>();
    if (o == "original") s.origin = Origin::original;
    else if (o == "active") s.origin = Origin::active;
    else throw std::runtime_error("unknown origin: " + o);
  }
  return s;
}

/// JSON-lines writer; one record per sample.
inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + path.string());
  for (const auto& s : m.samples) out << sample_to_json(s).dump() << '\n';
  if (!out) throw std::runtime_error("write_manifest: write failed for " + path.string());
}

/// JSON-lines reader. Parse failures name the line; invariant violations name
/// the sample.
inline DatasetManifest load_manifest(const std::filesystem::path& path, Split split) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + path.string());
  DatasetManifest m;
  m.split = split;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      m.samples.push_back(sample_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_manifest: " + path.string() + ":" + std::to_string(line_no) +
                               ": " + e.what());
    }
  }
  validate_manifest(m);
  return m;
}

}  // namespace wsdet
