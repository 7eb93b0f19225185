// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <utility>

#include "wsdet/geometry.hpp"
#include "wsdet/image.hpp"
#include "wsdet/manifest.hpp"
#include "wsdet/rng.hpp"

namespace wsdet {

/// A sample with its image materialized in memory.
struct LoadedSample {
  Image image;
  ClassLabel label = ClassLabel::class_1;
  std::optional<BoundingBox> box;
};

/// Resolves the sample's (possibly relative) image path against the directory
/// of its manifest and checks the strong box against the image bounds.
inline LoadedSample load_sample(const Sample& s, const std::filesystem::path& manifest_dir) {
  LoadedSample out;
  std::filesystem::path p(s.image_path);
  if (p.is_relative()) p = manifest_dir / p;
  out.image = read_png_gray(p);
  out.label = s.label;
  out.box = s.box;
  if (out.box && (out.box->x_max > out.image.width || out.box->y_max > out.image.height)) {
    throw std::runtime_error("sample '" + s.image_id + "': box extends outside image bounds");
  }
  return out;
}

inline Image flip_horizontal(const Image& img) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) out.at(x, y) = img.at(img.width - 1 - x, y);
  }
  return out;
}

/// Mirror across the vertical midline: x -> width - x with endpoints swapped.
inline BoundingBox flip_box(const BoundingBox& b, double image_width) {
  return {image_width - b.x_max, b.y_min, image_width - b.x_min, b.y_max};
}

/// Pixel-only photometric jitter; p' = (p - 1/2) * contrast + 1/2 + brightness
/// in [0,1] units. contrast = 1, brightness = 0 is the identity.
inline Image adjust_brightness_contrast(const Image& img, double brightness, double contrast) {
  Image out(img.width, img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const double p = double(img.pixels[i]) / 255.0;
    const double q = std::clamp((p - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0);
    out.pixels[i] = std::uint8_t(std::lround(q * 255.0));
  }
  return out;
}

/// Strong-sample augmentation: optional horizontal flip (mirrors the box) and
/// random brightness/contrast jitter of magnitude jitter_strength (pixels
/// only, box untouched). Requires a strong sample.
inline LoadedSample augment_strong(const LoadedSample& s, bool flip, Rng& rng,
                                   double jitter_strength = 0.10) {
  if (!s.box.has_value()) throw std::invalid_argument("augment_strong: sample has no box");
  LoadedSample out;
  out.label = s.label;
  const double brightness = rng.uniform(-jitter_strength, jitter_strength);
  const double contrast = 1.0 + rng.uniform(-jitter_strength, jitter_strength);
  if (flip) {
    out.image = adjust_brightness_contrast(flip_horizontal(s.image), brightness, contrast);
    out.box = flip_box(*s.box, double(s.image.width));
  } else {
    out.image = adjust_brightness_contrast(s.image, brightness, contrast);
    out.box = *s.box;
  }
  return out;
}

/// Cycles 0..n-1 with an independent reshuffle per epoch. Element for any
/// global step is recomputable from (seed, step), which makes training
/// resumable without serializing iterator state.
class CycleStream {
 public:
  CycleStream(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
    if (n == 0) throw std::invalid_argument("CycleStream: empty stream");
  }

  std::size_t at(std::uint64_t step) const {
    const std::uint64_t epoch = step / n_;
    if (!cached_ || cached_epoch_ != epoch) {
      Rng rng(derive_seed(seed_, "epoch", epoch));
      order_ = rng.permutation(n_);
      cached_epoch_ = epoch;
      cached_ = true;
    }
    return order_[std::size_t(step % n_)];
  }

  std::size_t size() const { return n_; }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  mutable bool cached_ = false;
  mutable std::uint64_t cached_epoch_ = 0;
  mutable std::vector<std::size_t> order_;
};

/// One strong and one weak sample per step, each stream cycling independently
/// with per-epoch reshuffling from its own seeded generator.
class DualStream {
 public:
  DualStream(const DatasetManifest& strong, const DatasetManifest& weak, std::uint64_t seed)
      : strong_(&strong),
        weak_(&weak),
        strong_stream_(strong.samples.size(), derive_seed(seed, "strong_stream")),
        weak_stream_(weak.samples.size(), derive_seed(seed, "weak_stream")) {}

  std::pair<const Sample*, const Sample*> at(std::uint64_t step) const {
    return {&strong_->samples[strong_stream_.at(step)], &weak_->samples[weak_stream_.at(step)]};
  }

 private:
  const DatasetManifest* strong_;
  const DatasetManifest* weak_;
  CycleStream strong_stream_;
  CycleStream weak_stream_;
};

inline DualStream dual_stream(const DatasetManifest& strong, const DatasetManifest& weak,
                              std::uint64_t seed) {
  if (strong.samples.empty()) throw std::invalid_argument("dual_stream: strong manifest is empty");
  if (weak.samples.empty()) throw std::invalid_argument("dual_stream: weak manifest is empty");
  return DualStream(strong, weak, seed);
}

}  // namespace wsdet
