// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "wsdet/geometry.hpp"
#include "wsdet/image.hpp"
#include "wsdet/manifest.hpp"
#include "wsdet/rng.hpp"

namespace wsdet {

/// Desk-scale stand-in for a clinical ultrasound corpus: speckled grayscale
/// images, exactly one lesion each. class_1 renders as a smooth filled
/// ellipse, class_2 as a spiculated star polygon; size and intensity ranges
/// overlap so the classes stay confusable.
struct SyntheticConfig {
  int image_size = 128;
  std::array<int, 2> strong_counts{40, 40};  // train_strong images per class
  int weak_total = 300;
  double weak_ratio = 3.5;  // class_1 : class_2 imbalance in the weak split
  std::array<int, 2> test_counts{40, 40};
  double noise_strength = 0.15;  // multiplicative speckle sigma
  double lesion_frac_min = 0.15;  // lesion diameter as fraction of image size
  double lesion_frac_max = 0.45;
  std::uint64_t seed = 7;

  void validate() const {
    if (image_size < 16) throw std::invalid_argument("SyntheticConfig: image_size too small");
    if (strong_counts[0] < 0 || strong_counts[1] < 0 || weak_total < 0 || test_counts[0] < 0 ||
        test_counts[1] < 0) {
      throw std::invalid_argument("SyntheticConfig: counts must be >= 0");
    }
    if (weak_ratio <= 0.0) throw std::invalid_argument("SyntheticConfig: weak_ratio must be > 0");
    if (!(lesion_frac_min > 0.0 && lesion_frac_max < 1.0 && lesion_frac_min <= lesion_frac_max)) {
      throw std::invalid_argument("SyntheticConfig: lesion size range must lie inside (0,1)");
    }
    if (noise_strength < 0.0) throw std::invalid_argument("SyntheticConfig: negative noise");
  }

  /// Weak-split class counts under the fixed rounding rule: the minority class
  /// (class_2) gets floor(total / (ratio + 1)), class_1 the remainder.
  std::array<int, 2> weak_counts() const {
    const int minority = int(std::floor(double(weak_total) / (weak_ratio + 1.0)));
    return {weak_total - minority, minority};
  }
};

/// Star-convex lesion: radius per angle around a center. Both classes share
/// the representation; they differ in boundary roughness.
struct LesionShape {
  double cx = 0.0, cy = 0.0;
  double semi_a = 0.0, semi_b = 0.0;  // base ellipse
  double theta = 0.0;
  std::vector<double> radial_bumps;  // multiplicative factor per angular knot
  double depth = 0.5;                // intensity drop inside the lesion
};

namespace detail {

inline double ellipse_radius(const LesionShape& s, double phi) {
  const double c = std::cos(phi - s.theta), sn = std::sin(phi - s.theta);
  return s.semi_a * s.semi_b /
         std::sqrt(s.semi_b * s.semi_b * c * c + s.semi_a * s.semi_a * sn * sn);
}

/// Boundary radius at angle phi: base ellipse radius scaled by the piecewise
/// linear interpolation of the angular knot factors.
inline double lesion_radius(const LesionShape& s, double phi) {
  const double two_pi = 6.283185307179586477;
  const std::size_t n = s.radial_bumps.size();
  double t = std::fmod(phi, two_pi);
  if (t < 0) t += two_pi;
  const double pos = t / two_pi * double(n);
  const std::size_t k0 = std::size_t(pos) % n;
  const std::size_t k1 = (k0 + 1) % n;
  const double frac = pos - std::floor(pos);
  const double bump = s.radial_bumps[k0] * (1.0 - frac) + s.radial_bumps[k1] * frac;
  return ellipse_radius(s, phi) * bump;
}

inline bool inside_lesion(const LesionShape& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  const double r = std::sqrt(dx * dx + dy * dy);
  if (r == 0.0) return true;
  return r <= lesion_radius(s, std::atan2(dy, dx));
}

}  // namespace detail

/// Per-pixel coverage in {0, .25, .5, .75, 1} from a 2x2 subsample grid.
inline std::vector<float> lesion_coverage(const LesionShape& shape, int size) {
  std::vector<float> cov(std::size_t(size) * size, 0.0f);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          hits += detail::inside_lesion(shape, x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy);
        }
      }
      cov[std::size_t(y) * size + x] = float(hits) / 4.0f;
    }
  }
  return cov;
}

/// A pixel belongs to the lesion mask when at least half covered.
inline std::vector<std::uint8_t> lesion_mask(const std::vector<float>& coverage) {
  std::vector<std::uint8_t> mask(coverage.size());
  for (std::size_t i = 0; i < coverage.size(); ++i) mask[i] = coverage[i] >= 0.5f;
  return mask;
}

/// Tight axis-aligned hull of mask pixels in continuous coordinates (pixel
/// (x,y) covers [x,x+1) x [y,y+1)). Throws if the mask is empty.
inline BoundingBox tight_box(const std::vector<std::uint8_t>& mask, int size) {
  int x0 = size, y0 = size, x1 = -1, y1 = -1;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (mask[std::size_t(y) * size + x]) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
    }
  }
  if (x1 < 0) throw std::runtime_error("tight_box: empty lesion mask");
  return {double(x0), double(y0), double(x1 + 1), double(y1 + 1)};
}

/// Draws lesion geometry for one image. All randomness comes from rng.
inline LesionShape sample_lesion_shape(Rng& rng, const SyntheticConfig& cfg, ClassLabel cls) {
  LesionShape s;
  const double frac = rng.uniform(cfg.lesion_frac_min, cfg.lesion_frac_max);
  s.semi_a = frac * cfg.image_size / 2.0;
  s.semi_b = s.semi_a * rng.uniform(0.6, 1.0);
  s.theta = rng.uniform(0.0, 3.141592653589793);
  s.depth = rng.uniform(0.35, 0.75);

  const int knots = 8 + int(rng.uniform_int(0, 8));
  s.radial_bumps.resize(std::size_t(knots));
  // class_1 stays nearly elliptical; class_2 grows irregular radial spikes.
  // The amplitude ranges deliberately touch so the easiest spiculated cases
  // resemble the roughest smooth ones.
  const double amp = cls == ClassLabel::class_1 ? rng.uniform(0.0, 0.06) : rng.uniform(0.10, 0.40);
  for (auto& b : s.radial_bumps) b = 1.0 + amp * rng.uniform(-1.0, 1.3);

  // keep the whole boundary inside the frame with a small margin
  double max_r = 0.0;
  for (int k = 0; k < 64; ++k) {
    max_r = std::max(max_r, detail::lesion_radius(s, k * 6.283185307179586477 / 64.0));
  }
  const double margin = std::min(max_r + 3.0, cfg.image_size / 2.0 - 1.0);
  s.cx = rng.uniform(margin, cfg.image_size - margin);
  s.cy = rng.uniform(margin, cfg.image_size - margin);
  return s;
}

/// Renders one image: attenuated background, the lesion as a darker region
/// with soft edges, multiplicative speckle on top.
inline Image render_synthetic_image(const LesionShape& shape, const SyntheticConfig& cfg,
                                    Rng& rng) {
  const int n = cfg.image_size;
  const auto cov = lesion_coverage(shape, n);
  const double background = rng.uniform(0.35, 0.55);
  const double fade = rng.uniform(0.0, 0.25);
  Image img(n, n);
  for (int y = 0; y < n; ++y) {
    const double gain = 1.0 - fade * double(y) / double(n);
    for (int x = 0; x < n; ++x) {
      double p = background * gain;
      p *= 1.0 - shape.depth * cov[std::size_t(y) * n + x];
      p *= 1.0 + cfg.noise_strength * rng.normal();
      p = std::clamp(p, 0.0, 1.0);
      img.at(x, y) = std::uint8_t(std::lround(p * 255.0));
    }
  }
  return img;
}

struct SyntheticDataset {
  DatasetManifest train_strong;
  DatasetManifest train_weak;
  DatasetManifest test;
};

/// Generates the full desk-scale dataset under out_dir: PNG images plus three
/// JSON-lines manifests with image paths relative to out_dir. Output bytes are
/// a pure function of (cfg, cfg.seed).
inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg,
                                           const std::filesystem::path& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw std::runtime_error("generate_synthetic: cannot create " + out_dir.string());

  const auto weak = cfg.weak_counts();
  SyntheticDataset ds;
  ds.train_strong.split = Split::train_strong;
  ds.train_weak.split = Split::train_weak;
  ds.test.split = Split::test;

  struct Group {
    const char* tag;
    Split split;
    std::array<int, 2> counts;
  };
  const Group groups[] = {{"strong", Split::train_strong, cfg.strong_counts},
                          {"weak", Split::train_weak, weak},
                          {"test", Split::test, cfg.test_counts}};

  for (const auto& g : groups) {
    for (int c = 0; c < 2; ++c) {
      const ClassLabel cls = c == 0 ? ClassLabel::class_1 : ClassLabel::class_2;
      for (int i = 0; i < g.counts[std::size_t(c)]; ++i) {
        char id[64];
        std::snprintf(id, sizeof id, "%s_%s_%04d", g.tag, to_string(cls), i);
        Rng rng(derive_seed(cfg.seed, id));
        const LesionShape shape = sample_lesion_shape(rng, cfg, cls);
        const Image img = render_synthetic_image(shape, cfg, rng);
        const fs::path rel = fs::path("images") / (std::string(id) + ".png");
        write_png_gray(out_dir / rel, img);

        Sample s;
        s.image_id = id;
        s.image_path = rel.generic_string();
        s.label = cls;
        s.origin = Origin::original;
        if (g.split == Split::train_weak) {
          s.supervision = Supervision::weak;
        } else {
          s.supervision = Supervision::strong;
          s.box = tight_box(lesion_mask(lesion_coverage(shape, cfg.image_size)), cfg.image_size);
        }
        validate_sample(s);
        switch (g.split) {
          case Split::train_strong: ds.train_strong.samples.push_back(std::move(s)); break;
          case Split::train_weak: ds.train_weak.samples.push_back(std::move(s)); break;
          case Split::test: ds.test.samples.push_back(std::move(s)); break;
        }
      }
    }
  }

  write_manifest(ds.train_strong, out_dir / "train_strong.jsonl");
  write_manifest(ds.train_weak, out_dir / "train_weak.jsonl");
  write_manifest(ds.test, out_dir / "test.jsonl");
  return ds;
}

}  // namespace wsdet
