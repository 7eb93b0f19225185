// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
//
// CorLoc, fraction detected and mAP against hand-enumerated fixtures and an
// exhaustive per-pairing oracle on small random instances.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "wsdet/metrics.hpp"
#include "wsdet/rng.hpp"

using namespace wsdet;

namespace {

// Plain recount oracle: walks every detection of every image directly.
std::pair<double, double> corloc_fraction_oracle(const std::vector<ImageDetections>& dets,
                                                 const GtMap& gts, double thr) {
  std::size_t tp_images = 0, loc_images = 0;
  for (const auto& [id, gt] : gts) {
    bool tp = false, loc = false;
    for (const auto& img : dets) {
      if (img.image_id != id) continue;
      for (const auto& d : img.detections) {
        const double v = iou(d.box, gt.box);
        if (v > thr) {
          loc = true;
          if (d.label == gt.label) tp = true;
        }
      }
    }
    tp_images += tp ? 1 : 0;
    loc_images += loc ? 1 : 0;
  }
  return {100.0 * double(tp_images) / double(gts.size()),
          100.0 * double(loc_images) / double(gts.size())};
}

// Independent AP: explicit O(n^2) interpolation over the ranked list.
double ap_oracle_for_class(const std::vector<ImageDetections>& dets, const GtMap& gts,
                           ClassLabel cls, double thr) {
  struct Entry {
    double score;
    std::string image_id;
    BoundingBox box;
  };
  std::vector<Entry> entries;
  for (const auto& img : dets) {
    for (const auto& d : img.detections) {
      if (d.label == cls) entries.push_back({d.score, img.image_id, d.box});
    }
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.score > b.score; });
  std::size_t n_gt = 0;
  for (const auto& [id, gt] : gts) n_gt += gt.label == cls ? 1 : 0;
  if (n_gt == 0) return -1.0;

  std::map<std::string, bool> used;
  std::vector<int> tp_flags;
  for (const auto& e : entries) {
    const auto& gt = gts.at(e.image_id);
    bool tp = false;
    if (gt.label == cls && !used[e.image_id] && iou(e.box, gt.box) > thr) {
      tp = true;
      used[e.image_id] = true;
    }
    tp_flags.push_back(tp ? 1 : 0);
  }
  double ap = 0.0;
  int tp_so_far = 0;
  for (std::size_t i = 0; i < tp_flags.size(); ++i) {
    if (!tp_flags[i]) continue;
    ++tp_so_far;
    // interpolated precision at this recall point: best precision at any
    // rank j >= i
    double best = 0.0;
    int tp_j = 0;
    for (std::size_t j = 0; j < tp_flags.size(); ++j) {
      tp_j += tp_flags[j];
      if (j >= i) best = std::max(best, double(tp_j) / double(j + 1));
    }
    ap += best / double(n_gt);
  }
  return ap;
}

double map_oracle(const std::vector<ImageDetections>& dets, const GtMap& gts, double thr) {
  double sum = 0.0;
  int n = 0;
  for (int c = 1; c < kNumClasses; ++c) {
    const double ap = ap_oracle_for_class(dets, gts, static_cast<ClassLabel>(c), thr);
    if (ap >= 0.0) {
      sum += ap;
      ++n;
    }
  }
  return n == 0 ? 0.0 : 100.0 * sum / double(n);
}

}  // namespace

TEST_CASE("hand-enumerated corloc and fraction fixtures") {
  GtMap gts{{"a", {{10, 10, 30, 30}, ClassLabel::class_1}},
            {"b", {{10, 10, 30, 30}, ClassLabel::class_2}},
            {"c", {{10, 10, 30, 30}, ClassLabel::class_1}},
            {"d", {{10, 10, 30, 30}, ClassLabel::class_2}}};
  const std::vector<ImageDetections> dets{
      {"a", {{{10, 10, 30, 30}, ClassLabel::class_1, 0.9}}},  // TP
      {"b", {{{10, 10, 30, 30}, ClassLabel::class_1, 0.9}}},  // localized, wrong label
      {"c", {{{11, 10, 31, 30}, ClassLabel::class_1, 0.8}}},  // TP (IoU 19/21)
      {"d", {{{50, 50, 70, 70}, ClassLabel::class_2, 0.9}}},  // miss
  };
  CHECK(corloc(dets, gts) == 50.0);
  CHECK(fraction_detected(dets, gts) == 75.0);

  // all exact hits
  std::vector<ImageDetections> perfect;
  for (const auto& [id, gt] : gts) perfect.push_back({id, {{gt.box, gt.label, 1.0}}});
  CHECK(corloc(perfect, gts) == 100.0);
  CHECK(fraction_detected(perfect, gts) == 100.0);

  // no detections at all
  CHECK(corloc({}, gts) == 0.0);
  CHECK(fraction_detected({}, gts) == 0.0);

  // unknown image id in detections
  CHECK_THROWS_WITH(corloc({{"zz", {}}}, gts), Catch::Matchers::ContainsSubstring("zz"));
  CHECK_THROWS_AS(corloc({}, GtMap{}), std::invalid_argument);
}

TEST_CASE("average precision fixtures") {
  GtMap one{{"a", {{10, 10, 30, 30}, ClassLabel::class_1}}};
  SECTION("single correct detection scores 100") {
    const std::vector<ImageDetections> dets{{"a", {{{10, 10, 30, 30}, ClassLabel::class_1, 0.9}}}};
    CHECK_THAT(mean_average_precision(dets, one), Catch::Matchers::WithinAbs(100.0, 1e-12));
  }
  SECTION("correct detection outranked by a same-class FP scores 50") {
    const std::vector<ImageDetections> dets{
        {"a",
         {{{50, 50, 70, 70}, ClassLabel::class_1, 0.95},     // FP, ranked first
          {{10, 10, 30, 30}, ClassLabel::class_1, 0.60}}}};  // TP at precision 1/2
    CHECK_THAT(mean_average_precision(dets, one), Catch::Matchers::WithinAbs(50.0, 1e-12));
  }
  SECTION("no detections scores 0") {
    CHECK(mean_average_precision({}, one) == 0.0);
  }
  SECTION("continuous vs eleven-point on a mixed ranking") {
    GtMap two{{"a", {{10, 10, 30, 30}, ClassLabel::class_1}},
              {"b", {{10, 10, 30, 30}, ClassLabel::class_1}}};
    const std::vector<ImageDetections> dets{
        {"a",
         {{{10, 10, 30, 30}, ClassLabel::class_1, 0.9},       // TP
          {{50, 50, 70, 70}, ClassLabel::class_1, 0.8}}},     // FP
        {"b", {{{10, 10, 30, 30}, ClassLabel::class_1, 0.7}}}  // TP
    };
    CHECK_THAT(mean_average_precision(dets, two, 0.5, MapConvention::continuous),
               Catch::Matchers::WithinAbs(100.0 * 5.0 / 6.0, 1e-9));
    CHECK_THAT(mean_average_precision(dets, two, 0.5, MapConvention::eleven_point),
               Catch::Matchers::WithinAbs(100.0 * 28.0 / 33.0, 1e-9));
  }
  SECTION("the one-GT-per-image rule consumes the GT once") {
    const std::vector<ImageDetections> dets{
        {"a",
         {{{10, 10, 30, 30}, ClassLabel::class_1, 0.9},
          {{10, 10, 30, 30}, ClassLabel::class_1, 0.8}}}};  // duplicate: FP
    // AP unchanged by the duplicate (recall already 1 at rank 1)
    CHECK_THAT(mean_average_precision(dets, one), Catch::Matchers::WithinAbs(100.0, 1e-12));
  }
}

TEST_CASE("metrics match the exhaustive oracle on random small fixtures") {
  Rng rng(20260809);
  for (int trial = 0; trial < 100; ++trial) {
    const int n_images = int(rng.uniform_int(1, 5));
    GtMap gts;
    std::vector<ImageDetections> dets;
    for (int i = 0; i < n_images; ++i) {
      const std::string id = "img" + std::to_string(i);
      const double x = rng.uniform(0, 60), y = rng.uniform(0, 60);
      gts[id] = {{x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30)},
                 rng.uniform() < 0.5 ? ClassLabel::class_1 : ClassLabel::class_2};
      ImageDetections img{id, {}};
      const int n_dets = int(rng.uniform_int(0, 5));
      for (int d = 0; d < n_dets; ++d) {
        // half the detections perturb the GT box, half are random clutter
        BoundingBox b;
        if (rng.uniform() < 0.5) {
          const auto& g = gts[id].box;
          b = {g.x_min + rng.uniform(-6, 6), g.y_min + rng.uniform(-6, 6),
               g.x_max + rng.uniform(-6, 6), g.y_max + rng.uniform(-6, 6)};
          if (!b.valid()) b = g;
        } else {
          const double bx = rng.uniform(0, 70), by = rng.uniform(0, 70);
          b = {bx, by, bx + rng.uniform(4, 25), by + rng.uniform(4, 25)};
        }
        img.detections.push_back(
            {b, rng.uniform() < 0.5 ? ClassLabel::class_1 : ClassLabel::class_2,
             rng.uniform(0.05, 1.0)});
      }
      dets.push_back(std::move(img));
    }

    const auto [want_corloc, want_fraction] = corloc_fraction_oracle(dets, gts, 0.5);
    CHECK(corloc(dets, gts) == want_corloc);
    CHECK(fraction_detected(dets, gts) == want_fraction);
    CHECK_THAT(mean_average_precision(dets, gts), Catch::Matchers::WithinAbs(map_oracle(dets, gts, 0.5), 1e-9));

    // TP-image set is a subset of the localized-image set
    for (const auto& m : match_all(dets, gts, 0.5)) {
      if (m.true_positive) CHECK(m.localized);
    }
    CHECK(corloc(dets, gts) <= fraction_detected(dets, gts));

    // permutation invariance over image order
    auto shuffled = dets;
    rng.shuffle(shuffled);
    CHECK(corloc(shuffled, gts) == corloc(dets, gts));
    CHECK(fraction_detected(shuffled, gts) == fraction_detected(dets, gts));
    CHECK_THAT(mean_average_precision(shuffled, gts),
               Catch::Matchers::WithinAbs(mean_average_precision(dets, gts), 1e-9));
  }
}

TEST_CASE("adding a detection never decreases corloc or fraction; mAP can drop") {
  GtMap gts{{"a", {{10, 10, 30, 30}, ClassLabel::class_1}},
            {"b", {{40, 40, 60, 60}, ClassLabel::class_2}}};
  std::vector<ImageDetections> dets{{"a", {{{10, 10, 30, 30}, ClassLabel::class_1, 0.6}}},
                                    {"b", {}}};
  const double c0 = corloc(dets, gts);
  const double f0 = fraction_detected(dets, gts);
  const double m0 = mean_average_precision(dets, gts);

  // high-scoring FP on image b
  dets[1].detections.push_back({{5, 5, 15, 15}, ClassLabel::class_1, 0.9});
  CHECK(corloc(dets, gts) >= c0);
  CHECK(fraction_detected(dets, gts) >= f0);
  CHECK(mean_average_precision(dets, gts) < m0);

  // the matching detection raises both
  dets[1].detections.push_back({{40, 40, 60, 60}, ClassLabel::class_2, 0.8});
  CHECK(corloc(dets, gts) == 100.0);
  CHECK(fraction_detected(dets, gts) == 100.0);
}

TEST_CASE("detection dump round trip") {
  const auto path = std::filesystem::temp_directory_path() / "wsdet_dump.jsonl";
  const std::vector<ImageDetections> dets{
      {"a", {{{1.5, 2.25, 10.125, 20.0}, ClassLabel::class_2, 0.875}}},
      {"b", {}},
  };
  write_detection_dump(dets, path);
  const auto back = read_detection_dump(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].image_id == "a");
  CHECK(back[0].detections[0] == dets[0].detections[0]);
  CHECK(back[1].detections.empty());
}

TEST_CASE("metrics report serialization carries the thresholds") {
  MetricsReport r;
  r.corloc = 50.0;
  r.fraction_detected = 75.0;
  r.map = 33.25;
  r.score_threshold = 0.5;
  r.map_score_threshold = 0.05;
  r.per_image.push_back({"a", true, false, 3});
  const auto j = r.to_json();
  CHECK(j.at("corloc") == 50.0);
  CHECK(j.at("map") == 33.25);
  CHECK(j.at("score_threshold") == 0.5);
  CHECK(j.at("per_image").size() == 1);
}
