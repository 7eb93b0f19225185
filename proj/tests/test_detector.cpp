// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Forward-pass contracts, target assignment, and the analytic gradients of
// the four strong-supervision loss terms against central finite differences.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "wsdet/detector.hpp"

using namespace wsdet;

namespace {

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.image_size = 32;
  mc.conv_channels = {2, 3, 3, 4};
  mc.rpn_channels = 4;
  mc.fc_width = 12;
  mc.roi_pool = 2;
  return mc;
}

AnchorConfig tiny_anchors() {
  AnchorConfig ac;
  ac.sizes = {8.0, 16.0};
  ac.ratios = {1.0, 2.0};
  ac.train_pre_nms = 32;
  ac.train_post_nms = 8;
  ac.test_pre_nms = 16;
  ac.test_post_nms = 4;
  return ac;
}

Image noise_image(int size, std::uint64_t seed) {
  Image img(size, size);
  Rng rng(seed);
  for (auto& p : img.pixels) p = std::uint8_t(rng.uniform_int(0, 255));
  return img;
}

/// Everything a loss evaluation needs, frozen so each loss term is a smooth
/// function of the parameters alone.
struct FixedBatch {
  Mat input;
  TargetAssignment anchor_asg;
  std::vector<int> anchor_sampled;
  std::vector<BoundingBox> rois;
  std::vector<int> labels;
  std::vector<std::array<double, 4>> reg_targets;
};

FixedBatch make_fixed_batch(Detector& det, const Image& img, const Annotation& gt,
                            std::uint64_t seed) {
  FixedBatch fb;
  fb.input = det.image_to_input(img);
  fb.anchor_asg = assign_targets(det.anchors(), gt, 0.5);
  Rng rng(seed);
  fb.anchor_sampled = sample_minibatch(fb.anchor_asg, 8, 0.5, rng);

  Detector::BackboneCache bb;
  const Mat features = det.backbone_forward(fb.input, bb);
  Detector::RpnCache rpn;
  det.rpn_forward(features, rpn);
  const RoIBatch proposals = det.propose(rpn, true);
  REQUIRE_FALSE(proposals.rois.empty());
  const TargetAssignment roi_asg = assign_targets(proposals.rois, gt, 0.5);
  const auto sampled = sample_minibatch(roi_asg, 4, 0.25, rng);
  for (const int idx : sampled) {
    fb.rois.push_back(proposals.rois[std::size_t(idx)]);
    fb.labels.push_back(roi_asg.positive[std::size_t(idx)] ? int(gt.label) : 0);
    fb.reg_targets.push_back(roi_asg.reg_target[std::size_t(idx)]);
  }
  return fb;
}

/// The four loss terms at the current parameters; when grad_term is 0..3 the
/// corresponding analytic parameter gradients are left in det's grad buffers.
std::array<double, 4> compute_losses(Detector& det, const FixedBatch& fb, int grad_term) {
  Detector::BackboneCache bb;
  const Mat features = det.backbone_forward(fb.input, bb);
  Detector::RpnCache rpn;
  det.rpn_forward(features, rpn);
  Mat g_cls = Mat::Zero(rpn.cls_logits.rows(), rpn.cls_logits.cols());
  Mat g_reg = Mat::Zero(rpn.reg_deltas.rows(), rpn.reg_deltas.cols());
  const auto [rpn_cls, rpn_reg] =
      rpn_losses(det, rpn, fb.anchor_asg, fb.anchor_sampled, &g_cls, &g_reg);

  Detector::HeadCache head;
  det.head_forward(features, fb.rois, head);
  Mat g_logits = Mat::Zero(head.cls_logits.rows(), head.cls_logits.cols());
  Mat g_deltas = Mat::Zero(head.deltas.rows(), head.deltas.cols());
  const auto [head_cls, head_reg] =
      head_losses(head, fb.labels, fb.reg_targets, &g_logits, &g_deltas);

  if (grad_term >= 0) {
    det.zero_grads();
    Mat g_features = Mat::Zero(features.rows(), features.cols());
    const Mat zc = Mat::Zero(g_cls.rows(), g_cls.cols());
    const Mat zr = Mat::Zero(g_reg.rows(), g_reg.cols());
    const Mat zl = Mat::Zero(g_logits.rows(), g_logits.cols());
    const Mat zd = Mat::Zero(g_deltas.rows(), g_deltas.cols());
    switch (grad_term) {
      case 0: det.rpn_backward(g_cls, zr, rpn, g_features); break;
      case 1: det.rpn_backward(zc, g_reg, rpn, g_features); break;
      case 2: det.head_backward(g_logits, zd, head, g_features); break;
      case 3: det.head_backward(zl, g_deltas, head, g_features); break;
    }
    det.backbone_backward(g_features, bb);
  }
  return {rpn_cls, rpn_reg, head_cls, head_reg};
}

}  // namespace

TEST_CASE("backbone produces the stride-8 grid deterministically") {
  ModelConfig mc;  // default desk-scale model
  AnchorConfig ac;
  Detector det(mc, ac, 5);
  const Image img = noise_image(128, 3);
  Detector::BackboneCache bb1, bb2;
  const Mat f1 = det.backbone_forward(det.image_to_input(img), bb1);
  const Mat f2 = det.backbone_forward(det.image_to_input(img), bb2);
  CHECK(f1.rows() == 32);   // channels
  CHECK(f1.cols() == 256);  // 16 x 16 spatial grid
  CHECK(f1 == f2);

  // zero input stays finite
  Detector::BackboneCache bb3;
  const Mat fz = det.backbone_forward(det.image_to_input(Image(128, 128, 0)), bb3);
  CHECK(fz.allFinite());

  CHECK_THROWS_AS(det.image_to_input(Image(64, 64, 0)), std::invalid_argument);
}

TEST_CASE("proposals respect count, bounds and pairwise-IoU contracts") {
  Detector det(tiny_model(), tiny_anchors(), 17);
  const Image img = noise_image(32, 23);
  Detector::BackboneCache bb;
  const Mat features = det.backbone_forward(det.image_to_input(img), bb);
  Detector::RpnCache rpn;
  det.rpn_forward(features, rpn);
  for (const bool training : {true, false}) {
    const RoIBatch batch = det.propose(rpn, training);
    CHECK(batch.rois.size() <= std::size_t(training ? 8 : 4));
    CHECK(batch.rois.size() == batch.objectness.size());
    for (const auto& r : batch.rois) {
      CHECK(r.valid());
      CHECK(r.x_min >= 0.0);
      CHECK(r.y_min >= 0.0);
      CHECK(r.x_max <= 32.0);
      CHECK(r.y_max <= 32.0);
    }
    for (std::size_t i = 0; i < batch.rois.size(); ++i) {
      for (std::size_t j = i + 1; j < batch.rois.size(); ++j) {
        CHECK(iou(batch.rois[i], batch.rois[j]) <= 0.5);
      }
    }
    for (std::size_t i = 1; i < batch.objectness.size(); ++i) {
      CHECK(batch.objectness[i - 1] >= batch.objectness[i]);
    }
  }
}

TEST_CASE("roi head shapes, normalization and input determinism") {
  Detector det(tiny_model(), tiny_anchors(), 29);
  const Image img = noise_image(32, 31);
  Detector::BackboneCache bb;
  const Mat features = det.backbone_forward(det.image_to_input(img), bb);
  const std::vector<BoundingBox> rois = {{2, 2, 14, 12}, {5, 8, 30, 28}, {2, 2, 14, 12}};
  Detector::HeadCache head;
  det.head_forward(features, rois, head);
  const ClassScores scores = det.class_scores(head);
  REQUIRE(scores.probs.rows() == 3);
  CHECK(scores.probs.cols() == kNumClasses);
  CHECK(scores.deltas.cols() == 4 * kNumClasses);
  for (Eigen::Index r = 0; r < scores.probs.rows(); ++r) {
    CHECK_THAT(scores.probs.row(r).sum(), Catch::Matchers::WithinAbs(1.0, 1e-6));
    CHECK(scores.probs.row(r).minCoeff() >= 0.0);
  }
  // duplicated RoI gives identical rows
  CHECK(scores.probs.row(0) == scores.probs.row(2));
  CHECK(scores.deltas.row(0) == scores.deltas.row(2));

  Detector::HeadCache empty_head;
  CHECK_THROWS_AS(det.head_forward(features, {}, empty_head), std::invalid_argument);
}

TEST_CASE("assign_targets: identity, low-IoU background, max-IoU guarantee") {
  const Annotation gt{{10, 10, 30, 30}, ClassLabel::class_2};

  SECTION("candidate identical to GT is positive with zero regression target") {
    const auto asg = assign_targets({gt.box, {50, 50, 60, 60}}, gt);
    CHECK(asg.positive[0]);
    CHECK_FALSE(asg.positive[1]);
    for (const double d : asg.reg_target[0]) CHECK_THAT(d, Catch::Matchers::WithinAbs(0.0, 1e-12));
  }
  SECTION("IoU 1/3 stays background when a better candidate exists") {
    const Annotation g{{0, 0, 10, 10}, ClassLabel::class_1};
    const auto asg = assign_targets({{5, 0, 15, 10}, {0, 0, 10, 10}}, g);
    CHECK_FALSE(asg.positive[0]);  // IoU exactly 1/3 < 0.5
    CHECK(asg.positive[1]);
  }
  SECTION("no candidate above threshold still yields exactly one positive") {
    const auto asg = assign_targets({{0, 0, 12, 12}, {8, 8, 18, 18}, {35, 35, 45, 45}}, gt);
    int n_pos = 0;
    for (const bool p : asg.positive) n_pos += p ? 1 : 0;
    CHECK(n_pos == 1);
    CHECK(asg.positive[std::size_t(asg.best_index)]);
    CHECK(asg.best_index == 1);  // highest IoU with the GT
  }
  SECTION("encode/decode round trip") {
    Rng rng(40);
    for (int i = 0; i < 200; ++i) {
      const BoundingBox ref{rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(41, 90),
                            rng.uniform(41, 90)};
      const BoundingBox gt_box{rng.uniform(0, 45), rng.uniform(0, 45), rng.uniform(46, 95),
                               rng.uniform(46, 95)};
      const auto delta = encode_box(ref, gt_box);
      const auto back = decode_box(ref, delta, 1000.0, 1000.0, 1e-6);
      REQUIRE(back.has_value());
      CHECK_THAT(back->x_min, Catch::Matchers::WithinAbs(gt_box.x_min, 1e-9));
      CHECK_THAT(back->y_min, Catch::Matchers::WithinAbs(gt_box.y_min, 1e-9));
      CHECK_THAT(back->x_max, Catch::Matchers::WithinAbs(gt_box.x_max, 1e-9));
      CHECK_THAT(back->y_max, Catch::Matchers::WithinAbs(gt_box.y_max, 1e-9));
    }
  }
}

TEST_CASE("loss fixtures at the optimum and at uniform predictions") {
  Detector::HeadCache cache;
  cache.cls_logits = Mat::Zero(2, kNumClasses);  // uniform prediction
  cache.deltas = Mat::Zero(2, 4 * kNumClasses);
  const std::vector<int> labels{1, 0};
  std::vector<std::array<double, 4>> targets(2, {0, 0, 0, 0});

  const auto [cls_uniform, reg_zero] = head_losses(cache, labels, targets, nullptr, nullptr);
  CHECK_THAT(cls_uniform, Catch::Matchers::WithinAbs(std::log(3.0), 1e-12));
  CHECK(reg_zero == 0.0);  // deltas equal targets on the positive

  // one-hot logits approaching the optimum
  cache.cls_logits(0, 1) = 60.0;
  cache.cls_logits(1, 0) = 60.0;
  targets[0] = {0.2, -0.1, 0.05, 0.3};
  for (int k = 0; k < 4; ++k) cache.deltas(0, 4 + k) = targets[0][std::size_t(k)];
  const auto [cls_opt, reg_opt] = head_losses(cache, labels, targets, nullptr, nullptr);
  CHECK_THAT(cls_opt, Catch::Matchers::WithinAbs(0.0, 1e-12));
  CHECK(reg_opt == 0.0);
}

TEST_CASE("four strong loss terms match central finite differences") {
  Detector det(tiny_model(), tiny_anchors(), 1234);
  const Image img = noise_image(32, 77);
  const Annotation gt{{6, 8, 22, 26}, ClassLabel::class_2};
  const FixedBatch fb = make_fixed_batch(det, img, gt, 99);

  std::size_t total_params = 0;
  for (Param* p : det.parameters()) total_params += std::size_t(p->value.size());
  CHECK(total_params <= 10000);

  // analytic gradients, one backward sweep per term
  std::array<std::vector<Mat>, 4> analytic;
  for (int term = 0; term < 4; ++term) {
    compute_losses(det, fb, term);
    for (Param* p : det.parameters()) analytic[std::size_t(term)].push_back(p->grad);
  }

  const double eps = 1e-4;
  double worst = 0.0;
  const auto params = det.parameters();
  // subset sweep here (every 7th entry); the acceptance suite runs the full one
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param* p = params[pi];
    for (Eigen::Index i = 0; i < p->value.size(); i += 7) {
      const double saved = p->value.data()[i];
      p->value.data()[i] = saved + eps;
      const auto up = compute_losses(det, fb, -1);
      p->value.data()[i] = saved - eps;
      const auto dn = compute_losses(det, fb, -1);
      p->value.data()[i] = saved;
      for (int term = 0; term < 4; ++term) {
        const double fd = (up[std::size_t(term)] - dn[std::size_t(term)]) / (2 * eps);
        const double an = analytic[std::size_t(term)][pi].data()[i];
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        const double rel = std::abs(fd - an) / denom;
        if (std::abs(fd) > 1e-8 || std::abs(an) > 1e-8) worst = std::max(worst, rel);
      }
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("checkpoint round trip restores parameters, moments and step") {
  Detector det(tiny_model(), tiny_anchors(), 55);
  // dirty the adam state so the round trip is nontrivial
  AdamConfig adam;
  Rng rng(9);
  for (Param* p : det.parameters()) {
    for (Eigen::Index i = 0; i < p->grad.size(); ++i) p->grad.data()[i] = rng.normal();
  }
  for (Param* p : det.parameters()) adam_step(*p, adam, 1);

  const auto path = std::filesystem::temp_directory_path() / "wsdet_test_ckpt.bin";
  det.save_checkpoint(path, 41, {{"note", "fixture"}});

  auto [back, step] = Detector::load_checkpoint(path);
  CHECK(step == 41);
  auto a = det.parameters();
  auto b = back.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK(a[i]->value == b[i]->value);
    CHECK(a[i]->m == b[i]->m);
    CHECK(a[i]->v == b[i]->v);
  }

  // same inference behaviour after reload
  const Image img = noise_image(32, 4);
  CHECK(det.detect(img, 0.05) == back.detect(img, 0.05));
}

TEST_CASE("minibatch sampling composition and determinism") {
  TargetAssignment asg;
  asg.positive = {true, false, false, true, false, false, false, true};
  asg.reg_target.resize(8);
  Rng r1(5), r2(5);
  const auto s1 = sample_minibatch(asg, 4, 0.25, r1);
  const auto s2 = sample_minibatch(asg, 4, 0.25, r2);
  CHECK(s1 == s2);
  REQUIRE(s1.size() == 4);
  int fg = 0;
  for (const int idx : s1) fg += asg.positive[std::size_t(idx)] ? 1 : 0;
  CHECK(fg == 1);  // round(4 * 0.25)
}
