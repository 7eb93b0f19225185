// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wsdet/geometry.hpp"
#include "wsdet/image.hpp"
#include "wsdet/net.hpp"
#include "wsdet/rng.hpp"

namespace wsdet {

/// Backbone/head dimensions. Four 3x3 conv blocks with 2x2 max pooling after
/// the first three, so the feature stride is fixed at 8.
struct ModelConfig {
  int image_size = 128;
  std::array<int, 4> conv_channels{8, 16, 32, 32};
  int rpn_channels = 64;
  int fc_width = 2048;
  int roi_pool = 4;

  static constexpr int kFeatureStride = 8;

  int feature_size() const { return image_size / kFeatureStride; }

  void validate() const {
    if (image_size < 16 || image_size % kFeatureStride != 0) {
      throw std::invalid_argument("ModelConfig: image_size must be a positive multiple of 8");
    }
    for (const int c : conv_channels) {
      if (c <= 0) throw std::invalid_argument("ModelConfig: conv channels must be positive");
    }
    if (rpn_channels <= 0 || fc_width <= 0 || roi_pool <= 0) {
      throw std::invalid_argument("ModelConfig: dimensions must be positive");
    }
  }
};

struct AnchorConfig {
  std::vector<double> sizes{16.0, 32.0, 64.0};
  std::vector<double> ratios{0.5, 1.0, 2.0};
  int train_pre_nms = 256;
  int train_post_nms = 64;
  int test_pre_nms = 128;
  int test_post_nms = 32;
  double nms_threshold = 0.5;
  double min_proposal_size = 1.0;

  int anchors_per_cell() const { return int(sizes.size() * ratios.size()); }

  void validate() const {
    if (sizes.empty() || ratios.empty()) {
      throw std::invalid_argument("AnchorConfig: sizes and ratios must be non-empty");
    }
    if (train_pre_nms <= 0 || train_post_nms <= 0 || test_pre_nms <= 0 || test_post_nms <= 0) {
      throw std::invalid_argument("AnchorConfig: proposal counts must be positive");
    }
    if (!(nms_threshold > 0.0 && nms_threshold < 1.0)) {
      throw std::invalid_argument("AnchorConfig: nms_threshold must lie in (0,1)");
    }
  }
};

/// Anchor boxes for a hf x wf grid; index = position * A + a where position
/// scans rows first (p = y * wf + x).
inline std::vector<BoundingBox> generate_anchors(const AnchorConfig& cfg, int hf, int wf,
                                                 int stride) {
  std::vector<BoundingBox> anchors;
  anchors.reserve(std::size_t(hf) * wf * cfg.anchors_per_cell());
  for (int y = 0; y < hf; ++y) {
    for (int x = 0; x < wf; ++x) {
      const double cx = (x + 0.5) * stride;
      const double cy = (y + 0.5) * stride;
      for (const double size : cfg.sizes) {
        for (const double ratio : cfg.ratios) {
          const double w = size / std::sqrt(ratio);
          const double h = size * std::sqrt(ratio);
          anchors.push_back({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
        }
      }
    }
  }
  return anchors;
}

/// Center/log-size parameterization of gt relative to the reference box.
inline std::array<double, 4> encode_box(const BoundingBox& ref, const BoundingBox& gt) {
  const double rw = ref.width(), rh = ref.height();
  const double rcx = ref.x_min + rw / 2, rcy = ref.y_min + rh / 2;
  const double gw = gt.width(), gh = gt.height();
  const double gcx = gt.x_min + gw / 2, gcy = gt.y_min + gh / 2;
  return {(gcx - rcx) / rw, (gcy - rcy) / rh, std::log(gw / rw), std::log(gh / rh)};
}

/// Inverse of encode_box with clamped log-size deltas, clipped to the image.
inline std::optional<BoundingBox> decode_box(const BoundingBox& ref,
                                             const std::array<double, 4>& delta, double img_w,
                                             double img_h, double min_size) {
  const double rw = ref.width(), rh = ref.height();
  const double rcx = ref.x_min + rw / 2, rcy = ref.y_min + rh / 2;
  const double cx = rcx + std::clamp(delta[0], -4.0, 4.0) * rw;
  const double cy = rcy + std::clamp(delta[1], -4.0, 4.0) * rh;
  const double w = rw * std::exp(std::clamp(delta[2], -4.0, 4.0));
  const double h = rh * std::exp(std::clamp(delta[3], -4.0, 4.0));
  BoundingBox b{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  b.x_min = std::clamp(b.x_min, 0.0, img_w);
  b.x_max = std::clamp(b.x_max, 0.0, img_w);
  b.y_min = std::clamp(b.y_min, 0.0, img_h);
  b.y_max = std::clamp(b.y_max, 0.0, img_h);
  if (b.width() < min_size || b.height() < min_size) return std::nullopt;
  return b;
}

/// The proposal set G: post-NMS RoIs plus their objectness scores.
struct RoIBatch {
  std::vector<BoundingBox> rois;
  std::vector<double> objectness;
};

/// Per-RoI class probabilities and per-class box deltas from the second stage.
struct ClassScores {
  Mat probs;   // N x kNumClasses, rows sum to 1
  Mat deltas;  // N x 4*kNumClasses
};

/// Positive/background assignment of candidate boxes against the single GT.
/// Candidates above the IoU threshold become positive; the best-IoU candidate
/// is always positive (ties to the lowest index).
struct TargetAssignment {
  std::vector<bool> positive;
  std::vector<std::array<double, 4>> reg_target;  // meaningful where positive
  int best_index = -1;
};

inline TargetAssignment assign_targets(const std::vector<BoundingBox>& candidates,
                                       const Annotation& gt, double iou_threshold = 0.5) {
  require_valid(gt.box, "assign_targets");
  TargetAssignment out;
  out.positive.assign(candidates.size(), false);
  out.reg_target.resize(candidates.size());
  double best = -1.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double v = iou(candidates[i], gt.box);
    if (v > iou_threshold) out.positive[i] = true;
    if (v > best) {
      best = v;
      out.best_index = int(i);
    }
  }
  if (out.best_index >= 0) out.positive[std::size_t(out.best_index)] = true;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (out.positive[i]) out.reg_target[i] = encode_box(candidates[i], gt.box);
  }
  return out;
}

/// Fixed-size minibatch with at most fg_fraction positives; positives first,
/// then background fill. Selection order is deterministic in rng.
inline std::vector<int> sample_minibatch(const TargetAssignment& asg, int batch_size,
                                         double fg_fraction, Rng& rng) {
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < asg.positive.size(); ++i) {
    (asg.positive[i] ? pos : neg).push_back(int(i));
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  const int want_fg = std::min<int>(int(pos.size()), int(std::lround(batch_size * fg_fraction)));
  std::vector<int> out(pos.begin(), pos.begin() + want_fg);
  const int want_bg = std::min<int>(int(neg.size()), batch_size - want_fg);
  out.insert(out.end(), neg.begin(), neg.begin() + want_bg);
  // degenerate candidate sets: top up with extra positives rather than
  // returning an under-full batch
  for (std::size_t i = std::size_t(want_fg); i < pos.size() && int(out.size()) < batch_size; ++i) {
    out.push_back(pos[i]);
  }
  return out;
}

/// Two-stage detector: conv backbone -> RPN -> RoI head. Parameter state is
/// mutable and owned here; all forward passes write explicit caches so the
/// backward passes stay pure bookkeeping.
class Detector {
 public:
  Detector(const ModelConfig& mc, const AnchorConfig& ac, std::uint64_t init_seed)
      : model_(mc), anchors_cfg_(ac) {
    mc.validate();
    ac.validate();
    const int a = ac.anchors_per_cell();
    auto add_conv = [&](const std::string& name, int cout, int cin) {
      params_.emplace_back(name + ".w", cout, cin * 9);
      params_.emplace_back(name + ".b", cout, 1);
    };
    add_conv("conv1", mc.conv_channels[0], 1);
    add_conv("conv2", mc.conv_channels[1], mc.conv_channels[0]);
    add_conv("conv3", mc.conv_channels[2], mc.conv_channels[1]);
    add_conv("conv4", mc.conv_channels[3], mc.conv_channels[2]);
    add_conv("rpn.conv", mc.rpn_channels, mc.conv_channels[3]);
    add_conv("rpn.cls", 2 * a, mc.rpn_channels);
    add_conv("rpn.reg", 4 * a, mc.rpn_channels);
    const int pooled_dim = mc.conv_channels[3] * mc.roi_pool * mc.roi_pool;
    params_.emplace_back("head.fc1.w", mc.fc_width, pooled_dim);
    params_.emplace_back("head.fc1.b", mc.fc_width, 1);
    params_.emplace_back("head.fc2.w", mc.fc_width, mc.fc_width);
    params_.emplace_back("head.fc2.b", mc.fc_width, 1);
    params_.emplace_back("head.cls.w", kNumClasses, mc.fc_width);
    params_.emplace_back("head.cls.b", kNumClasses, 1);
    params_.emplace_back("head.reg.w", 4 * kNumClasses, mc.fc_width);
    params_.emplace_back("head.reg.b", 4 * kNumClasses, 1);

    for (auto& p : params_) {
      if (p.name.ends_with(".w")) {
        Rng rng(derive_seed(init_seed, p.name));
        p.init_he(rng, int(p.value.cols()));
      }
    }
    anchors_ = generate_anchors(ac, mc.feature_size(), mc.feature_size(),
                                ModelConfig::kFeatureStride);
  }

  const ModelConfig& model_config() const { return model_; }
  const AnchorConfig& anchor_config() const { return anchors_cfg_; }
  const std::vector<BoundingBox>& anchors() const { return anchors_; }

  std::vector<Param*> parameters() {
    std::vector<Param*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  Param& param(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return p;
    }
    throw std::invalid_argument("unknown parameter: " + name);
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Image -> 1 x (H*W) network input in [0,1].
  Mat image_to_input(const Image& img) const {
    if (img.width != model_.image_size || img.height != model_.image_size) {
      throw std::invalid_argument("Detector: image size mismatch (got " +
                                  std::to_string(img.width) + "x" + std::to_string(img.height) +
                                  ", expected " + std::to_string(model_.image_size) + ")");
    }
    Mat x(1, img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) x(0, Eigen::Index(i)) = img.pixels[i] / 255.0;
    return x;
  }

  // -------------------------------------------------------------------------
  // backbone

  struct BackboneCache {
    std::array<ConvCache, 4> conv;
    std::array<Mat, 4> post_relu;
    std::array<PoolCache, 3> pool;
    std::array<int, 4> h{}, w{};  // input dims per block
    Mat features;
  };

  Mat backbone_forward(const Mat& input, BackboneCache& cache) {
    Mat x = input;
    int h = model_.image_size, w = model_.image_size;
    for (int b = 0; b < 4; ++b) {
      cache.h[std::size_t(b)] = h;
      cache.w[std::size_t(b)] = w;
      Mat y = conv3x3_forward(x, h, w, param(conv_name(b) + ".w"), param(conv_name(b) + ".b"),
                              cache.conv[std::size_t(b)]);
      relu_inplace(y);
      cache.post_relu[std::size_t(b)] = y;
      if (b < 3) {
        x = maxpool2x2_forward(y, h, w, cache.pool[std::size_t(b)]);
        h /= 2;
        w /= 2;
      } else {
        x = y;
      }
    }
    cache.features = x;
    return x;
  }

  void backbone_backward(const Mat& g_features, BackboneCache& cache) {
    Mat g = g_features;
    for (int b = 3; b >= 0; --b) {
      if (b < 3) {
        g = maxpool2x2_backward(g, cache.pool[std::size_t(b)], cache.h[std::size_t(b)],
                                cache.w[std::size_t(b)]);
      }
      g = relu_backward(g, cache.post_relu[std::size_t(b)]);
      g = conv3x3_backward(g, param(conv_name(b) + ".w"), param(conv_name(b) + ".b"),
                           cache.conv[std::size_t(b)]);
    }
  }

  // -------------------------------------------------------------------------
  // region proposal network (3x3 heads)

  struct RpnCache {
    ConvCache conv, cls, reg;
    Mat hidden;      // post-relu, rpn_channels x HW
    Mat cls_logits;  // 2A x HW
    Mat reg_deltas;  // 4A x HW
  };

  void rpn_forward(const Mat& features, RpnCache& cache) {
    const int hf = model_.feature_size(), wf = model_.feature_size();
    Mat h = conv3x3_forward(features, hf, wf, param("rpn.conv.w"), param("rpn.conv.b"), cache.conv);
    relu_inplace(h);
    cache.hidden = h;
    cache.cls_logits =
        conv3x3_forward(h, hf, wf, param("rpn.cls.w"), param("rpn.cls.b"), cache.cls);
    cache.reg_deltas =
        conv3x3_forward(h, hf, wf, param("rpn.reg.w"), param("rpn.reg.b"), cache.reg);
  }

  void rpn_backward(const Mat& g_cls, const Mat& g_reg, RpnCache& cache, Mat& g_features) {
    Mat gh = conv3x3_backward(g_cls, param("rpn.cls.w"), param("rpn.cls.b"), cache.cls);
    gh += conv3x3_backward(g_reg, param("rpn.reg.w"), param("rpn.reg.b"), cache.reg);
    gh = relu_backward(gh, cache.hidden);
    g_features += conv3x3_backward(gh, param("rpn.conv.w"), param("rpn.conv.b"), cache.conv);
  }

  /// Foreground probability of anchor i (softmax over its two logits).
  double anchor_fg_prob(const RpnCache& cache, std::size_t anchor_index) const {
    const int a_per_cell = anchors_cfg_.anchors_per_cell();
    const int p = int(anchor_index) / a_per_cell;
    const int a = int(anchor_index) % a_per_cell;
    const double bg = cache.cls_logits(2 * a, p), fg = cache.cls_logits(2 * a + 1, p);
    const double mx = std::max(bg, fg);
    const double eb = std::exp(bg - mx), ef = std::exp(fg - mx);
    return ef / (eb + ef);
  }

  std::array<double, 4> anchor_deltas(const RpnCache& cache, std::size_t anchor_index) const {
    const int a_per_cell = anchors_cfg_.anchors_per_cell();
    const int p = int(anchor_index) / a_per_cell;
    const int a = int(anchor_index) % a_per_cell;
    return {cache.reg_deltas(4 * a + 0, p), cache.reg_deltas(4 * a + 1, p),
            cache.reg_deltas(4 * a + 2, p), cache.reg_deltas(4 * a + 3, p)};
  }

  /// Decoded, clipped, objectness-ranked, class-agnostic-NMS'd proposals.
  /// Proposal boxes are treated as constants by the backward passes.
  RoIBatch propose(const RpnCache& cache, bool training) const {
    const double img = double(model_.image_size);
    struct Scored {
      BoundingBox box;
      double prob;
      std::size_t index;
    };
    std::vector<Scored> cands;
    cands.reserve(anchors_.size());
    for (std::size_t i = 0; i < anchors_.size(); ++i) {
      const auto box = decode_box(anchors_[i], anchor_deltas(cache, i), img, img,
                                  anchors_cfg_.min_proposal_size);
      if (box) cands.push_back({*box, anchor_fg_prob(cache, i), i});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Scored& a, const Scored& b) {
      return a.prob > b.prob;
    });
    const int pre = training ? anchors_cfg_.train_pre_nms : anchors_cfg_.test_pre_nms;
    const int post = training ? anchors_cfg_.train_post_nms : anchors_cfg_.test_post_nms;
    if (int(cands.size()) > pre) cands.resize(std::size_t(pre));

    RoIBatch out;
    for (const auto& c : cands) {
      bool suppressed = false;
      for (const auto& kept : out.rois) {
        if (iou(kept, c.box) > anchors_cfg_.nms_threshold) {
          suppressed = true;
          break;
        }
      }
      if (!suppressed) {
        out.rois.push_back(c.box);
        out.objectness.push_back(c.prob);
        if (int(out.rois.size()) >= post) break;
      }
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // RoI head: max pooling to a fixed grid, two FC layers, class + box outputs

  struct HeadCache {
    std::vector<BoundingBox> rois;
    std::vector<int> pool_argmax;  // feature position per (roi, channel, bin)
    Mat pooled;                    // N x C*P*P
    FcCache fc1, fc2, cls, reg;
    Mat h1, h2;
    Mat cls_logits;  // N x kNumClasses
    Mat deltas;      // N x 4*kNumClasses
  };

  void head_forward(const Mat& features, const std::vector<BoundingBox>& rois, HeadCache& cache) {
    if (rois.empty()) throw std::invalid_argument("head_forward: empty RoI set");
    const int hf = model_.feature_size(), wf = model_.feature_size();
    const int c = model_.conv_channels[3], p = model_.roi_pool;
    const int stride = ModelConfig::kFeatureStride;
    const auto n = rois.size();
    cache.rois = rois;
    cache.pooled = Mat::Zero(Eigen::Index(n), c * p * p);
    cache.pool_argmax.assign(n * std::size_t(c) * p * p, 0);

    for (std::size_t r = 0; r < n; ++r) {
      const auto& roi = rois[r];
      const int x0 = std::clamp(int(std::floor(roi.x_min / stride)), 0, wf - 1);
      const int y0 = std::clamp(int(std::floor(roi.y_min / stride)), 0, hf - 1);
      const int x1 = std::clamp(int(std::ceil(roi.x_max / stride)), x0 + 1, wf);
      const int y1 = std::clamp(int(std::ceil(roi.y_max / stride)), y0 + 1, hf);
      const double bw = double(x1 - x0) / p, bh = double(y1 - y0) / p;
      for (int by = 0; by < p; ++by) {
        int ys = y0 + int(std::floor(by * bh));
        int ye = y0 + int(std::ceil((by + 1) * bh));
        ye = std::min(ye, y1);
        if (ye <= ys) ye = ys + 1;
        for (int bx = 0; bx < p; ++bx) {
          int xs = x0 + int(std::floor(bx * bw));
          int xe = x0 + int(std::ceil((bx + 1) * bw));
          xe = std::min(xe, x1);
          if (xe <= xs) xe = xs + 1;
          for (int ch = 0; ch < c; ++ch) {
            int best = ys * wf + xs;
            double bv = features(ch, best);
            for (int yy = ys; yy < ye; ++yy) {
              for (int xx = xs; xx < xe; ++xx) {
                if (features(ch, yy * wf + xx) > bv) {
                  bv = features(ch, yy * wf + xx);
                  best = yy * wf + xx;
                }
              }
            }
            const int bin = by * p + bx;
            cache.pooled(Eigen::Index(r), ch * p * p + bin) = bv;
            cache.pool_argmax[(r * std::size_t(c) + std::size_t(ch)) * p * p + std::size_t(bin)] =
                best;
          }
        }
      }
    }

    Mat h1 = fc_forward(cache.pooled, param("head.fc1.w"), param("head.fc1.b"), cache.fc1);
    relu_inplace(h1);
    cache.h1 = h1;
    Mat h2 = fc_forward(h1, param("head.fc2.w"), param("head.fc2.b"), cache.fc2);
    relu_inplace(h2);
    cache.h2 = h2;
    cache.cls_logits = fc_forward(h2, param("head.cls.w"), param("head.cls.b"), cache.cls);
    cache.deltas = fc_forward(h2, param("head.reg.w"), param("head.reg.b"), cache.reg);
  }

  void head_backward(const Mat& g_logits, const Mat& g_deltas, HeadCache& cache,
                     Mat& g_features) {
    Mat gh2 = fc_backward(g_logits, param("head.cls.w"), param("head.cls.b"), cache.cls);
    gh2 += fc_backward(g_deltas, param("head.reg.w"), param("head.reg.b"), cache.reg);
    gh2 = relu_backward(gh2, cache.h2);
    Mat gh1 = fc_backward(gh2, param("head.fc2.w"), param("head.fc2.b"), cache.fc2);
    gh1 = relu_backward(gh1, cache.h1);
    const Mat gpooled = fc_backward(gh1, param("head.fc1.w"), param("head.fc1.b"), cache.fc1);

    const int c = model_.conv_channels[3], p = model_.roi_pool;
    for (std::size_t r = 0; r < cache.rois.size(); ++r) {
      for (int ch = 0; ch < c; ++ch) {
        for (int bin = 0; bin < p * p; ++bin) {
          const int pos =
              cache.pool_argmax[(r * std::size_t(c) + std::size_t(ch)) * p * p + std::size_t(bin)];
          g_features(ch, pos) += gpooled(Eigen::Index(r), ch * p * p + bin);
        }
      }
    }
  }

  /// Per-RoI probabilities and class deltas from a finished head pass.
  ClassScores class_scores(const HeadCache& cache) const {
    return {softmax_rows(cache.cls_logits), cache.deltas};
  }

  // -------------------------------------------------------------------------
  // inference

  /// Full test-time pipeline: propose, classify, decode the per-class box,
  /// threshold, per-class NMS.
  std::vector<Detection> detect(const Image& img, double score_threshold,
                                double nms_threshold = 0.5) {
    BackboneCache bb;
    const Mat features = backbone_forward(image_to_input(img), bb);
    RpnCache rpn;
    rpn_forward(features, rpn);
    const RoIBatch proposals = propose(rpn, /*training=*/false);
    if (proposals.rois.empty()) return {};
    HeadCache head;
    head_forward(features, proposals.rois, head);
    const ClassScores scores = class_scores(head);

    const double img_sz = double(model_.image_size);
    std::vector<Detection> raw;
    for (std::size_t r = 0; r < proposals.rois.size(); ++r) {
      for (int c = 1; c < kNumClasses; ++c) {
        const double s = scores.probs(Eigen::Index(r), c);
        if (!(s > score_threshold)) continue;
        const std::array<double, 4> d{scores.deltas(Eigen::Index(r), 4 * c + 0),
                                      scores.deltas(Eigen::Index(r), 4 * c + 1),
                                      scores.deltas(Eigen::Index(r), 4 * c + 2),
                                      scores.deltas(Eigen::Index(r), 4 * c + 3)};
        const auto box = decode_box(proposals.rois[r], d, img_sz, img_sz, 1e-3);
        if (box) raw.push_back({*box, static_cast<ClassLabel>(c), s});
      }
    }
    return nms(raw, nms_threshold, NmsMode::per_class);
  }

  // -------------------------------------------------------------------------
  // checkpointing

  void save_checkpoint(const std::filesystem::path& path, std::int64_t step,
                       const nlohmann::json& config_echo) const {
    nlohmann::json header;
    header["step"] = step;
    header["config"] = config_echo;
    header["model"] = {{"image_size", model_.image_size},
                       {"conv_channels", model_.conv_channels},
                       {"rpn_channels", model_.rpn_channels},
                       {"fc_width", model_.fc_width},
                       {"roi_pool", model_.roi_pool}};
    header["anchors"] = {{"sizes", anchors_cfg_.sizes},
                         {"ratios", anchors_cfg_.ratios},
                         {"train_pre_nms", anchors_cfg_.train_pre_nms},
                         {"train_post_nms", anchors_cfg_.train_post_nms},
                         {"test_pre_nms", anchors_cfg_.test_pre_nms},
                         {"test_post_nms", anchors_cfg_.test_post_nms},
                         {"nms_threshold", anchors_cfg_.nms_threshold},
                         {"min_proposal_size", anchors_cfg_.min_proposal_size}};
    auto tensors = nlohmann::json::array();
    for (const auto& p : params_) {
      tensors.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
    }
    header["tensors"] = tensors;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    const std::string hs = header.dump();
    out.write("WSDTCKPT", 8);
    const std::uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    const std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& p : params_) {
      for (const Mat* m : {&p.value, &p.m, &p.v}) {
        out.write(reinterpret_cast<const char*>(m->data()),
                  std::streamsize(sizeof(double) * std::size_t(m->size())));
      }
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed: " + path.string());
  }

  /// Restores parameters and optimizer state; returns (step, config echo).
  static std::pair<std::int64_t, nlohmann::json> peek_checkpoint(
      const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "WSDTCKPT", 8) != 0) {
      throw std::runtime_error("load_checkpoint: bad magic in " + path.string());
    }
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    if (version != 1) throw std::runtime_error("load_checkpoint: unsupported version");
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    std::string hs(hlen, '\0');
    in.read(hs.data(), std::streamsize(hlen));
    if (!in) throw std::runtime_error("load_checkpoint: truncated header");
    nlohmann::json header = nlohmann::json::parse(hs);
    return {header.at("step").get<std::int64_t>(), header};
  }

  /// Builds a detector from a checkpoint file; returns it plus the stored step.
  static std::pair<Detector, std::int64_t> load_checkpoint(const std::filesystem::path& path) {
    auto [step, header] = peek_checkpoint(path);
    ModelConfig mc;
    const auto& jm = header.at("model");
    mc.image_size = jm.at("image_size").get<int>();
    const auto ch = jm.at("conv_channels").get<std::vector<int>>();
    if (ch.size() != 4) throw std::runtime_error("load_checkpoint: bad conv_channels");
    std::copy(ch.begin(), ch.end(), mc.conv_channels.begin());
    mc.rpn_channels = jm.at("rpn_channels").get<int>();
    mc.fc_width = jm.at("fc_width").get<int>();
    mc.roi_pool = jm.at("roi_pool").get<int>();
    AnchorConfig ac;
    const auto& ja = header.at("anchors");
    ac.sizes = ja.at("sizes").get<std::vector<double>>();
    ac.ratios = ja.at("ratios").get<std::vector<double>>();
    ac.train_pre_nms = ja.at("train_pre_nms").get<int>();
    ac.train_post_nms = ja.at("train_post_nms").get<int>();
    ac.test_pre_nms = ja.at("test_pre_nms").get<int>();
    ac.test_post_nms = ja.at("test_post_nms").get<int>();
    ac.nms_threshold = ja.at("nms_threshold").get<double>();
    ac.min_proposal_size = ja.at("min_proposal_size").get<double>();

    Detector det(mc, ac, /*init_seed=*/0);

    std::ifstream in(path, std::ios::binary);
    in.seekg(8 + std::streamoff(sizeof(std::uint32_t)));
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    in.seekg(std::streamoff(hlen), std::ios::cur);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != det.params_.size()) {
      throw std::runtime_error("load_checkpoint: tensor count mismatch");
    }
    for (std::size_t i = 0; i < det.params_.size(); ++i) {
      auto& p = det.params_[i];
      const auto& t = tensors[i];
      if (t.at("name").get<std::string>() != p.name ||
          t.at("rows").get<Eigen::Index>() != p.value.rows() ||
          t.at("cols").get<Eigen::Index>() != p.value.cols()) {
        throw std::runtime_error("load_checkpoint: tensor layout mismatch at " + p.name);
      }
      for (Mat* m : {&p.value, &p.m, &p.v}) {
        in.read(reinterpret_cast<char*>(m->data()),
                std::streamsize(sizeof(double) * std::size_t(m->size())));
      }
    }
    if (!in) throw std::runtime_error("load_checkpoint: truncated tensor data");
    return {std::move(det), step};
  }

 private:
  static std::string conv_name(int block) { return "conv" + std::to_string(block + 1); }

  ModelConfig model_;
  AnchorConfig anchors_cfg_;
  std::vector<Param> params_;
  std::vector<BoundingBox> anchors_;
};

// ---------------------------------------------------------------------------
// strong-supervision losses (the four published terms)

struct StrongLosses {
  double rpn_cls = 0.0;
  double rpn_reg = 0.0;
  double head_cls = 0.0;
  double head_reg = 0.0;

  double total() const { return rpn_cls + rpn_reg + head_cls + head_reg; }
};

/// RPN losses over a sampled anchor minibatch. Writes gradients for the full
/// logit/delta maps into g_cls / g_reg when non-null (zero-initialized by the
/// caller).
inline std::pair<double, double> rpn_losses(const Detector& det, const Detector::RpnCache& cache,
                                            const TargetAssignment& asg,
                                            const std::vector<int>& sampled, Mat* g_cls,
                                            Mat* g_reg) {
  const int a_per_cell = det.anchor_config().anchors_per_cell();
  const auto n = sampled.size();
  if (n == 0) return {0.0, 0.0};

  Mat logits(Eigen::Index(n), 2);
  std::vector<int> targets(n);
  std::vector<double> weights(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int idx = sampled[i];
    const int p = idx / a_per_cell, a = idx % a_per_cell;
    logits(Eigen::Index(i), 0) = cache.cls_logits(2 * a + 0, p);
    logits(Eigen::Index(i), 1) = cache.cls_logits(2 * a + 1, p);
    targets[i] = asg.positive[std::size_t(idx)] ? 1 : 0;
  }
  Mat dlogits = Mat::Zero(Eigen::Index(n), 2);
  const double cls_loss = cross_entropy_rows(logits, targets, weights, g_cls ? &dlogits : nullptr);
  if (g_cls) {
    for (std::size_t i = 0; i < n; ++i) {
      const int idx = sampled[i];
      const int p = idx / a_per_cell, a = idx % a_per_cell;
      (*g_cls)(2 * a + 0, p) += dlogits(Eigen::Index(i), 0);
      (*g_cls)(2 * a + 1, p) += dlogits(Eigen::Index(i), 1);
    }
  }

  double reg_loss = 0.0;
  int n_pos = 0;
  for (const int idx : sampled) n_pos += asg.positive[std::size_t(idx)] ? 1 : 0;
  if (n_pos > 0) {
    for (const int idx : sampled) {
      if (!asg.positive[std::size_t(idx)]) continue;
      const int p = idx / a_per_cell, a = idx % a_per_cell;
      for (int k = 0; k < 4; ++k) {
        const double diff = cache.reg_deltas(4 * a + k, p) - asg.reg_target[std::size_t(idx)][k];
        reg_loss += smooth_l1(diff);
        if (g_reg) (*g_reg)(4 * a + k, p) += smooth_l1_grad(diff) / double(n_pos);
      }
    }
    reg_loss /= double(n_pos);
  }
  return {cls_loss, reg_loss};
}

/// Head losses over the sampled RoIs that were fed to head_forward.
/// labels[i] is the class index (0 = background); positives additionally carry
/// reg_targets[i]. Writes d loss / d logits and d loss / d deltas when asked.
inline std::pair<double, double> head_losses(const Detector::HeadCache& cache,
                                             const std::vector<int>& labels,
                                             const std::vector<std::array<double, 4>>& reg_targets,
                                             Mat* g_logits, Mat* g_deltas) {
  const auto n = std::size_t(cache.cls_logits.rows());
  if (labels.size() != n || reg_targets.size() != n) {
    throw std::invalid_argument("head_losses: size mismatch");
  }
  std::vector<double> weights(n, 1.0);
  Mat dlogits = Mat::Zero(Eigen::Index(n), kNumClasses);
  const double cls_loss =
      cross_entropy_rows(cache.cls_logits, labels, weights, g_logits ? &dlogits : nullptr);
  if (g_logits) *g_logits += dlogits;

  double reg_loss = 0.0;
  int n_pos = 0;
  for (const int c : labels) n_pos += c > 0 ? 1 : 0;
  if (n_pos > 0) {
    for (std::size_t i = 0; i < n; ++i) {
      const int c = labels[i];
      if (c == 0) continue;
      for (int k = 0; k < 4; ++k) {
        const double diff = cache.deltas(Eigen::Index(i), 4 * c + k) - reg_targets[i][k];
        reg_loss += smooth_l1(diff);
        if (g_deltas) (*g_deltas)(Eigen::Index(i), 4 * c + k) += smooth_l1_grad(diff) / double(n_pos);
      }
    }
    reg_loss /= double(n_pos);
  }
  return {cls_loss, reg_loss};
}

}  // namespace wsdet
