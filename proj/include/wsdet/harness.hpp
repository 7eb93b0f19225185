// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "wsdet/active.hpp"
#include "wsdet/data.hpp"
#include "wsdet/detector.hpp"
#include "wsdet/metrics.hpp"
#include "wsdet/schedule.hpp"
#include "wsdet/synth.hpp"
#include "wsdet/weak.hpp"

namespace wsdet {

namespace detail {
template <class T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
inline void get_path_if(const nlohmann::json& j, const char* key, std::filesystem::path& out) {
  if (j.contains(key)) out = j.at(key).get<std::string>();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// configs

struct TrainConfig {
  std::filesystem::path strong_manifest;
  std::filesystem::path weak_manifest;
  std::filesystem::path out_dir = "run";
  std::int64_t total_steps = 2000;
  AlphaSchedule schedule{ScheduleKind::polynomial, 16};
  std::uint64_t seed = 1;
  AdamConfig optimizer;
  ModelConfig model;
  AnchorConfig anchors;
  bool class_weighting = true;
  bool augmentation = true;
  double jitter_strength = 0.10;
  bool freeze_backbone = false;
  int rpn_batch = 32;
  double rpn_fg_fraction = 0.5;
  int roi_batch = 16;
  double roi_fg_fraction = 0.25;
  std::int64_t checkpoint_every = 1000;
  std::optional<std::filesystem::path> resume_from;

  void validate() const {
    if (total_steps <= 0) throw std::invalid_argument("TrainConfig: total_steps must be positive");
    if (!std::filesystem::exists(strong_manifest)) {
      throw std::invalid_argument("TrainConfig: strong manifest not found: " +
                                  strong_manifest.string());
    }
    if (!std::filesystem::exists(weak_manifest)) {
      throw std::invalid_argument("TrainConfig: weak manifest not found: " +
                                  weak_manifest.string());
    }
    if (rpn_batch <= 0 || roi_batch <= 0) {
      throw std::invalid_argument("TrainConfig: minibatch sizes must be positive");
    }
    if (checkpoint_every <= 0) {
      throw std::invalid_argument("TrainConfig: checkpoint_every must be positive");
    }
    model.validate();
    anchors.validate();
  }

  nlohmann::json to_json() const {
    return {{"strong_manifest", strong_manifest.string()},
            {"weak_manifest", weak_manifest.string()},
            {"out_dir", out_dir.string()},
            {"total_steps", total_steps},
            {"schedule", to_string(schedule)},
            {"seed", seed},
            {"learning_rate", optimizer.learning_rate},
            {"class_weighting", class_weighting},
            {"augmentation", augmentation},
            {"jitter_strength", jitter_strength},
            {"freeze_backbone", freeze_backbone},
            {"rpn_batch", rpn_batch},
            {"rpn_fg_fraction", rpn_fg_fraction},
            {"roi_batch", roi_batch},
            {"roi_fg_fraction", roi_fg_fraction},
            {"checkpoint_every", checkpoint_every},
            {"image_size", model.image_size},
            {"conv_channels", model.conv_channels},
            {"rpn_channels", model.rpn_channels},
            {"fc_width", model.fc_width},
            {"roi_pool", model.roi_pool},
            {"anchor_sizes", anchors.sizes},
            {"anchor_ratios", anchors.ratios}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    detail::get_path_if(j, "strong_manifest", c.strong_manifest);
    detail::get_path_if(j, "weak_manifest", c.weak_manifest);
    detail::get_path_if(j, "out_dir", c.out_dir);
    detail::get_if(j, "total_steps", c.total_steps);
    if (j.contains("schedule")) c.schedule = parse_schedule(j.at("schedule").get<std::string>());
    if (j.contains("exponent")) {
      c.schedule.exponent = j.at("exponent").get<int>();
    }
    detail::get_if(j, "seed", c.seed);
    detail::get_if(j, "learning_rate", c.optimizer.learning_rate);
    detail::get_if(j, "class_weighting", c.class_weighting);
    detail::get_if(j, "augmentation", c.augmentation);
    detail::get_if(j, "jitter_strength", c.jitter_strength);
    detail::get_if(j, "freeze_backbone", c.freeze_backbone);
    detail::get_if(j, "rpn_batch", c.rpn_batch);
    detail::get_if(j, "rpn_fg_fraction", c.rpn_fg_fraction);
    detail::get_if(j, "roi_batch", c.roi_batch);
    detail::get_if(j, "roi_fg_fraction", c.roi_fg_fraction);
    detail::get_if(j, "checkpoint_every", c.checkpoint_every);
    detail::get_if(j, "image_size", c.model.image_size);
    if (j.contains("conv_channels")) {
      const auto ch = j.at("conv_channels").get<std::vector<int>>();
      if (ch.size() != 4) throw std::invalid_argument("conv_channels must have 4 entries");
      std::copy(ch.begin(), ch.end(), c.model.conv_channels.begin());
    }
    detail::get_if(j, "rpn_channels", c.model.rpn_channels);
    detail::get_if(j, "fc_width", c.model.fc_width);
    detail::get_if(j, "roi_pool", c.model.roi_pool);
    detail::get_if(j, "anchor_sizes", c.anchors.sizes);
    detail::get_if(j, "anchor_ratios", c.anchors.ratios);
    if (j.contains("resume_from")) c.resume_from = j.at("resume_from").get<std::string>();
    return c;
  }
};

struct EvalConfig {
  std::filesystem::path test_manifest;
  double score_threshold = 0.5;       // CorLoc / fraction operating point
  double map_score_threshold = 0.05;  // detections kept for ranking mAP
  double nms_threshold = 0.5;
  double iou_threshold = 0.5;
  MapConvention map_convention = MapConvention::continuous;

  static EvalConfig from_json(const nlohmann::json& j) {
    EvalConfig c;
    detail::get_path_if(j, "test_manifest", c.test_manifest);
    detail::get_if(j, "score_threshold", c.score_threshold);
    detail::get_if(j, "map_score_threshold", c.map_score_threshold);
    detail::get_if(j, "nms_threshold", c.nms_threshold);
    detail::get_if(j, "iou_threshold", c.iou_threshold);
    if (j.contains("map_convention")) {
      const auto s = j.at("map_convention").get<std::string>();
      if (s == "continuous") c.map_convention = MapConvention::continuous;
      else if (s == "eleven_point") c.map_convention = MapConvention::eleven_point;
      else throw std::invalid_argument("unknown map_convention: " + s);
    }
    return c;
  }
};

inline ActiveSelectionConfig active_config_from_json(const nlohmann::json& j) {
  ActiveSelectionConfig c;
  detail::get_if(j, "score_threshold", c.score_threshold);
  detail::get_if(j, "nms_threshold", c.nms_threshold);
  detail::get_if(j, "pair_iou_threshold", c.pair_iou_threshold);
  if (j.contains("class_filter")) {
    c.class_filter.clear();
    for (const auto& s : j.at("class_filter")) {
      c.class_filter.insert(label_from_string(s.get<std::string>()));
    }
  }
  return c;
}

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  SyntheticConfig c;
  detail::get_if(j, "image_size", c.image_size);
  if (j.contains("strong_counts")) {
    const auto v = j.at("strong_counts").get<std::vector<int>>();
    if (v.size() != 2) throw std::invalid_argument("strong_counts must have 2 entries");
    c.strong_counts = {v[0], v[1]};
  }
  detail::get_if(j, "weak_total", c.weak_total);
  detail::get_if(j, "weak_ratio", c.weak_ratio);
  if (j.contains("test_counts")) {
    const auto v = j.at("test_counts").get<std::vector<int>>();
    if (v.size() != 2) throw std::invalid_argument("test_counts must have 2 entries");
    c.test_counts = {v[0], v[1]};
  }
  detail::get_if(j, "noise_strength", c.noise_strength);
  detail::get_if(j, "lesion_frac_min", c.lesion_frac_min);
  detail::get_if(j, "lesion_frac_max", c.lesion_frac_max);
  detail::get_if(j, "seed", c.seed);
  return c;
}

// ---------------------------------------------------------------------------
// training

struct StepStats {
  std::int64_t step = 0;
  double alpha = 0.0;
  StrongLosses strong;
  double weak = 0.0;
  bool weak_skipped = false;  // empty proposal set on the weak image
  double total = 0.0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"alpha", alpha},
            {"l_cls_rpn", strong.rpn_cls},
            {"l_reg_rpn", strong.rpn_reg},
            {"l_cls_head", strong.head_cls},
            {"l_reg_head", strong.head_reg},
            {"l_weak", weak},
            {"weak_skipped", weak_skipped},
            {"l_total", total}};
  }
};

/// Owns one training run: detector state, image cache, and the per-step
/// pipeline. All per-step randomness is keyed by (seed, purpose, step), so a
/// resumed run replays the exact same sequence.
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    strong_ = load_manifest(cfg.strong_manifest, Split::train_strong);
    weak_ = load_manifest(cfg.weak_manifest, Split::train_weak);
    if (strong_.samples.empty()) throw std::invalid_argument("Trainer: empty strong manifest");
    if (weak_.samples.empty()) throw std::invalid_argument("Trainer: empty weak manifest");
    strong_dir_ = cfg.strong_manifest.parent_path();
    weak_dir_ = cfg.weak_manifest.parent_path();
    if (cfg.class_weighting) weights_ = class_weights(weak_);

    const std::size_t n_eff = strong_.samples.size() * (cfg.augmentation ? 2 : 1);
    strong_stream_.emplace(n_eff, derive_seed(cfg.seed, "strong_stream"));
    weak_stream_.emplace(weak_.samples.size(), derive_seed(cfg.seed, "weak_stream"));

    if (cfg.resume_from) {
      auto [det, step] = Detector::load_checkpoint(*cfg.resume_from);
      detector_.emplace(std::move(det));
      step_ = step;
    } else {
      detector_.emplace(cfg.model, cfg.anchors, derive_seed(cfg.seed, "init"));
      step_ = 0;
    }
  }

  std::int64_t step() const { return step_; }
  Detector& detector() { return *detector_; }
  const TrainConfig& config() const { return cfg_; }

  /// Computes all losses at the current parameters for the current step
  /// without touching them; include_weak = false zeroes the weak sample's
  /// contribution. Used by the loss-routing instrumentation.
  StepStats probe(bool include_weak) { return run_step(include_weak, /*apply_update=*/false); }

  /// One full optimization step.
  StepStats advance() {
    StepStats stats = run_step(/*include_weak=*/true, /*apply_update=*/true);
    ++step_;
    return stats;
  }

 private:
  StepStats run_step(bool include_weak, bool apply_update) {
    const std::int64_t s = step_;
    StepStats stats;
    stats.step = s;
    stats.alpha = alpha_at(cfg_.schedule, s, cfg_.total_steps);

    Detector& det = *detector_;
    det.zero_grads();

    // ----- strong sample ------------------------------------------------
    const std::size_t draw = strong_stream_->at(std::uint64_t(s));
    const std::size_t n_strong = strong_.samples.size();
    const Sample& ssample = strong_.samples[draw % n_strong];
    const bool flip = cfg_.augmentation && draw >= n_strong;
    LoadedSample strong_img = cached_sample(ssample, strong_dir_);
    if (cfg_.augmentation) {
      Rng aug_rng(derive_seed(cfg_.seed, "augment", std::uint64_t(s)));
      strong_img = augment_strong(strong_img, flip, aug_rng, cfg_.jitter_strength);
    }
    const Annotation gt{*strong_img.box, strong_img.label};

    Detector::BackboneCache bb;
    const Mat features = det.backbone_forward(det.image_to_input(strong_img.image), bb);
    Detector::RpnCache rpn;
    det.rpn_forward(features, rpn);

    // RPN targets over the anchor grid
    const TargetAssignment anchor_asg = assign_targets(det.anchors(), gt, 0.5);
    Rng rpn_rng(derive_seed(cfg_.seed, "rpn_sample", std::uint64_t(s)));
    const std::vector<int> rpn_sampled =
        sample_minibatch(anchor_asg, cfg_.rpn_batch, cfg_.rpn_fg_fraction, rpn_rng);
    Mat g_rpn_cls = Mat::Zero(rpn.cls_logits.rows(), rpn.cls_logits.cols());
    Mat g_rpn_reg = Mat::Zero(rpn.reg_deltas.rows(), rpn.reg_deltas.cols());
    const auto [rpn_cls, rpn_reg] =
        rpn_losses(det, rpn, anchor_asg, rpn_sampled, &g_rpn_cls, &g_rpn_reg);
    stats.strong.rpn_cls = rpn_cls;
    stats.strong.rpn_reg = rpn_reg;

    // head targets over proposals
    const RoIBatch proposals = det.propose(rpn, /*training=*/true);
    const TargetAssignment roi_asg = assign_targets(proposals.rois, gt, 0.5);
    Rng roi_rng(derive_seed(cfg_.seed, "roi_sample", std::uint64_t(s)));
    const std::vector<int> roi_sampled =
        sample_minibatch(roi_asg, cfg_.roi_batch, cfg_.roi_fg_fraction, roi_rng);

    std::vector<BoundingBox> sampled_rois;
    std::vector<int> labels;
    std::vector<std::array<double, 4>> reg_targets;
    for (const int idx : roi_sampled) {
      sampled_rois.push_back(proposals.rois[std::size_t(idx)]);
      labels.push_back(roi_asg.positive[std::size_t(idx)] ? int(gt.label) : 0);
      reg_targets.push_back(roi_asg.reg_target[std::size_t(idx)]);
    }
    Detector::HeadCache head;
    det.head_forward(features, sampled_rois, head);
    Mat g_logits = Mat::Zero(head.cls_logits.rows(), head.cls_logits.cols());
    Mat g_deltas = Mat::Zero(head.deltas.rows(), head.deltas.cols());
    const auto [head_cls, head_reg] = head_losses(head, labels, reg_targets, &g_logits, &g_deltas);
    stats.strong.head_cls = head_cls;
    stats.strong.head_reg = head_reg;

    Mat g_features = Mat::Zero(features.rows(), features.cols());
    det.head_backward(g_logits, g_deltas, head, g_features);
    det.rpn_backward(g_rpn_cls, g_rpn_reg, rpn, g_features);
    det.backbone_backward(g_features, bb);

    // ----- weak sample ----------------------------------------------------
    const Sample& wsample = weak_.samples[weak_stream_->at(std::uint64_t(s))];
    const LoadedSample weak_img = cached_sample(wsample, weak_dir_);

    Detector::BackboneCache wbb;
    const Mat wfeatures = det.backbone_forward(det.image_to_input(weak_img.image), wbb);
    Detector::RpnCache wrpn;
    det.rpn_forward(wfeatures, wrpn);
    const RoIBatch wproposals = det.propose(wrpn, /*training=*/true);
    if (wproposals.rois.empty()) {
      stats.weak_skipped = true;
      stats.weak = 0.0;
    } else {
      Detector::HeadCache whead;
      det.head_forward(wfeatures, wproposals.rois, whead);
      const ClassScores scores = det.class_scores(whead);
      const WeakTarget target = select_weak_target(scores, weak_img.label, weights_);
      Mat g_wlogits = Mat::Zero(whead.cls_logits.rows(), whead.cls_logits.cols());
      stats.weak = weak_loss_from_logits(whead.cls_logits, target, &g_wlogits);
      if (include_weak) {
        g_wlogits *= stats.alpha;
        Mat g_wdeltas = Mat::Zero(whead.deltas.rows(), whead.deltas.cols());
        Mat g_wfeatures = Mat::Zero(wfeatures.rows(), wfeatures.cols());
        det.head_backward(g_wlogits, g_wdeltas, whead, g_wfeatures);
        det.backbone_backward(g_wfeatures, wbb);
      }
    }

    const double weak_term = include_weak ? stats.weak : 0.0;
    stats.total = stats.strong.total() + stats.alpha * weak_term;
    if (!std::isfinite(stats.total)) {
      const auto snap = cfg_.out_dir / ("diagnostic_step" + std::to_string(s) + ".ckpt");
      std::filesystem::create_directories(cfg_.out_dir);
      detector_->save_checkpoint(snap, s, cfg_.to_json());
      throw std::runtime_error("Trainer: non-finite loss at step " + std::to_string(s) +
                               "; diagnostic snapshot written to " + snap.string());
    }

    if (apply_update) {
      const std::int64_t t = s + 1;
      for (Param* p : det.parameters()) {
        if (cfg_.freeze_backbone && p->name.starts_with("conv")) continue;
        adam_step(*p, cfg_.optimizer, t);
      }
    }
    return stats;
  }

  LoadedSample cached_sample(const Sample& s, const std::filesystem::path& dir) {
    auto it = image_cache_.find(s.image_id);
    if (it == image_cache_.end()) {
      it = image_cache_.emplace(s.image_id, load_sample(s, dir)).first;
    }
    return it->second;
  }

  TrainConfig cfg_;
  DatasetManifest strong_, weak_;
  std::filesystem::path strong_dir_, weak_dir_;
  ClassWeights weights_;
  std::optional<CycleStream> strong_stream_, weak_stream_;
  std::optional<Detector> detector_;
  std::int64_t step_ = 0;
  std::map<std::string, LoadedSample> image_cache_;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path step_log;
  std::int64_t steps_run = 0;
};

/// Full training run: step loop, append-only JSONL step log, checkpoints at
/// the configured cadence and at the end.
inline TrainResult train(const TrainConfig& cfg) {
  Trainer trainer(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  const auto log_path = cfg.out_dir / "steps.jsonl";
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("train: cannot open step log " + log_path.string());

  const auto ckpt_name = [&](std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "checkpoint_%06lld.ckpt", static_cast<long long>(step));
    return cfg.out_dir / buf;
  };

  std::int64_t steps_run = 0;
  while (trainer.step() < cfg.total_steps) {
    const StepStats stats = trainer.advance();
    log << stats.to_json().dump() << '\n';
    ++steps_run;
    if (trainer.step() % cfg.checkpoint_every == 0 && trainer.step() < cfg.total_steps) {
      trainer.detector().save_checkpoint(ckpt_name(trainer.step()), trainer.step(), cfg.to_json());
    }
  }
  log.flush();
  if (!log) throw std::runtime_error("train: step log write failed");

  const auto final_path = cfg.out_dir / "checkpoint_final.ckpt";
  trainer.detector().save_checkpoint(final_path, trainer.step(), cfg.to_json());
  return {final_path, log_path, steps_run};
}

// ---------------------------------------------------------------------------
// evaluation composition

/// Runs inference over the test manifest and assembles the metric suite.
/// Detections are collected at the looser mAP threshold; CorLoc and fraction
/// are computed on the subset above score_threshold.
inline MetricsReport evaluate(Detector& det, const DatasetManifest& test,
                              const std::filesystem::path& manifest_dir, const EvalConfig& cfg,
                              std::vector<ImageDetections>* dump_out = nullptr) {
  validate_manifest(test);
  if (test.split != Split::test) throw std::invalid_argument("evaluate: manifest is not a test split");
  const double base_threshold = std::min(cfg.score_threshold, cfg.map_score_threshold);

  std::vector<ImageDetections> low, high;
  GtMap gts;
  for (const auto& sample : test.samples) {
    const LoadedSample loaded = load_sample(sample, manifest_dir);
    gts[sample.image_id] = Annotation{*loaded.box, loaded.label};
    const auto dets = det.detect(loaded.image, base_threshold, cfg.nms_threshold);
    ImageDetections lo{sample.image_id, {}}, hi{sample.image_id, {}};
    for (const auto& d : dets) {
      if (d.score > cfg.map_score_threshold) lo.detections.push_back(d);
      if (d.score > cfg.score_threshold) hi.detections.push_back(d);
    }
    low.push_back(std::move(lo));
    high.push_back(std::move(hi));
  }

  MetricsReport report;
  report.corloc = corloc(high, gts, cfg.iou_threshold);
  report.fraction_detected = fraction_detected(high, gts, cfg.iou_threshold);
  report.map = mean_average_precision(low, gts, cfg.iou_threshold, cfg.map_convention);
  report.per_image = match_all(high, gts, cfg.iou_threshold);
  for (const auto& img : low) report.detection_count += img.detections.size();
  report.iou_threshold = cfg.iou_threshold;
  report.score_threshold = cfg.score_threshold;
  report.map_score_threshold = cfg.map_score_threshold;
  report.map_convention = cfg.map_convention;
  if (dump_out) *dump_out = low;
  return report;
}

inline MetricsReport evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                         const EvalConfig& cfg,
                                         std::vector<ImageDetections>* dump_out = nullptr) {
  auto [det, step] = Detector::load_checkpoint(checkpoint);
  const auto test = load_manifest(cfg.test_manifest, Split::test);
  return evaluate(det, test, cfg.test_manifest.parent_path(), cfg, dump_out);
}

// ---------------------------------------------------------------------------
// active round

struct ActiveRoundResult {
  DatasetManifest merged;
  ActiveSelection selection;
  std::map<ClassLabel, std::size_t> added_per_class;
};

/// Builds D_active from the weak manifest with the given checkpointed model
/// and concatenates it onto the strong manifest. An empty selection warns and
/// passes the base manifest through.
inline ActiveRoundResult active_round(Detector& det, const DatasetManifest& weak,
                                      const std::filesystem::path& weak_dir,
                                      const DatasetManifest& strong,
                                      const ActiveSelectionConfig& cfg) {
  ActiveRoundResult out;
  out.selection = build_active_set(det, weak, weak_dir, cfg);
  if (out.selection.active.samples.empty()) {
    std::cerr << "warning: active_round: no double predictions survived curation; "
                 "strong set unchanged\n";
    out.merged = strong;
    return out;
  }
  for (const auto& s : out.selection.active.samples) ++out.added_per_class[s.label];
  out.merged = merge_strong(strong, out.selection.active);
  return out;
}

// ---------------------------------------------------------------------------
// schedule study (the published comparison, desk scale)

struct StudyConfig {
  TrainConfig base;
  EvalConfig eval;
  std::vector<AlphaSchedule> schedules = published_schedules();
  std::vector<std::uint64_t> seeds{1, 2, 3};
  bool active_after_best = true;
  ActiveSelectionConfig active;
  std::filesystem::path out_dir = "study";
  int threads = int(std::thread::hardware_concurrency());
};

struct StudyRun {
  std::uint64_t seed = 0;
  MetricsReport report;
  std::filesystem::path checkpoint;
};

struct StudyRow {
  AlphaSchedule schedule;
  std::vector<StudyRun> runs;

  double mean_corloc() const {
    double s = 0.0;
    for (const auto& r : runs) s += r.report.corloc;
    return runs.empty() ? 0.0 : s / double(runs.size());
  }
  double mean_fraction() const {
    double s = 0.0;
    for (const auto& r : runs) s += r.report.fraction_detected;
    return runs.empty() ? 0.0 : s / double(runs.size());
  }
};

struct ExperimentReport {
  std::vector<StudyRow> rows;
  std::optional<MetricsReport> before_active;
  std::optional<MetricsReport> after_active;
  std::size_t active_added = 0;
  AlphaSchedule best_schedule;
  nlohmann::json config_echo;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& row : rows) {
      nlohmann::json runs_json = nlohmann::json::array();
      for (const auto& run : row.runs) {
        runs_json.push_back({{"seed", run.seed},
                             {"checkpoint", run.checkpoint.string()},
                             {"metrics", run.report.to_json()}});
      }
      double lo = 1e300, hi = -1e300;
      for (const auto& run : row.runs) {
        lo = std::min(lo, run.report.corloc);
        hi = std::max(hi, run.report.corloc);
      }
      rows_json.push_back({{"schedule", to_string(row.schedule)},
                           {"formula", formula_string(row.schedule)},
                           {"mean_corloc", row.mean_corloc()},
                           {"min_corloc", row.runs.empty() ? 0.0 : lo},
                           {"max_corloc", row.runs.empty() ? 0.0 : hi},
                           {"mean_fraction_detected", row.mean_fraction()},
                           {"runs", runs_json}});
    }
    nlohmann::json j{{"rows", rows_json},
                     {"best_schedule", to_string(best_schedule)},
                     {"config", config_echo},
                     {"wall_seconds", wall_seconds}};
    if (before_active) j["before_active"] = before_active->to_json();
    if (after_active) j["after_active"] = after_active->to_json();
    j["active_added"] = active_added;
    return j;
  }
};

/// Trains one model per (schedule, seed), evaluates each, and optionally runs
/// the active-learning round on the best schedule's first-seed checkpoint
/// followed by a from-scratch retrain on the merged strong set. Rows keep the
/// published ordering. Independent runs execute as parallel threads; each run
/// is internally single-threaded and fully deterministic.
inline ExperimentReport run_schedule_study(const StudyConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentReport report;
  report.config_echo = {{"base", cfg.base.to_json()},
                        {"seeds", cfg.seeds},
                        {"out_dir", cfg.out_dir.string()}};

  struct Job {
    AlphaSchedule schedule;
    std::uint64_t seed;
    std::size_t row, slot;
  };
  std::vector<Job> jobs;
  report.rows.resize(cfg.schedules.size());
  for (std::size_t i = 0; i < cfg.schedules.size(); ++i) {
    report.rows[i].schedule = cfg.schedules[i];
    report.rows[i].runs.resize(cfg.seeds.size());
    for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
      jobs.push_back({cfg.schedules[i], cfg.seeds[k], i, k});
    }
  }

  std::vector<std::string> failures(jobs.size());
  const int threads = std::max(1, cfg.threads);
  std::size_t next = 0;
  while (next < jobs.size()) {
    std::vector<std::thread> pool;
    const std::size_t batch = std::min<std::size_t>(std::size_t(threads), jobs.size() - next);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t job_index = next + b;
      pool.emplace_back([&, job_index]() {
        const Job& job = jobs[job_index];
        try {
          TrainConfig run_cfg = cfg.base;
          run_cfg.schedule = job.schedule;
          run_cfg.seed = job.seed;
          run_cfg.out_dir =
              cfg.out_dir / (to_string(job.schedule) + "_seed" + std::to_string(job.seed));
          const TrainResult result = train(run_cfg);
          StudyRun run;
          run.seed = job.seed;
          run.checkpoint = result.checkpoint;
          run.report = evaluate_checkpoint(result.checkpoint, cfg.eval);
          report.rows[job.row].runs[job.slot] = std::move(run);
        } catch (const std::exception& e) {
          failures[job_index] = e.what();
        }
      });
    }
    for (auto& t : pool) t.join();
    next += batch;
  }
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!failures[i].empty()) {
      throw std::runtime_error("run_schedule_study: run '" + to_string(jobs[i].schedule) +
                               "' seed " + std::to_string(jobs[i].seed) +
                               " failed: " + failures[i]);
    }
  }

  std::size_t best = 0;
  for (std::size_t i = 1; i < report.rows.size(); ++i) {
    if (report.rows[i].mean_corloc() > report.rows[best].mean_corloc()) best = i;
  }
  report.best_schedule = report.rows[best].schedule;

  if (cfg.active_after_best && !report.rows[best].runs.empty()) {
    const StudyRun& base_run = report.rows[best].runs.front();
    report.before_active = base_run.report;

    auto [det, step] = Detector::load_checkpoint(base_run.checkpoint);
    const auto weak = load_manifest(cfg.base.weak_manifest, Split::train_weak);
    const auto strong = load_manifest(cfg.base.strong_manifest, Split::train_strong);
    const auto round =
        active_round(det, weak, cfg.base.weak_manifest.parent_path(), strong, cfg.active);
    report.active_added = round.selection.active.samples.size();

    std::filesystem::create_directories(cfg.out_dir);
    // merged manifest lives next to the originals so relative image paths
    // keep resolving
    const auto merged_in_place = cfg.base.strong_manifest.parent_path() /
                                 ("train_strong_merged_" + to_string(report.best_schedule) +
                                  "_seed" + std::to_string(base_run.seed) + ".jsonl");
    write_manifest(round.merged, merged_in_place);

    TrainConfig retrain_cfg = cfg.base;
    retrain_cfg.schedule = report.best_schedule;
    retrain_cfg.seed = base_run.seed;
    retrain_cfg.strong_manifest = merged_in_place;
    retrain_cfg.out_dir = cfg.out_dir / "after_active";
    const TrainResult retrained = train(retrain_cfg);
    report.after_active = evaluate_checkpoint(retrained.checkpoint, cfg.eval);
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

/// Table-2-shaped text rendering of a study report.
inline std::string render_study_table(const nlohmann::json& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %12s %12s %12s\n", "alpha schedule", "CorLoc[%]",
                "Frac[%]", "mAP[%]");
  out += line;
  out += std::string(68, '-') + "\n";
  for (const auto& row : report.at("rows")) {
    double map_mean = 0.0;
    std::size_t n = 0;
    for (const auto& run : row.at("runs")) {
      if (run.at("metrics").contains("map")) {
        map_mean += run.at("metrics").at("map").get<double>();
        ++n;
      }
    }
    std::snprintf(line, sizeof line, "%-28s %12.2f %12.2f %12.2f\n",
                  row.at("schedule").get<std::string>().c_str(),
                  row.at("mean_corloc").get<double>(),
                  row.at("mean_fraction_detected").get<double>(),
                  n ? map_mean / double(n) : 0.0);
    out += line;
  }
  if (report.contains("before_active") && report.contains("after_active")) {
    out += "\nactive learning (best schedule: " +
           report.at("best_schedule").get<std::string>() + ", +" +
           std::to_string(report.at("active_added").get<std::size_t>()) + " images)\n";
    std::snprintf(line, sizeof line, "%-28s %12s %12s %12s\n", "", "CorLoc[%]", "Frac[%]",
                  "mAP[%]");
    out += line;
    for (const char* key : {"before_active", "after_active"}) {
      const auto& m = report.at(key);
      std::snprintf(line, sizeof line, "%-28s %12.2f %12.2f %12.2f\n", key,
                    m.at("corloc").get<double>(), m.at("fraction_detected").get<double>(),
                    m.contains("map") ? m.at("map").get<double>() : 0.0);
      out += line;
    }
  }
  return out;
}

}  // namespace wsdet
