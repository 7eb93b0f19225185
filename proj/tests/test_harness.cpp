// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loop bookkeeping: logs, determinism, resume, loss routing, and the
// evaluate/active-round compositions.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "wsdet/harness.hpp"

using namespace wsdet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("wsdet_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Tiny dataset + model so a training step costs ~a millisecond.
struct Fixture {
  fs::path data_dir;
  TrainConfig cfg;

  explicit Fixture(const std::string& name, std::uint64_t data_seed = 5) {
    data_dir = temp_dir(name + "_data");
    SyntheticConfig scfg;
    scfg.image_size = 32;
    scfg.strong_counts = {3, 3};
    scfg.weak_total = 9;
    scfg.test_counts = {2, 2};
    scfg.seed = data_seed;
    generate_synthetic(scfg, data_dir);

    cfg.strong_manifest = data_dir / "train_strong.jsonl";
    cfg.weak_manifest = data_dir / "train_weak.jsonl";
    cfg.out_dir = temp_dir(name + "_run");
    cfg.total_steps = 10;
    cfg.seed = 3;
    cfg.model.image_size = 32;
    cfg.model.conv_channels = {2, 3, 3, 4};
    cfg.model.rpn_channels = 4;
    cfg.model.fc_width = 12;
    cfg.model.roi_pool = 2;
    cfg.anchors.sizes = {8.0, 16.0};
    cfg.anchors.ratios = {1.0, 2.0};
    cfg.anchors.train_pre_nms = 32;
    cfg.anchors.train_post_nms = 8;
    cfg.anchors.test_pre_nms = 16;
    cfg.anchors.test_post_nms = 6;
    cfg.checkpoint_every = 5;
  }
};

std::vector<nlohmann::json> read_log(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in);
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
  }
  return rows;
}

}  // namespace

TEST_CASE("config validation fails before any work") {
  TrainConfig cfg;
  cfg.strong_manifest = "/nonexistent/strong.jsonl";
  cfg.weak_manifest = "/nonexistent/weak.jsonl";
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS_AS(Trainer(cfg), std::invalid_argument);

  Fixture fx("validate");
  auto bad = fx.cfg;
  bad.total_steps = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("step log has one row per step with the schedule's alpha column") {
  Fixture fx("log");
  fx.cfg.schedule = parse_schedule("polynomial:16");
  const auto result = train(fx.cfg);
  CHECK(result.steps_run == 10);
  const auto rows = read_log(result.step_log);
  REQUIRE(rows.size() == 10);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].at("step").get<std::int64_t>() == std::int64_t(i));
    CHECK(rows[i].at("alpha").get<double>() ==
          alpha_at(fx.cfg.schedule, std::int64_t(i), fx.cfg.total_steps));
    CHECK(rows[i].at("l_total").get<double>() >= 0.0);
  }
  CHECK(fs::exists(fx.cfg.out_dir / "checkpoint_000005.ckpt"));
  CHECK(fs::exists(fx.cfg.out_dir / "checkpoint_final.ckpt"));

  // constant schedule logs alpha = 1 everywhere
  Fixture fc("log_const");
  fc.cfg.schedule = parse_schedule("constant");
  const auto rc = train(fc.cfg);
  for (const auto& row : read_log(rc.step_log)) CHECK(row.at("alpha").get<double>() == 1.0);
}

TEST_CASE("identical config and seed give byte-identical step logs") {
  Fixture a("det_a"), b("det_b");
  b.cfg.strong_manifest = a.cfg.strong_manifest;  // same data
  b.cfg.weak_manifest = a.cfg.weak_manifest;
  const auto ra = train(a.cfg);
  const auto rb = train(b.cfg);
  CHECK(slurp(ra.step_log) == slurp(rb.step_log));
  CHECK(slurp(ra.checkpoint) == slurp(rb.checkpoint));

  // a different seed diverges
  Fixture c("det_c");
  c.cfg.strong_manifest = a.cfg.strong_manifest;
  c.cfg.weak_manifest = a.cfg.weak_manifest;
  c.cfg.seed = 4;
  const auto rcfg = train(c.cfg);
  CHECK(slurp(ra.step_log) != slurp(rcfg.step_log));
}

TEST_CASE("resume from a checkpoint replays the straight run exactly") {
  Fixture straight("resume_straight");
  straight.cfg.total_steps = 10;
  const auto full = train(straight.cfg);
  const auto full_rows = read_log(full.step_log);

  Fixture split("resume_split");
  split.cfg.strong_manifest = straight.cfg.strong_manifest;
  split.cfg.weak_manifest = straight.cfg.weak_manifest;
  split.cfg.total_steps = 5;
  const auto first = train(split.cfg);

  TrainConfig second = split.cfg;
  second.total_steps = 10;
  second.out_dir = temp_dir("resume_second");
  second.resume_from = first.checkpoint;
  const auto rest = train(second);
  const auto rest_rows = read_log(rest.step_log);
  REQUIRE(rest_rows.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(rest_rows[i] == full_rows[5 + i]);
  }
  CHECK(slurp(rest.checkpoint) == slurp(full.checkpoint));
}

TEST_CASE("loss routing: disabling the weak term moves only the alpha-scaled part") {
  Fixture fx("routing");
  fx.cfg.schedule = parse_schedule("linear");
  Trainer trainer(fx.cfg);
  for (int k = 0; k < 4; ++k) trainer.advance();

  const StepStats with_weak = trainer.probe(true);
  const StepStats without = trainer.probe(false);
  CHECK(with_weak.strong.rpn_cls == without.strong.rpn_cls);
  CHECK(with_weak.strong.rpn_reg == without.strong.rpn_reg);
  CHECK(with_weak.strong.head_cls == without.strong.head_cls);
  CHECK(with_weak.strong.head_reg == without.strong.head_reg);
  CHECK(with_weak.alpha == without.alpha);
  CHECK_THAT(with_weak.total - without.total,
             Catch::Matchers::WithinAbs(with_weak.alpha * with_weak.weak, 1e-12));
}

TEST_CASE("evaluate composes detection, thresholds and the metric suite") {
  Fixture fx("eval");
  fx.cfg.total_steps = 4;
  const auto result = train(fx.cfg);
  auto [det, step] = Detector::load_checkpoint(result.checkpoint);
  CHECK(step == 4);

  const auto test = load_manifest(fx.data_dir / "test.jsonl", Split::test);
  EvalConfig ecfg;
  ecfg.test_manifest = fx.data_dir / "test.jsonl";

  std::vector<ImageDetections> dump;
  const MetricsReport r1 = evaluate(det, test, fx.data_dir, ecfg, &dump);
  const MetricsReport r2 = evaluate(det, test, fx.data_dir, ecfg);
  CHECK(r1.to_json() == r2.to_json());  // identical report on repeat
  CHECK(r1.per_image.size() == test.samples.size());
  CHECK(dump.size() == test.samples.size());
  CHECK(r1.corloc >= 0.0);
  CHECK(r1.corloc <= 100.0);
  CHECK(r1.corloc <= r1.fraction_detected);

  // a vacuous threshold suppresses everything
  EvalConfig vacuous = ecfg;
  vacuous.score_threshold = 1.01;
  vacuous.map_score_threshold = 1.01;
  const MetricsReport rv = evaluate(det, test, fx.data_dir, vacuous);
  CHECK(rv.corloc == 0.0);
  CHECK(rv.fraction_detected == 0.0);
  CHECK(rv.map.value() == 0.0);
  CHECK(rv.detection_count == 0);
}

TEST_CASE("active round merges or passes through") {
  Fixture fx("active_round");
  fx.cfg.total_steps = 4;
  const auto result = train(fx.cfg);
  auto [det, step] = Detector::load_checkpoint(result.checkpoint);
  const auto weak = load_manifest(fx.cfg.weak_manifest, Split::train_weak);
  const auto strong = load_manifest(fx.cfg.strong_manifest, Split::train_strong);

  ActiveSelectionConfig acfg;
  acfg.score_threshold = 0.02;  // barely-trained model: keep curation permissive
  acfg.class_filter = {ClassLabel::class_1, ClassLabel::class_2};
  const auto round = active_round(det, weak, fx.data_dir, strong, acfg);
  CHECK(round.merged.samples.size() == strong.samples.size() + round.selection.active.samples.size());
  validate_manifest(round.merged);

  // rerun is identical
  const auto again = active_round(det, weak, fx.data_dir, strong, acfg);
  CHECK(again.merged == round.merged);

  // impossible threshold: empty selection passes the base manifest through
  ActiveSelectionConfig none = acfg;
  none.score_threshold = 1.01;
  const auto empty_round = active_round(det, weak, fx.data_dir, strong, none);
  CHECK(empty_round.selection.active.samples.empty());
  CHECK(empty_round.merged == strong);
}

TEST_CASE("config json round trip and overrides") {
  const nlohmann::json j{{"strong_manifest", "a.jsonl"},
                         {"weak_manifest", "b.jsonl"},
                         {"total_steps", 77},
                         {"schedule", "polynomial:32"},
                         {"seed", 9},
                         {"learning_rate", 5e-4},
                         {"image_size", 64},
                         {"conv_channels", {2, 2, 2, 2}},
                         {"augmentation", false}};
  const TrainConfig c = TrainConfig::from_json(j);
  CHECK(c.strong_manifest == "a.jsonl");
  CHECK(c.total_steps == 77);
  CHECK(c.schedule.kind == ScheduleKind::polynomial);
  CHECK(c.schedule.exponent == 32);
  CHECK(c.seed == 9);
  CHECK(c.optimizer.learning_rate == 5e-4);
  CHECK(c.model.image_size == 64);
  CHECK(c.model.conv_channels[0] == 2);
  CHECK_FALSE(c.augmentation);
  CHECK(c.roi_batch == 16);  // untouched default

  const auto echo = c.to_json();
  CHECK(echo.at("schedule") == "polynomial:32");
  CHECK(TrainConfig::from_json(echo).total_steps == 77);

  CHECK_THROWS_AS(TrainConfig::from_json({{"conv_channels", {1, 2}}}), std::invalid_argument);
}
