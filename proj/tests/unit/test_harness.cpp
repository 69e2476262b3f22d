#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "lasro/harness.hpp"
#include "test_util.hpp"

using namespace lasro;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("lasro_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

harness::RunConfig tiny_config() {
  return harness::parse_config_text(R"({
    "schema_version": 1,
    "teacher": {"iters": 60, "batch": 32, "hidden": 16, "time_features": 8, "class_features": 4},
    "distill": {"iters": 40, "batch": 32},
    "surrogate": {"pretrain_iters": 30, "heldout_groups": 10, "head_hidden": 8},
    "train": {"steps": 6, "eval_every": 3, "snapshot_steps": [3, 6], "eval_per_condition": 8,
              "stats_warmup": 16, "distill_batch": 16},
    "analyze": {"lipschitz_samples": 100, "diversity_draws": 20, "td_traces": 10,
                "fidelity_samples": 100, "teacher_steps": 10, "H_list": [1, 2]}
  })");
}

}  // namespace

TEST(Config, DefaultsAreSpelledOut) {
  const auto cfg = harness::parse_config_text(R"({"schema_version": 1})");
  EXPECT_EQ(cfg.train.cfg.Ns, 4);
  EXPECT_EQ(cfg.train.cfg.window, 1024);
  EXPECT_DOUBLE_EQ(cfg.train.cfg.mu, 0.95);
  EXPECT_EQ(cfg.schedule.T, 100);
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{0}));
}

TEST(Config, EmitParseRoundTrip) {
  auto cfg = tiny_config();
  cfg.train.cfg.c1 = 0.25;
  cfg.seeds = {3, 4};
  cfg.analyze.lipschitz_levels = {2, 7};
  const auto back = harness::parse_config_text(harness::emit_config(cfg));
  EXPECT_TRUE(back == cfg);
  EXPECT_EQ(harness::emit_config(back), harness::emit_config(cfg));
}

TEST(Config, UnknownKeyNamesItsPath) {
  try {
    harness::parse_config_text(R"({"schema_version": 1, "train": {"NN1": 2}})");
    FAIL() << "unknown key accepted";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.path(), "train.NN1");
  }
}

TEST(Config, TypeAndVersionErrors) {
  EXPECT_THROW(harness::parse_config_text(R"({"train": {"Ns": 4}})"), ValidationError);
  EXPECT_THROW(harness::parse_config_text(R"({"schema_version": 99})"), ValidationError);
  try {
    harness::parse_config_text(R"({"schema_version": 1, "train": {"Ns": "four"}})");
    FAIL() << "wrong type accepted";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.path(), "train.Ns");
  }
  EXPECT_THROW(harness::parse_config_text("{not json"), ValidationError);
}

TEST(Metrics, NonFiniteBecomesNullWithWarning) {
  const auto dir = fresh_dir("metrics");
  const auto path = (dir / "metrics.jsonl").string();
  {
    harness::MetricsSink sink(path, "run", 5);
    sink.emit("finetune", "lasro", 1, "loss", 0.5);
    sink.emit("finetune", "lasro", 2, "loss", std::nan(""));
    sink.flush();
    EXPECT_EQ(sink.count(), 2);
    EXPECT_EQ(sink.warnings(), 1);
  }
  const auto recs = harness::read_metrics(path);
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].step, 1);
  EXPECT_EQ(recs[1].step, 2);
  EXPECT_EQ(recs[0].value, 0.5);
  EXPECT_FALSE(recs[1].value.has_value());
  EXPECT_EQ(recs[1].seed, 5u);
  EXPECT_NE(slurp(path).find("null"), std::string::npos);
}

TEST(Metrics, LineRoundTrip) {
  harness::MetricRecord rec{.run_id = "abc",
                            .method = "rwr",
                            .stage = "finetune",
                            .step = 42,
                            .name = "eval_fidelity",
                            .value = 0.1 + 0.2,
                            .seed = 9,
                            .wall_time = std::nullopt};
  const auto line = harness::to_jsonl(rec);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_TRUE(harness::parse_metric_line(line) == rec);
  EXPECT_THROW(harness::parse_metric_line("{}"), std::exception);
}

TEST(Checkpoint, BitIdenticalRoundTrip) {
  const auto dir = fresh_dir("checkpoint");
  const auto stem = (dir / "student").string();
  Rng rng(80);
  const Vector p = rng.normal(37, 1);
  harness::CheckpointManifest m{
      .module = "student", .step = 12, .ema = true, .param_count = 37, .shape = {{"hidden", 16}}};
  harness::save_checkpoint(stem, p, m);
  ASSERT_TRUE(harness::checkpoint_exists(stem));
  const auto loaded = harness::load_checkpoint(stem, "student", 37);
  EXPECT_EQ(std::memcmp(loaded.params.data(), p.data(), sizeof(double) * 37), 0);
  EXPECT_TRUE(loaded.manifest == m);
  EXPECT_EQ(loaded.manifest.step, 12);
}

TEST(Checkpoint, MismatchesAreReported) {
  const auto dir = fresh_dir("checkpoint_bad");
  const auto stem = (dir / "student").string();
  harness::CheckpointManifest m{.module = "student", .step = 1, .param_count = 8};
  harness::save_checkpoint(stem, Vector::Ones(8), m);
  EXPECT_THROW(harness::load_checkpoint(stem, "teacher"), CheckpointError);
  EXPECT_THROW(harness::load_checkpoint(stem, "student", 9), CheckpointError);
  fs::resize_file(stem + ".bin", 7 * sizeof(double));
  EXPECT_THROW(harness::load_checkpoint(stem, "student"), CheckpointError);
  EXPECT_THROW(harness::load_checkpoint((dir / "absent").string(), "student"), CheckpointError);
}

TEST(RewardTargets, PushedOutwardFromClassMeans) {
  const auto data = diffusion::make_toy_dataset("mixture", 2, 4, 0);
  const Matrix t0 = harness::reward_targets(data, 0.0);
  const Matrix t1 = harness::reward_targets(data, 1.0);
  for (int c = 0; c < 4; ++c) {
    EXPECT_GT(t1.col(c).norm(), t0.col(c).norm());
    // Radial: the shift is parallel to the class mean.
    const Vector d = t1.col(c) - t0.col(c);
    EXPECT_NEAR(std::abs(d.normalized().dot(t0.col(c).normalized())), 1.0, 1e-12);
  }
}

TEST(Pipeline, StagesRequireTheirPrerequisites) {
  const auto dir = fresh_dir("pipeline_pre");
  harness::Pipeline p(tiny_config(), dir.string(), 0);
  EXPECT_THROW(p.distill(), PreconditionError);
  p.train_teacher();
  p.distill();
  EXPECT_THROW(p.finetune(runner::Method::kLasro), PreconditionError);
  EXPECT_THROW(p.analyze("td"), PreconditionError);
  EXPECT_THROW(p.report(), PreconditionError);
  EXPECT_THROW(p.analyze("nonsense"), std::invalid_argument);
}

TEST(Pipeline, EndToEndReports) {
  const auto dir = fresh_dir("pipeline_full");
  harness::Pipeline p(tiny_config(), dir.string(), 1);
  p.train_teacher();
  p.distill();
  p.pretrain_reward();
  const auto res = p.finetune(runner::Method::kLasro);
  EXPECT_EQ(res.counters.theta_updates, 6);
  p.analyze("td");
  p.analyze("tradeoff");
  p.report();
  const auto td = slurp(p.report_path("td"));
  EXPECT_EQ(td.substr(0, td.find('\n')), "gamma,l_td,l_two_term,max_abs_diff");
  const auto tradeoff = slurp(p.report_path("tradeoff"));
  EXPECT_EQ(std::count(tradeoff.begin(), tradeoff.end(), '\n'), 3);
  EXPECT_TRUE(fs::exists(p.report_path("summary")));
  EXPECT_EQ(p.metrics().warnings(), 0);
}
