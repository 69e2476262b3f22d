#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lasro/analysis.hpp"
#include "lasro/consistency.hpp"
#include "lasro/diffusion.hpp"
#include "lasro/rewards.hpp"
#include "lasro/runner.hpp"
#include "lasro/train.hpp"

namespace lasro::harness {

inline constexpr int kSchemaVersion = 1;

struct DatasetSection {
  std::string kind = "mixture";
  int dim = 2;
  int classes = 4;
  double radius = 3.0;
  double spread = 1.5;

  bool operator==(const DatasetSection&) const = default;
};

struct ScheduleSection {
  int T = 100;
  std::string kind = "cosine";
  double beta_min = 0.02;
  double beta_max = 0.3;

  bool operator==(const ScheduleSection&) const = default;
};

struct TeacherSection {
  int hidden = 64;
  int blocks = 2;
  int time_features = 16;
  int class_features = 8;
  diffusion::TeacherTraining training;

  bool operator==(const TeacherSection&) const = default;
};

struct RewardSection {
  std::string kind = "target_region";
  double offset = 1.5;  // target = class mean pushed outward by offset * spread
  int levels = 4;
  double scale = 1.0;
  std::string classifier_path;  // empty: train one during pretrain-reward
  int classifier_samples = 4000;
  int classifier_iters = 500;
  double classifier_lr = 0.05;

  bool operator==(const RewardSection&) const = default;
};

struct SurrogateSection {
  int head_hidden = 32;
  int scorer_t = 0;
  std::string trunk = "teacher";  // or "random"
  int pretrain_iters = 2000;
  int heldout_groups = 200;

  bool operator==(const SurrogateSection&) const = default;
};

struct FinetuneSection {
  train::TrainConfig cfg;
  long steps = 2000;
  long eval_every = 200;
  std::vector<long> snapshot_steps{400, 800, 1200, 1600, 2000};
  int eval_per_condition = 256;

  bool operator==(const FinetuneSection&) const = default;
};

struct AnalyzeSection {
  std::vector<int> lipschitz_levels;  // empty: proportional default levels
  double epsilon = 0.01;
  int lipschitz_samples = 1000;
  std::vector<int> H_list{1, 2, 4, 8};
  int diversity_draws = 1000;
  int td_traces = 100;
  double td_gamma = 0.0;
  int projections = 64;
  int fidelity_samples = 2000;
  int teacher_steps = 50;

  bool operator==(const AnalyzeSection&) const = default;
};

struct IoSection {
  std::string run_dir = "runs/default";
  std::string run_id;  // empty: derived from the run directory name
  bool wall_time = false;

  bool operator==(const IoSection&) const = default;
};

struct RunConfig {
  int schema_version = kSchemaVersion;
  DatasetSection dataset;
  ScheduleSection schedule;
  TeacherSection teacher;
  consistency::DistillTraining distill;
  RewardSection reward;
  SurrogateSection surrogate;
  FinetuneSection train;
  AnalyzeSection analyze;
  IoSection io;
  std::vector<std::uint64_t> seeds{0};

  bool operator==(const RunConfig&) const = default;
  nn::NetShape net_shape() const;
};

/// Strict parse: unknown keys, wrong types and a missing schema_version raise
/// ValidationError naming the offending path.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::string& path);
/// Effective configuration with every default spelled out.
std::string emit_config(const RunConfig& cfg);

struct MetricRecord {
  std::string run_id;
  std::string method;
  std::string stage;
  long step = 0;
  std::string name;
  std::optional<double> value;
  std::uint64_t seed = 0;
  std::optional<double> wall_time;

  bool operator==(const MetricRecord&) const = default;
};

std::string to_jsonl(const MetricRecord& rec);
MetricRecord parse_metric_line(const std::string& line);
std::vector<MetricRecord> read_metrics(const std::string& path);

/// Append-only JSONL sink.
class MetricsSink {
 public:
  MetricsSink(const std::string& path, std::string run_id, std::uint64_t seed,
              bool wall_time = false);

  /// Non-finite values are written as null and counted.
  void emit(MetricRecord rec);
  void emit(const std::string& stage, const std::string& method, long step, const std::string& name,
            double value);
  void flush();

  long warnings() const { return warnings_; }
  long count() const { return count_; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::string run_id_;
  std::uint64_t seed_;
  bool wall_time_;
  std::ofstream out_;
  long warnings_ = 0;
  long count_ = 0;
  double t0_;
};

struct CheckpointManifest {
  int schema_version = kSchemaVersion;
  std::string module;
  long step = 0;
  bool ema = false;
  long param_count = 0;
  std::map<std::string, long> shape;

  bool operator==(const CheckpointManifest&) const = default;
};

/// Writes `<stem>.bin` (raw little-endian doubles) and `<stem>.json`.
void save_checkpoint(const std::string& stem, const Vector& params,
                     const CheckpointManifest& manifest);

struct LoadedCheckpoint {
  Vector params;
  CheckpointManifest manifest;
};

/// Verifies schema version, module, parameter count (when expected_count >= 0)
/// and payload length; CheckpointError lists expected against found.
LoadedCheckpoint load_checkpoint(const std::string& stem, const std::string& module,
                                 long expected_count = -1);
bool checkpoint_exists(const std::string& stem);

std::map<std::string, long> shape_map(const nn::NetShape& shape);

/// Reward targets: class means pushed radially outward by offset * spread.
Matrix reward_targets(const diffusion::ToyDataset& data, double offset);

/// One seed's run directory and its stages.
class Pipeline {
 public:
  Pipeline(RunConfig cfg, std::string run_dir, std::uint64_t seed);

  void train_teacher();
  void distill();
  void pretrain_reward();
  runner::FinetuneResult finetune(runner::Method method);
  void analyze(const std::string& probe, const std::string& method = "lasro");
  void report();
  /// Dispatches a CLI subcommand.
  void run(const std::string& subcommand, const std::string& method, const std::string& probe);

  const RunConfig& config() const { return cfg_; }
  const std::string& run_dir() const { return dir_; }
  std::uint64_t seed() const { return seed_; }
  MetricsSink& metrics() { return *sink_; }

  const diffusion::ToyDataset& dataset() const { return data_; }
  const diffusion::NoiseSchedule& schedule() const { return sched_; }
  std::vector<int> conditions() const;
  std::string checkpoint_stem(const std::string& name) const;
  std::string report_path(const std::string& probe) const;

  /// Loaders throw PreconditionError naming the missing artifact.
  nn::DenoiserNet load_teacher() const;
  consistency::ConsistencyModel load_student() const;
  rewards::SurrogateReward load_surrogate(const std::string& name = "surrogate") const;
  std::unique_ptr<rewards::RewardSignal> make_reward() const;
  analysis::EvalSet eval_set() const;

 private:
  void require(const std::string& name) const;
  void stage_done(const std::string& stage);

  RunConfig cfg_;
  std::string dir_;
  std::uint64_t seed_;
  diffusion::ToyDataset data_;
  diffusion::NoiseSchedule sched_;
  std::unique_ptr<MetricsSink> sink_;
};

}  // namespace lasro::harness
