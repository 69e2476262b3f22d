#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "lasro/consistency.hpp"
#include "lasro/diffusion.hpp"
#include "lasro/rewards.hpp"

namespace lasro::train {

using consistency::ConsistencyModel;
using consistency::TwoStepTrace;
using rewards::RewardSignal;
using rewards::SurrogateReward;
using rewards::WLPair;

/// Moving mean and moving 90th-percentile residual behind the S map.
class RunningStats {
 public:
  explicit RunningStats(int window = 1024, double decay = 0.99, double floor = 1e-6);

  void update(double value);
  /// min(1, (value - mean) / max(p90, floor)).
  double normalize_clip(double value) const;
  /// Derivative of normalize_clip in `value` with the stats held fixed.
  double normalize_clip_grad(double value) const;

  bool initialized() const { return count_ > 0; }
  long count() const { return count_; }
  double mean() const { return mean_; }
  /// Nearest-rank 90th percentile of the window, floored.
  double p90() const { return p90_; }
  std::vector<double> window() const;
  int capacity() const { return capacity_; }
  double floor() const { return floor_; }

 private:
  int capacity_;
  double decay_;
  double floor_;
  long count_ = 0;
  double mean_ = 0.0;
  double p90_;
  std::vector<double> ring_;
  std::size_t head_ = 0;
};

/// Nearest-rank percentile: element ceil(q * n) of the sorted values (1-based).
double nearest_rank_percentile(std::vector<double> values, double q);

void update_stats(RunningStats& stats, double value);
double normalize_clip(const RunningStats& stats, double value);

struct TrainConfig {
  int Ns = 4;
  int N1 = 1;
  int N2 = 1;
  double c = 10.0;
  double c1 = 0.5;
  double c2 = 1.0;
  double eta = 1e-3;   // surrogate pre-training
  double eta1 = 1e-4;  // sampler fine-tuning
  double eta2 = 1e-4;  // online adaptation
  double mu = 0.95;
  int window = 1024;
  double stats_decay = 0.99;
  double stats_floor = 1e-6;
  int stats_warmup = 256;  // traces scored to seed the stats at fine-tune start
  int tau_mid = 0;         // 0 selects T / 2
  int skip = 10;
  int distill_batch = 64;
  consistency::DistillSampling distill_sampling;  // L_lcm draws, matching distillation
  int pair_batch = 8;
  int buffer_capacity = 4096;
  double max_grad_norm = 0.0;
  double rwr_temperature = 0.1;
  bool direct_normalize = false;
  int degenerate_patience = 100;

  int mid(int T) const { return tau_mid > 0 ? tau_mid : T / 2; }
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Bounded pair store consumed by online adaptation.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 4096);

  /// Empties the buffer and starts a new epoch.
  void clear();
  void push(WLPair pair);
  /// n pairs drawn uniformly with replacement.
  std::vector<WLPair> sample(Rng& rng, std::size_t n) const;

  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }
  std::size_t capacity() const { return capacity_; }
  long epoch() const { return epoch_; }
  const std::vector<WLPair>& pairs() const { return pairs_; }
  const std::vector<long>& epochs() const { return tags_; }

 private:
  std::size_t capacity_;
  long epoch_ = 0;
  std::vector<WLPair> pairs_;
  std::vector<long> tags_;
};

/// Clean-data batch for the L_lcm regularizer.
struct DistillBatch {
  const nn::DenoiserNet* teacher = nullptr;
  Matrix x0;
  std::vector<int> c;
  consistency::DistillDraw draw;
  int k = 10;
};

DistillBatch draw_distill_batch(const nn::DenoiserNet& teacher, const diffusion::ToyDataset& data,
                                int batch, int T, int k, Rng& rng,
                                const consistency::DistillSampling& sampling = {});

/// Individual terms of the fine-tuning loss.
struct FtLossTerms {
  double lcm = 0.0;
  double s1 = 0.0;
  double s2 = 0.0;
  double score1 = 0.0;
  double score2 = 0.0;
};

/// Scalar scorer with optional gradient in z.
using PointScorer = std::function<double(const Vector& z, int c, Vector* dz)>;

PointScorer surrogate_scorer(const SurrogateReward& R);
/// Requires r.differentiable().
PointScorer reward_scorer(const RewardSignal& r);

/// c * L_lcm - c1 * S[score(z1_i1)] - c2 * S[score(z2_i2)], re-evaluated at the
/// current parameters from trace.x_T and trace.Z. Null stats select the
/// identity in place of S.
double ft_loss(const ConsistencyModel& f, const PointScorer& score, const TwoStepTrace& trace,
               int i1, int i2, const RunningStats* stats1, const RunningStats* stats2,
               const TrainConfig& cfg, const DistillBatch& batch, Vector* grad,
               FtLossTerms* terms = nullptr);

double lasro_ft_loss(const ConsistencyModel& f, const SurrogateReward& R, const TwoStepTrace& trace,
                     int i1, int i2, const RunningStats& stats1, const RunningStats& stats2,
                     const TrainConfig& cfg, const DistillBatch& batch, Vector* grad,
                     FtLossTerms* terms = nullptr);

struct PretrainResult {
  std::vector<double> losses;  // one per iteration with at least one pair
  long pairs = 0;
  long skipped = 0;  // iterations without any usable pair
};

/// Surrogate pre-training on pairs mined from the two-step sampler.
PretrainResult pretrain_surrogate(const TrainConfig& cfg, const ConsistencyModel& f,
                                  SurrogateReward& R, const RewardSignal& r,
                                  const std::vector<int>& conditions, int iters,
                                  std::uint64_t seed);

/// Held-out pairs mined from fresh two-step samples.
std::vector<WLPair> mine_pairs(const TrainConfig& cfg, const ConsistencyModel& f,
                               const RewardSignal& r, const std::vector<int>& conditions,
                               int groups, Rng& rng);

/// Shared inputs of every fine-tuning method.
struct FinetuneContext {
  const nn::DenoiserNet* teacher = nullptr;
  const diffusion::ToyDataset* dataset = nullptr;
  const RewardSignal* reward = nullptr;
  std::vector<int> conditions;
  TrainConfig cfg;
};

/// Sample-budget accounting shared by all methods.
struct Counters {
  long trajectories = 0;
  long reward_evals = 0;
  long theta_updates = 0;
  long psi_updates = 0;
  long skipped_adaptations = 0;
  long pairs_minted = 0;
  long warmup_trajectories = 0;
};

/// Mutable state of one fine-tuning run.
struct FinetuneState {
  ConsistencyModel f;
  Vector ema;
  std::optional<SurrogateReward> R;
  nn::Adam opt_theta;
  nn::Adam opt_psi;
  RunningStats stats1;
  RunningStats stats2;
  ReplayBuffer buffer;
  Counters counters;
  Rng rng{0};
};

FinetuneState make_finetune_state(const FinetuneContext& ctx, ConsistencyModel f,
                                  std::optional<SurrogateReward> R, std::uint64_t seed);

/// Seeds stats1/stats2 with surrogate scores of fresh samples.
void warmup_stats(const FinetuneContext& ctx, FinetuneState& st);

/// Per-step diagnostics.
struct StepInfo {
  double loss = 0.0;
  FtLossTerms terms;
  double reward_1step = 0.0;  // mean black-box reward of the sampled group
  double reward_2step = 0.0;
  int pairs = 0;
};

/// Samples N_s traces for one condition, charges the budget, evaluates r,
/// and mints W/L pairs into the buffer.
struct Group {
  TwoStepTrace trace;
  Vector r1;
  Vector r2;
  int c = 0;
};
Group sample_group(const FinetuneContext& ctx, FinetuneState& st, bool mint_pairs, StepInfo& info);

/// One reward fine-tuning update of theta.
StepInfo lasro_theta_step(const FinetuneContext& ctx, FinetuneState& st);
/// One online-adaptation update of psi; false (and a skip count) when the buffer is empty.
bool lasro_psi_step(const FinetuneContext& ctx, FinetuneState& st, double* loss = nullptr);
/// Alternative scheme: surrogate term on f(x_t, t) for noised dataset points at random t.
StepInfo alt_ft_step(const FinetuneContext& ctx, FinetuneState& st);
/// Timesteps the alternative scheme draws from.
std::vector<int> alt_ft_grid(int T, int k);
/// c * L_lcm - (c1 + c2) * S[R(f(x_t, t, c))] for column i of x_t.
double alt_ft_loss(const ConsistencyModel& f, const SurrogateReward& R, const Matrix& x_t,
                   std::span<const int> t, std::span<const int> c, int i, const RunningStats& stats,
                   const TrainConfig& cfg, const DistillBatch& batch, Vector* grad,
                   FtLossTerms* terms = nullptr);

}  // namespace lasro::train
