#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lasro/common.hpp"
#include "lasro/nn.hpp"

namespace lasro::rewards {

enum class RewardKind { kTargetRegion, kQuantized, kClassifier };

RewardKind parse_reward_kind(const std::string& name);
std::string to_string(RewardKind kind);

/// Black-box task reward r(x, c). Gradients are only exposed when
/// `differentiable()` holds.
class RewardSignal {
 public:
  virtual ~RewardSignal() = default;
  virtual double evaluate(const Vector& x, int c) const = 0;
  virtual bool differentiable() const { return false; }
  /// d r / d x; throws std::invalid_argument for non-differentiable rewards.
  virtual Vector gradient(const Vector& x, int c) const;
  virtual RewardKind kind() const = 0;

  /// Column-wise evaluation; `c` holds one label or one per column.
  Vector evaluate(const Matrix& x, std::span<const int> c) const;
};

/// r = -||x - target(c)||.
class TargetRegionReward : public RewardSignal {
 public:
  /// `targets` is dim x classes.
  explicit TargetRegionReward(Matrix targets);
  double evaluate(const Vector& x, int c) const override;
  bool differentiable() const override { return true; }
  Vector gradient(const Vector& x, int c) const override;
  RewardKind kind() const override { return RewardKind::kTargetRegion; }
  const Matrix& targets() const { return targets_; }
  Vector target(int c) const;

 private:
  Matrix targets_;
};

/// Target-region reward mapped onto {0, 1/m, ..., 1} via round(m * exp(-dist / scale)) / m.
class QuantizedReward : public RewardSignal {
 public:
  QuantizedReward(Matrix targets, int levels, double scale);
  double evaluate(const Vector& x, int c) const override;
  RewardKind kind() const override { return RewardKind::kQuantized; }
  int levels() const { return levels_; }

 private:
  TargetRegionReward base_;
  int levels_;
  double scale_;
};

/// Softmax-linear toy classifier over quadratic features; reward is p(c | x).
class ToyClassifier {
 public:
  ToyClassifier() = default;
  ToyClassifier(int dim, int num_classes);

  static Eigen::Index param_count(int dim, int num_classes);
  Vector probabilities(const Vector& x) const;
  /// d p(c | x) / d x.
  Vector probability_gradient(const Vector& x, int c) const;
  /// Full-batch softmax regression by gradient descent.
  void fit(const Matrix& x, const std::vector<int>& labels, int iters, double lr);
  double accuracy(const Matrix& x, const std::vector<int>& labels) const;

  int dim() const { return dim_; }
  int num_classes() const { return classes_; }
  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

 private:
  Vector features(const Vector& x) const;
  Matrix feature_jacobian(const Vector& x) const;
  int feature_count() const { return 1 + dim_ + dim_ * (dim_ + 1) / 2; }

  int dim_ = 0;
  int classes_ = 0;
  Vector params_;  // classes x features, column-major
};

class ClassifierReward : public RewardSignal {
 public:
  explicit ClassifierReward(ToyClassifier classifier);
  double evaluate(const Vector& x, int c) const override;
  bool differentiable() const override { return true; }
  Vector gradient(const Vector& x, int c) const override;
  RewardKind kind() const override { return RewardKind::kClassifier; }
  const ToyClassifier& classifier() const { return classifier_; }

 private:
  ToyClassifier classifier_;
};

struct RewardParams {
  Matrix targets;                           // target_region / quantized
  int levels = 4;                           // quantized
  double scale = 1.0;                       // quantized
  std::optional<ToyClassifier> classifier;  // classifier
};

std::unique_ptr<RewardSignal> make_reward(RewardKind kind, const RewardParams& params);
std::unique_ptr<RewardSignal> make_reward(const std::string& kind, const RewardParams& params);

/// Learned scorer R(z, c): teacher-shaped trunk evaluated at a fixed timestep,
/// followed by a scoring head. Trunk and head are both trainable.
class SurrogateReward {
 public:
  struct Cache {
    nn::NetCache trunk;
    nn::ScoreHead::Cache head;
  };

  SurrogateReward() = default;
  SurrogateReward(const nn::DenoiserNet& trunk, int head_hidden, Rng& rng, int scorer_t = 0);

  /// 1 x batch row of scores.
  Matrix score(const Matrix& z, std::span<const int> c, Cache* cache = nullptr) const;
  double score(const Vector& z, int c) const;
  /// Accumulates parameter gradients (flat layout [trunk, head]); returns d/dz.
  Matrix backward(const Cache& cache, const Matrix& grad_scores, Vector* grad) const;

  Eigen::Index param_count() const { return trunk_.param_count() + head_.param_count(); }
  Vector get_params() const;
  void set_params(const Vector& p);
  const nn::DenoiserNet& trunk() const { return trunk_; }
  nn::DenoiserNet& trunk() { return trunk_; }
  const nn::ScoreHead& head() const { return head_; }
  nn::ScoreHead& head() { return head_; }
  int scorer_t() const { return scorer_t_; }

 private:
  nn::DenoiserNet trunk_;
  nn::ScoreHead head_;
  int scorer_t_ = 0;
};

/// Winner/loser pair ranked by the black-box reward.
struct WLPair {
  Vector z_w;
  Vector z_l;
  int c = 0;
  double r_w = 0.0;
  double r_l = 0.0;
  int step_index = 1;
};

/// softplus(-gap): the pair cross-entropy as a function of R(z_w) - R(z_l).
double pair_loss_from_gap(double gap);
/// d pair_loss / d gap.
double pair_loss_gap_grad(double gap);

double surrogate_pair_loss(const SurrogateReward& R, const WLPair& pair);
/// Mean pair loss over `pairs`; parameter gradients accumulated into `grad`.
double surrogate_pair_loss(const SurrogateReward& R, std::span<const WLPair> pairs, Vector* grad);
/// Fraction of pairs with R(z_w) > R(z_l).
double pair_accuracy(const SurrogateReward& R, std::span<const WLPair> pairs);

/// Winner = first argmax, loser = first argmin; none when all rewards are equal.
std::optional<std::pair<int, int>> select_wl_indices(const Vector& rewards);
std::optional<WLPair> select_wl_pair(const Matrix& samples, int c, const RewardSignal& r,
                                     int step_index = 1);
/// Same, with rewards already evaluated.
std::optional<WLPair> select_wl_pair(const Matrix& samples, int c, const Vector& rewards,
                                     int step_index = 1);

}  // namespace lasro::rewards
