#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lasro/common.hpp"
#include "lasro/nn.hpp"

namespace lasro::diffusion {

enum class ScheduleKind { kLinear, kCosine };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

/// Discrete diffusion coefficients for timesteps 1..T.
///
/// `beta[t-1]` is the noise added by step t; `alpha_bar[t]` is the cumulative
/// signal fraction with `alpha_bar[0] == 1`; `sigma[t-1]` is the posterior
/// standard deviation of the single-step reverse transition t -> t-1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  double ab(int t) const { return alpha_bar.at(static_cast<std::size_t>(t)); }
  /// Noise-to-signal ratio sqrt((1 - ab) / ab), zero at t = 0.
  double noise_level(int t) const;
};

/// Linear betas in [beta_min, beta_max], or the cosine alpha_bar profile with
/// betas clamped into [beta_min, beta_max].
NoiseSchedule make_schedule(int T, ScheduleKind kind, double beta_min, double beta_max);

/// sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise, column-wise.
Matrix forward_diffuse(const Matrix& x0, int t, const Matrix& noise, const NoiseSchedule& sched);
/// Per-column timesteps.
Matrix forward_diffuse(const Matrix& x0, std::span<const int> t, const Matrix& noise,
                       const NoiseSchedule& sched);

/// Random quantities of one ddpm_loss evaluation: timestep per column and noise.
struct DdpmDraw {
  std::vector<int> t;
  Matrix noise;
};

DdpmDraw draw_ddpm(Eigen::Index dim, Eigen::Index batch, const NoiseSchedule& sched, Rng& rng);

/// Mean over the batch of ||Z - eps(x_t, t, c)||^2 for a fixed draw. Parameter
/// gradients are accumulated into `grad` when non-null.
double ddpm_loss(const nn::DenoiserNet& net, const Matrix& x0, std::span<const int> c,
                 const DdpmDraw& draw, const NoiseSchedule& sched, Vector* grad = nullptr);
double ddpm_loss(const nn::DenoiserNet& net, const Matrix& x0, std::span<const int> c,
                 const NoiseSchedule& sched, std::uint64_t seed, Vector* grad = nullptr);

/// Same loss for an arbitrary noise predictor (used by oracle checks).
using EpsPredictor =
    std::function<Matrix(const Matrix& x_t, std::span<const int> t, std::span<const int> c)>;
double ddpm_loss(const EpsPredictor& eps, const Matrix& x0, std::span<const int> c,
                 const DdpmDraw& draw, const NoiseSchedule& sched);

/// Deterministic (eta = 0) update from t to t_prev per column for any noise predictor;
/// t_prev = t leaves the column unchanged.
Matrix ddim_step(const EpsPredictor& eps, const Matrix& x_t, std::span<const int> t,
                 std::span<const int> t_prev, std::span<const int> c, const NoiseSchedule& sched);

/// Timestep grid used by a `steps`-step sampler: descending from T, `steps`
/// entries, the reverse chain ends at 0.
std::vector<int> sampling_grid(int T, int steps);

struct SampleOptions {
  bool zero_sigma = false;  // force every reverse transition to be deterministic
};

/// Ancestral sampling on a stride-subsampled grid. Returns one column per
/// entry of `c`.
Matrix ddpm_sample(const nn::DenoiserNet& net, std::span<const int> c, const NoiseSchedule& sched,
                   int steps, std::uint64_t seed, SampleOptions options = {});
/// Same chain from a caller-supplied initial point x_T.
Matrix ddpm_sample_from(const nn::DenoiserNet& net, const Matrix& x_T, std::span<const int> c,
                        const NoiseSchedule& sched, int steps, Rng& rng,
                        SampleOptions options = {});

enum class DatasetKind { kMixture, kSpiral, kCheckerboard };

DatasetKind parse_dataset_kind(const std::string& name);
std::string to_string(DatasetKind kind);

struct DatasetParams {
  double radius = 3.0;  // mixture: distance of component means from the origin
  double spread = 1.5;  // mixture: per-class isotropic std; others: noise scale

  bool operator==(const DatasetParams&) const = default;
};

/// Synthetic conditional dataset: one class label per component.
class ToyDataset {
 public:
  ToyDataset(DatasetKind kind, int dim, int num_classes, std::uint64_t seed,
             DatasetParams params = {});

  DatasetKind kind() const { return kind_; }
  int dim() const { return dim_; }
  int num_classes() const { return classes_; }
  const DatasetParams& params() const { return params_; }
  std::uint64_t seed() const { return seed_; }

  /// One draw of class c.
  Vector sample(Rng& rng, int c) const;
  /// n draws with labels cycling through `c` (size n or 1).
  Matrix sample(Rng& rng, std::span<const int> c, Eigen::Index n) const;
  /// n draws with uniformly random labels; labels written to `labels`.
  Matrix sample_labeled(Rng& rng, Eigen::Index n, std::vector<int>& labels) const;

  bool has_log_density() const { return kind_ == DatasetKind::kMixture; }
  /// Log-density of the equal-weight mixture over all classes.
  double log_density(const Vector& x) const;
  double class_log_density(const Vector& x, int c) const;
  Vector component_mean(int c) const;
  double component_std() const;

 private:
  DatasetKind kind_;
  int dim_;
  int classes_;
  std::uint64_t seed_;
  DatasetParams params_;
  Matrix means_;  // mixture component means, dim x classes
};

struct TeacherTraining {
  int iters = 3000;
  int batch = 256;
  double lr = 2e-3;
  double lr_floor = 0.05;  // cosine decay to lr * lr_floor
  double ema = 0.995;      // rate of the returned parameter average
  double max_grad_norm = 1.0;

  bool operator==(const TeacherTraining&) const = default;
};

/// Learning rate at iteration `it` of `iters` under cosine decay.
double cosine_lr(double lr, double floor, int it, int iters);

/// Adam on ddpm_loss over fresh dataset batches; returns the EMA weights. `on_loss(iter, loss)` is
/// optional.
nn::DenoiserNet train_teacher(const ToyDataset& data, const NoiseSchedule& sched,
                              const nn::NetShape& shape, const TeacherTraining& opts,
                              std::uint64_t seed,
                              const std::function<void(int, double)>& on_loss = {});

ToyDataset make_toy_dataset(const std::string& kind, int dim, int num_classes, std::uint64_t seed,
                            DatasetParams params = {});

}  // namespace lasro::diffusion
