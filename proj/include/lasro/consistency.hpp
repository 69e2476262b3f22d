#pragma once

#include <functional>
#include <vector>

#include "lasro/common.hpp"
#include "lasro/diffusion.hpp"
#include "lasro/nn.hpp"

namespace lasro::consistency {

using diffusion::NoiseSchedule;

enum class Boundary {
  kScaled,    // c_skip / c_out built from the noise level, exact at t = 0
  kIdentity,  // c_skip = 1, c_out = 0 everywhere
};

/// Student map f(x, t, c) = c_skip(t) x + c_out(t) F(x, t, c).
///
/// F shares the teacher's architecture but predicts the clean point directly.
class ConsistencyModel {
 public:
  struct Cache {
    nn::NetCache net;
    Vector skip;  // per-column c_skip
    Vector out;   // per-column c_out
  };

  ConsistencyModel() = default;
  ConsistencyModel(const nn::NetShape& shape, NoiseSchedule sched, double sigma_data = 1.0,
                   Boundary boundary = Boundary::kScaled);

  /// Student initialized from the teacher's weights with a zeroed output layer.
  static ConsistencyModel from_teacher(const nn::DenoiserNet& teacher, NoiseSchedule sched,
                                       double sigma_data = 1.0);

  double c_skip(int t) const;
  double c_out(int t) const;

  Matrix apply(const Matrix& x, std::span<const int> t, std::span<const int> c,
               Cache* cache = nullptr) const;
  /// Parameter gradients go into `grad` (if non-null); returns d/dx.
  Matrix backward(const Cache& cache, const Matrix& grad_out, Vector* grad) const;

  nn::DenoiserNet& net() { return net_; }
  const nn::DenoiserNet& net() const { return net_; }
  Vector& params() { return net_.params(); }
  const Vector& params() const { return net_.params(); }
  Eigen::Index param_count() const { return net_.param_count(); }
  const NoiseSchedule& schedule() const { return sched_; }
  int T() const { return sched_.T; }
  int dim() const { return net_.shape().dim; }
  double sigma_data() const { return sigma_data_; }
  Boundary boundary() const { return boundary_; }
  void set_boundary(Boundary b) { boundary_ = b; }

 private:
  nn::DenoiserNet net_;
  NoiseSchedule sched_;
  double sigma_data_ = 1.0;
  Boundary boundary_ = Boundary::kScaled;
};

/// f(x, t, c) for a single timestep broadcast over the batch.
Matrix cm_apply(const ConsistencyModel& f, const Matrix& x, int t, std::span<const int> c);

/// Deterministic (eta = 0) teacher update from t to t - k.
Matrix teacher_step(const nn::DenoiserNet& teacher, const Matrix& x_t, int t, int k,
                    std::span<const int> c, const NoiseSchedule& sched);
/// Per-column timesteps.
Matrix teacher_step(const nn::DenoiserNet& teacher, const Matrix& x_t, std::span<const int> t,
                    int k, std::span<const int> c, const NoiseSchedule& sched);

/// Deterministic update from t to t_prev per column; t_prev = t leaves the column as is.
Matrix teacher_step_to(const nn::DenoiserNet& teacher, const Matrix& x_t, std::span<const int> t,
                       std::span<const int> t_prev, std::span<const int> c,
                       const NoiseSchedule& sched);

/// Deterministic teacher solve from t to t_prev per column with DDIM sub-steps;
/// substeps = 0 takes unit steps.
Matrix teacher_solve(const nn::DenoiserNet& teacher, const Matrix& x_t, std::span<const int> t,
                     std::span<const int> t_prev, std::span<const int> c,
                     const NoiseSchedule& sched, int substeps);

/// How distillation draws timesteps and solves the teacher update.
struct DistillSampling {
  double t_power = 2.0;  // t = 1 + floor(T u^p), u uniform; p > 1 favors low noise
  int substeps = 0;      // per teacher update; 0 takes unit steps, 1 a single DDIM step

  bool operator==(const DistillSampling&) const = default;
};

/// Random quantities of one distillation loss evaluation.
struct DistillDraw {
  std::vector<int> t;  // each in [1, T]; the teacher steps to t - k, or t - 1 below k
  Matrix noise;
  int substeps = 0;
};

DistillDraw draw_distill(Eigen::Index dim, Eigen::Index batch, int T, int k, Rng& rng,
                         const DistillSampling& sampling = {});

/// Mean squared L2 distance between f_student(x_t, t) and
/// f_target(teacher_step(x_t), t - k), with unit steps for t < k. Only the student branch is
/// differentiated; `target` may alias `student`.
double distill_loss(const ConsistencyModel& student, const ConsistencyModel& target,
                    const nn::DenoiserNet& teacher, const Matrix& x0, std::span<const int> c,
                    const DistillDraw& draw, int k, Vector* grad = nullptr);
double distill_loss(const ConsistencyModel& student, const ConsistencyModel& target,
                    const nn::DenoiserNet& teacher, const Matrix& x0, std::span<const int> c, int k,
                    std::uint64_t seed, Vector* grad = nullptr,
                    const DistillSampling& sampling = {});

/// One transition of the multi-step sampler viewed as an MDP step.
struct Transition {
  Matrix x_from;
  Matrix x_to;
  int t_from = 0;
  int t_to = 0;
  double sigma = 0.0;  // 0 marks a deterministic transition
  std::vector<int> c;
};

/// Re-injection timesteps for an H-step sampler, descending from T.
std::vector<int> cm_grid(int T, int H);

/// Output of an H-step sampler for a batch.
struct SampleResult {
  std::vector<int> grid;
  Matrix x_T;
  std::vector<Matrix> outputs;  // f output of every step; back() is the sample
  std::vector<Matrix> noises;   // injected noise between steps (H - 1 entries)
  std::vector<Transition> transitions;
};

SampleResult cm_sample(const ConsistencyModel& f, std::span<const int> c, int H,
                       std::uint64_t seed);
SampleResult cm_sample_from(const ConsistencyModel& f, const Matrix& x_T, std::span<const int> c,
                            int H, Rng& rng);

/// Two-step sampler record: z1 = f(x_T, tau0), z2 = f(noised z1, tau_mid).
struct TwoStepTrace {
  Matrix x_T;
  Matrix z1;
  Matrix Z;
  Matrix z2;
  std::vector<int> c;
  int tau0 = 0;
  int tau_mid = 0;
};

/// Runs both steps from given x_T and Z. Caches enable trace_backward.
struct TraceCache {
  ConsistencyModel::Cache first;
  ConsistencyModel::Cache second;
};
TwoStepTrace two_step(const ConsistencyModel& f, const Matrix& x_T, const Matrix& Z,
                      std::span<const int> c, int tau_mid, TraceCache* cache = nullptr);
TwoStepTrace sample_two_step(const ConsistencyModel& f, std::span<const int> c, int tau_mid,
                             Rng& rng);
/// Backpropagates loss gradients on z1 and z2 into `grad`.
void trace_backward(const ConsistencyModel& f, const TwoStepTrace& trace, const TraceCache& cache,
                    const Matrix& grad_z1, const Matrix& grad_z2, Vector* grad);

/// ema' = mu * ema + (1 - mu) * params.
void ema_update(const Vector& params, Vector& ema, double mu);

struct DistillTraining {
  int iters = 3000;
  int batch = 256;
  double lr = 1e-3;
  double lr_floor = 0.05;
  int skip = 10;
  double target_ema = 0.95;  // rate of the stop-gradient target copy
  double sigma_data = 1.0;
  double max_grad_norm = 1.0;
  DistillSampling sampling;

  bool operator==(const DistillTraining&) const = default;
};

/// Consistency distillation of `teacher` on dataset batches. The returned
/// model carries the target (EMA) parameters.
ConsistencyModel distill(const nn::DenoiserNet& teacher, const diffusion::ToyDataset& data,
                         const NoiseSchedule& sched, const DistillTraining& opts,
                         std::uint64_t seed, const std::function<void(int, double)>& on_loss = {});

}  // namespace lasro::consistency
