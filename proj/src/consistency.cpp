#include "lasro/consistency.hpp"

#include <cmath>

namespace lasro::consistency {
namespace {

int pick(std::span<const int> v, Eigen::Index j) {
  return v.size() == 1 ? v[0] : v[static_cast<std::size_t>(j)];
}

}  // namespace

ConsistencyModel::ConsistencyModel(const nn::NetShape& shape, NoiseSchedule sched,
                                   double sigma_data, Boundary boundary)
    : net_(shape), sched_(std::move(sched)), sigma_data_(sigma_data), boundary_(boundary) {
  if (!(sigma_data > 0.0)) throw std::invalid_argument("sigma_data must be positive");
}

ConsistencyModel ConsistencyModel::from_teacher(const nn::DenoiserNet& teacher, NoiseSchedule sched,
                                                double sigma_data) {
  ConsistencyModel f(teacher.shape(), std::move(sched), sigma_data);
  f.net_.params() = teacher.params();
  f.net_.zero_output_layer();
  return f;
}

double ConsistencyModel::c_skip(int t) const {
  if (t < 0 || t > sched_.T) throw std::invalid_argument("timestep out of range");
  if (boundary_ == Boundary::kIdentity) return 1.0;
  const double s = sched_.noise_level(t);
  const double sd2 = sigma_data_ * sigma_data_;
  return sd2 / (s * s + sd2) / std::sqrt(sched_.ab(t));
}

double ConsistencyModel::c_out(int t) const {
  if (t < 0 || t > sched_.T) throw std::invalid_argument("timestep out of range");
  if (boundary_ == Boundary::kIdentity) return 0.0;
  const double s = sched_.noise_level(t);
  return s * sigma_data_ / std::sqrt(s * s + sigma_data_ * sigma_data_);
}

Matrix ConsistencyModel::apply(const Matrix& x, std::span<const int> t, std::span<const int> c,
                               Cache* cache) const {
  const Eigen::Index n = x.cols();
  if (t.size() != 1 && static_cast<Eigen::Index>(t.size()) != n)
    throw std::invalid_argument("timestep count does not match batch");
  Vector skip(n), out(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const int tj = pick(t, j);
    skip[j] = c_skip(tj);
    out[j] = c_out(tj);
  }
  const Matrix F = net_.forward(x, t, c, cache ? &cache->net : nullptr);
  Matrix y = x * skip.asDiagonal();
  y.noalias() += F * out.asDiagonal();
  if (cache) {
    cache->skip = skip;
    cache->out = out;
  }
  return y;
}

Matrix ConsistencyModel::backward(const Cache& cache, const Matrix& grad_out, Vector* grad) const {
  Matrix dx = net_.backward(cache.net, grad_out * cache.out.asDiagonal(), grad);
  dx.noalias() += grad_out * cache.skip.asDiagonal();
  return dx;
}

Matrix cm_apply(const ConsistencyModel& f, const Matrix& x, int t, std::span<const int> c) {
  return f.apply(x, std::span<const int>(&t, 1), c);
}

Matrix teacher_step(const nn::DenoiserNet& teacher, const Matrix& x_t, int t, int k,
                    std::span<const int> c, const NoiseSchedule& sched) {
  return teacher_step(teacher, x_t, std::span<const int>(&t, 1), k, c, sched);
}

Matrix teacher_step(const nn::DenoiserNet& teacher, const Matrix& x_t, std::span<const int> t,
                    int k, std::span<const int> c, const NoiseSchedule& sched) {
  if (k < 0) throw std::invalid_argument("teacher_step: negative skip");
  for (int tj : t)
    if (tj - k < 0 || tj > sched.T) throw std::invalid_argument("teacher_step: t - k out of range");
  if (k == 0) return x_t;
  std::vector<int> t_prev(t.begin(), t.end());
  for (auto& tp : t_prev) tp -= k;
  return teacher_step_to(teacher, x_t, t, t_prev, c, sched);
}

Matrix teacher_step_to(const nn::DenoiserNet& teacher, const Matrix& x_t, std::span<const int> t,
                       std::span<const int> t_prev, std::span<const int> c,
                       const NoiseSchedule& sched) {
  const diffusion::EpsPredictor eps = [&teacher](const Matrix& x, std::span<const int> tt,
                                                 std::span<const int> cc) {
    return teacher.forward(x, tt, cc);
  };
  return diffusion::ddim_step(eps, x_t, t, t_prev, c, sched);
}

Matrix teacher_solve(const nn::DenoiserNet& teacher, const Matrix& x_t, std::span<const int> t,
                     std::span<const int> t_prev, std::span<const int> c,
                     const NoiseSchedule& sched, int substeps) {
  if (substeps < 0) throw std::invalid_argument("teacher_solve: negative substeps");
  if (t.size() != t_prev.size()) throw std::invalid_argument("teacher_solve: size mismatch");
  std::vector<int> n(t.size());
  int most = 0;
  for (std::size_t j = 0; j < t.size(); ++j) {
    const int gap = t[j] - t_prev[j];
    n[j] = substeps == 0 ? gap : std::min(substeps, gap);
    most = std::max(most, n[j]);
  }
  if (most <= 1) return teacher_step_to(teacher, x_t, t, t_prev, c, sched);
  Matrix x = x_t;
  std::vector<int> cur(t.begin(), t.end()), nxt(t.size());
  for (int s = 1; s <= most; ++s) {
    for (std::size_t j = 0; j < t.size(); ++j) {
      const int done = std::min(s, n[j]);
      nxt[j] = n[j] == 0 ? t[j]
                         : t[j] - static_cast<int>(std::lround((t[j] - t_prev[j]) *
                                                               static_cast<double>(done) / n[j]));
    }
    x = teacher_step_to(teacher, x, cur, nxt, c, sched);
    cur = nxt;
  }
  return x;
}

DistillDraw draw_distill(Eigen::Index dim, Eigen::Index batch, int T, int k, Rng& rng,
                         const DistillSampling& s) {
  if (k < 1 || k > T) throw std::invalid_argument("distillation skip must be in [1, T]");
  DistillDraw d;
  d.t.resize(static_cast<std::size_t>(batch));
  if (!(s.t_power > 0.0) || s.substeps < 0)
    throw std::invalid_argument("invalid distillation sampling");
  for (auto& t : d.t)
    t = s.t_power == 1.0
            ? rng.uniform_int(1, T)
            : 1 + std::min(T - 1,
                           static_cast<int>(std::floor(T * std::pow(rng.uniform(), s.t_power))));
  d.substeps = s.substeps;
  d.noise = rng.normal(dim, batch);
  return d;
}

double distill_loss(const ConsistencyModel& student, const ConsistencyModel& target,
                    const nn::DenoiserNet& teacher, const Matrix& x0, std::span<const int> c,
                    const DistillDraw& draw, int k, Vector* grad) {
  if (x0.cols() == 0) throw std::invalid_argument("distill_loss: empty batch");
  if (k < 1) throw std::invalid_argument("distill_loss: skip must be >= 1");
  const auto& sched = student.schedule();
  const Matrix x_t = diffusion::forward_diffuse(x0, draw.t, draw.noise, sched);
  std::vector<int> t_prev(draw.t.size());
  for (std::size_t j = 0; j < draw.t.size(); ++j)
    t_prev[j] = draw.t[j] >= k ? draw.t[j] - k : draw.t[j] - 1;
  const Matrix x_prev = teacher_solve(teacher, x_t, draw.t, t_prev, c, sched, draw.substeps);
  const Matrix y_target = target.apply(x_prev, t_prev, c);

  ConsistencyModel::Cache cache;
  const Matrix y = student.apply(x_t, draw.t, c, grad ? &cache : nullptr);
  const Matrix diff = y - y_target;
  const double n = static_cast<double>(x0.cols());
  if (grad) student.backward(cache, (2.0 / n) * diff, grad);
  return diff.squaredNorm() / n;
}

double distill_loss(const ConsistencyModel& student, const ConsistencyModel& target,
                    const nn::DenoiserNet& teacher, const Matrix& x0, std::span<const int> c, int k,
                    std::uint64_t seed, Vector* grad, const DistillSampling& sampling) {
  if (x0.cols() == 0) throw std::invalid_argument("distill_loss: empty batch");
  Rng rng(seed);
  const auto draw = draw_distill(x0.rows(), x0.cols(), student.T(), k, rng, sampling);
  return distill_loss(student, target, teacher, x0, c, draw, k, grad);
}

std::vector<int> cm_grid(int T, int H) {
  if (H != 1 && H != 2 && H != 4 && H != 8)
    throw std::invalid_argument("sampler steps must be one of 1, 2, 4, 8");
  return diffusion::sampling_grid(T, H);
}

SampleResult cm_sample(const ConsistencyModel& f, std::span<const int> c, int H,
                       std::uint64_t seed) {
  Rng rng(seed);
  const Matrix x_T = rng.normal(f.dim(), static_cast<Eigen::Index>(c.size()));
  return cm_sample_from(f, x_T, c, H, rng);
}

SampleResult cm_sample_from(const ConsistencyModel& f, const Matrix& x_T, std::span<const int> c,
                            int H, Rng& rng) {
  SampleResult res;
  res.grid = cm_grid(f.T(), H);
  res.x_T = x_T;
  const std::vector<int> cond(c.begin(), c.end());
  Matrix x = x_T;
  for (std::size_t i = 0; i < res.grid.size(); ++i) {
    const int t = res.grid[i];
    Matrix z = cm_apply(f, x, t, c);
    Transition tr;
    tr.x_from = x;
    tr.t_from = t;
    tr.c = cond;
    if (i + 1 < res.grid.size()) {
      const int t_next = res.grid[i + 1];
      Matrix noise = rng.normal(x.rows(), x.cols());
      x = diffusion::forward_diffuse(z, t_next, noise, f.schedule());
      tr.x_to = x;
      tr.t_to = t_next;
      tr.sigma = std::sqrt(1.0 - f.schedule().ab(t_next));
      res.noises.push_back(std::move(noise));
    } else {
      tr.x_to = z;
      tr.t_to = 0;
      tr.sigma = 0.0;
    }
    res.transitions.push_back(std::move(tr));
    res.outputs.push_back(std::move(z));
  }
  return res;
}

TwoStepTrace two_step(const ConsistencyModel& f, const Matrix& x_T, const Matrix& Z,
                      std::span<const int> c, int tau_mid, TraceCache* cache) {
  if (tau_mid < 1 || tau_mid >= f.T()) throw std::invalid_argument("mid timestep out of range");
  if (Z.rows() != x_T.rows() || Z.cols() != x_T.cols())
    throw std::invalid_argument("injected noise shape does not match x_T");
  TwoStepTrace tr;
  tr.x_T = x_T;
  tr.Z = Z;
  tr.c.assign(c.begin(), c.end());
  tr.tau0 = f.T();
  tr.tau_mid = tau_mid;
  const int t0 = f.T();
  tr.z1 = f.apply(x_T, std::span<const int>(&t0, 1), c, cache ? &cache->first : nullptr);
  const Matrix x_mid = diffusion::forward_diffuse(tr.z1, tau_mid, Z, f.schedule());
  tr.z2 = f.apply(x_mid, std::span<const int>(&tau_mid, 1), c, cache ? &cache->second : nullptr);
  return tr;
}

TwoStepTrace sample_two_step(const ConsistencyModel& f, std::span<const int> c, int tau_mid,
                             Rng& rng) {
  const auto n = static_cast<Eigen::Index>(c.size());
  const Matrix x_T = rng.normal(f.dim(), n);
  const Matrix Z = rng.normal(f.dim(), n);
  return two_step(f, x_T, Z, c, tau_mid);
}

void trace_backward(const ConsistencyModel& f, const TwoStepTrace& trace, const TraceCache& cache,
                    const Matrix& grad_z1, const Matrix& grad_z2, Vector* grad) {
  const Matrix d_mid = f.backward(cache.second, grad_z2, grad);
  const Matrix d_z1 = grad_z1 + std::sqrt(f.schedule().ab(trace.tau_mid)) * d_mid;
  f.backward(cache.first, d_z1, grad);
}

void ema_update(const Vector& params, Vector& ema, double mu) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw std::invalid_argument("EMA rate must be in [0, 1]");
  if (params.size() != ema.size()) throw std::invalid_argument("EMA parameter size mismatch");
  if (mu == 1.0) return;
  ema = mu * ema + (1.0 - mu) * params;
}

ConsistencyModel distill(const nn::DenoiserNet& teacher, const diffusion::ToyDataset& data,
                         const NoiseSchedule& sched, const DistillTraining& opts,
                         std::uint64_t seed, const std::function<void(int, double)>& on_loss) {
  Rng rng(seed);
  ConsistencyModel student = ConsistencyModel::from_teacher(teacher, sched, opts.sigma_data);
  ConsistencyModel target = student;
  nn::Adam opt(student.param_count(), opts.lr, opts.max_grad_norm);
  std::vector<int> labels;
  for (int it = 0; it < opts.iters; ++it) {
    opt.set_learning_rate(diffusion::cosine_lr(opts.lr, opts.lr_floor, it, opts.iters));
    const Matrix x0 = data.sample_labeled(rng, opts.batch, labels);
    const DistillDraw draw =
        draw_distill(data.dim(), opts.batch, sched.T, opts.skip, rng, opts.sampling);
    Vector grad = Vector::Zero(student.param_count());
    const double loss = distill_loss(student, target, teacher, x0, labels, draw, opts.skip, &grad);
    opt.step(student.params(), grad);
    ema_update(student.params(), target.params(), opts.target_ema);
    if (on_loss) on_loss(it, loss);
  }
  return target;
}

}  // namespace lasro::consistency
