#include "lasro/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace lasro::diffusion {
namespace {

int pick(std::span<const int> v, Eigen::Index j) {
  return v.size() == 1 ? v[0] : v[static_cast<std::size_t>(j)];
}

}  // namespace

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::kLinear;
  if (name == "cosine") return ScheduleKind::kCosine;
  throw std::invalid_argument("unknown schedule kind '" + name + "'");
}

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::kLinear ? "linear" : "cosine";
}

double NoiseSchedule::noise_level(int t) const {
  const double a = ab(t);
  return std::sqrt((1.0 - a) / a);
}

NoiseSchedule make_schedule(int T, ScheduleKind kind, double beta_min, double beta_max) {
  if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
    throw std::invalid_argument("betas must satisfy 0 < beta_min <= beta_max < 1");

  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  if (kind == ScheduleKind::kLinear) {
    for (int t = 1; t <= T; ++t) {
      const double u = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
      s.beta[static_cast<std::size_t>(t - 1)] = beta_min + (beta_max - beta_min) * u;
    }
  } else {
    constexpr double offset = 0.008;
    auto profile = [&](int t) {
      const double c =
          std::cos((static_cast<double>(t) / T + offset) / (1.0 + offset) * std::numbers::pi / 2);
      return c * c;
    };
    for (int t = 1; t <= T; ++t) {
      const double b = 1.0 - profile(t) / profile(t - 1);
      s.beta[static_cast<std::size_t>(t - 1)] = std::clamp(b, beta_min, beta_max);
    }
  }
  s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t)
    s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t - 1)] *
                                               (1.0 - s.beta[static_cast<std::size_t>(t - 1)]);
  s.sigma.resize(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t) {
    const double b = s.beta[static_cast<std::size_t>(t - 1)];
    const double var = b * (1.0 - s.ab(t - 1)) / (1.0 - s.ab(t));
    s.sigma[static_cast<std::size_t>(t - 1)] = std::sqrt(std::max(var, 0.0));
  }
  return s;
}

Matrix forward_diffuse(const Matrix& x0, int t, const Matrix& noise, const NoiseSchedule& sched) {
  const int ts[] = {t};
  return forward_diffuse(x0, ts, noise, sched);
}

Matrix forward_diffuse(const Matrix& x0, std::span<const int> t, const Matrix& noise,
                       const NoiseSchedule& sched) {
  if (x0.rows() != noise.rows() || x0.cols() != noise.cols())
    throw std::invalid_argument("forward_diffuse: noise shape does not match x0");
  if (t.size() != 1 && static_cast<Eigen::Index>(t.size()) != x0.cols())
    throw std::invalid_argument("forward_diffuse: timestep count does not match batch");
  Matrix out(x0.rows(), x0.cols());
  for (Eigen::Index j = 0; j < x0.cols(); ++j) {
    const int tj = pick(t, j);
    if (tj < 0 || tj > sched.T)
      throw std::invalid_argument("forward_diffuse: timestep out of range");
    if (tj == 0) {
      out.col(j) = x0.col(j);
      continue;
    }
    const double a = sched.ab(tj);
    out.col(j) = std::sqrt(a) * x0.col(j) + std::sqrt(1.0 - a) * noise.col(j);
  }
  return out;
}

DdpmDraw draw_ddpm(Eigen::Index dim, Eigen::Index batch, const NoiseSchedule& sched, Rng& rng) {
  DdpmDraw d;
  d.t.resize(static_cast<std::size_t>(batch));
  for (auto& t : d.t) t = rng.uniform_int(1, sched.T);
  d.noise = rng.normal(dim, batch);
  return d;
}

double ddpm_loss(const nn::DenoiserNet& net, const Matrix& x0, std::span<const int> c,
                 const DdpmDraw& draw, const NoiseSchedule& sched, Vector* grad) {
  if (x0.cols() == 0) throw std::invalid_argument("ddpm_loss: empty batch");
  const Matrix x_t = forward_diffuse(x0, draw.t, draw.noise, sched);
  nn::NetCache cache;
  const Matrix eps = net.forward(x_t, draw.t, c, grad ? &cache : nullptr);
  const Matrix diff = eps - draw.noise;
  const double n = static_cast<double>(x0.cols());
  if (grad) net.backward(cache, (2.0 / n) * diff, grad);
  return diff.squaredNorm() / n;
}

double ddpm_loss(const nn::DenoiserNet& net, const Matrix& x0, std::span<const int> c,
                 const NoiseSchedule& sched, std::uint64_t seed, Vector* grad) {
  if (x0.cols() == 0) throw std::invalid_argument("ddpm_loss: empty batch");
  Rng rng(seed);
  return ddpm_loss(net, x0, c, draw_ddpm(x0.rows(), x0.cols(), sched, rng), sched, grad);
}

double ddpm_loss(const EpsPredictor& eps, const Matrix& x0, std::span<const int> c,
                 const DdpmDraw& draw, const NoiseSchedule& sched) {
  if (x0.cols() == 0) throw std::invalid_argument("ddpm_loss: empty batch");
  const Matrix x_t = forward_diffuse(x0, draw.t, draw.noise, sched);
  return (eps(x_t, draw.t, c) - draw.noise).squaredNorm() / static_cast<double>(x0.cols());
}

Matrix ddim_step(const EpsPredictor& eps, const Matrix& x_t, std::span<const int> t,
                 std::span<const int> t_prev, std::span<const int> c, const NoiseSchedule& sched) {
  if (t.size() != t_prev.size()) throw std::invalid_argument("ddim_step: size mismatch");
  for (std::size_t j = 0; j < t.size(); ++j)
    if (t_prev[j] < 0 || t_prev[j] > t[j] || t[j] > sched.T)
      throw std::invalid_argument("ddim_step: timesteps out of range");
  const Matrix e = eps(x_t, t, c);
  Matrix out(x_t.rows(), x_t.cols());
  for (Eigen::Index j = 0; j < x_t.cols(); ++j) {
    const std::size_t k = t.size() == 1 ? 0 : static_cast<std::size_t>(j);
    if (t_prev[k] == t[k]) {
      out.col(j) = x_t.col(j);
      continue;
    }
    const double a = sched.ab(t[k]);
    const double a_prev = sched.ab(t_prev[k]);
    const Vector x0 = (x_t.col(j) - std::sqrt(1.0 - a) * e.col(j)) / std::sqrt(a);
    out.col(j) = std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * e.col(j);
  }
  return out;
}

std::vector<int> sampling_grid(int T, int steps) {
  if (steps < 1 || steps > T) throw std::invalid_argument("sampling grid needs 1 <= steps <= T");
  std::vector<int> grid;
  grid.reserve(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i)
    grid.push_back(static_cast<int>(std::lround(static_cast<double>(T) * (steps - i) / steps)));
  return grid;
}

Matrix ddpm_sample(const nn::DenoiserNet& net, std::span<const int> c, const NoiseSchedule& sched,
                   int steps, std::uint64_t seed, SampleOptions options) {
  if (steps < 1 || steps > sched.T)
    throw std::invalid_argument("ddpm_sample: steps must be in [1, T]");
  Rng rng(seed);
  const Matrix x_T = rng.normal(net.shape().dim, static_cast<Eigen::Index>(c.size()));
  return ddpm_sample_from(net, x_T, c, sched, steps, rng, options);
}

Matrix ddpm_sample_from(const nn::DenoiserNet& net, const Matrix& x_T, std::span<const int> c,
                        const NoiseSchedule& sched, int steps, Rng& rng, SampleOptions options) {
  const auto grid = sampling_grid(sched.T, steps);
  Matrix x = x_T;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const int t = grid[i];
    const int t_prev = i + 1 < grid.size() ? grid[i + 1] : 0;
    const double a = sched.ab(t);
    const double a_prev = sched.ab(t_prev);
    const double beta_eff = 1.0 - a / a_prev;
    const Matrix eps = net.forward(x, std::span<const int>(&t, 1), c);
    const Matrix x0_pred = (x - std::sqrt(1.0 - a) * eps) / std::sqrt(a);
    Matrix mean = (std::sqrt(a_prev) * beta_eff / (1.0 - a)) * x0_pred +
                  (std::sqrt(1.0 - beta_eff) * (1.0 - a_prev) / (1.0 - a)) * x;
    const double var = beta_eff * (1.0 - a_prev) / (1.0 - a);
    if (t_prev > 0 && !options.zero_sigma && var > 0.0)
      mean += std::sqrt(var) * rng.normal(x.rows(), x.cols());
    x = std::move(mean);
  }
  return x;
}

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "mixture" || name == "mixture-of-gaussians") return DatasetKind::kMixture;
  if (name == "spiral") return DatasetKind::kSpiral;
  if (name == "checkerboard") return DatasetKind::kCheckerboard;
  throw std::invalid_argument("unknown dataset kind '" + name + "'");
}

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kMixture:
      return "mixture";
    case DatasetKind::kSpiral:
      return "spiral";
    case DatasetKind::kCheckerboard:
      return "checkerboard";
  }
  return "mixture";
}

ToyDataset::ToyDataset(DatasetKind kind, int dim, int num_classes, std::uint64_t seed,
                       DatasetParams params)
    : kind_(kind), dim_(dim), classes_(num_classes), seed_(seed), params_(params) {
  if (dim < 2 || dim > 16) throw std::invalid_argument("dataset dimension must be in [2, 16]");
  if (num_classes < 1) throw std::invalid_argument("dataset needs at least one class");
  if (!(params.radius >= 0.0) || !(params.spread > 0.0))
    throw std::invalid_argument("dataset radius/spread out of range");
  Rng rng(mix_seed(seed, 11));
  const double phase = rng.uniform() * 2.0 * std::numbers::pi / num_classes;
  means_ = Matrix::Zero(dim, num_classes);
  for (int c = 0; c < num_classes; ++c) {
    const double angle = phase + 2.0 * std::numbers::pi * c / num_classes;
    means_(0, c) = params.radius * std::cos(angle);
    means_(1, c) = params.radius * std::sin(angle);
  }
}

Vector ToyDataset::sample(Rng& rng, int c) const {
  if (c < 0 || c >= classes_) throw std::invalid_argument("class label out of range");
  Vector x(dim_);
  switch (kind_) {
    case DatasetKind::kMixture:
      for (int i = 0; i < dim_; ++i) x[i] = means_(i, c) + params_.spread * rng.normal();
      break;
    case DatasetKind::kSpiral: {
      const double u = rng.uniform();
      const double r = params_.radius * (0.2 + 0.8 * u);
      const double angle = 3.0 * u + 2.0 * std::numbers::pi * c / classes_;
      x[0] = r * std::cos(angle) + 0.1 * params_.spread * rng.normal();
      x[1] = r * std::sin(angle) + 0.1 * params_.spread * rng.normal();
      for (int i = 2; i < dim_; ++i) x[i] = 0.1 * params_.spread * rng.normal();
      break;
    }
    case DatasetKind::kCheckerboard: {
      const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(classes_))));
      const double cell = 2.0 * params_.radius / side;
      const int row = c / side;
      const int col = c % side;
      x[0] = -params_.radius + cell * (col + rng.uniform());
      x[1] = -params_.radius + cell * (row + rng.uniform());
      for (int i = 2; i < dim_; ++i) x[i] = 0.1 * params_.spread * rng.normal();
      break;
    }
  }
  return x;
}

Matrix ToyDataset::sample(Rng& rng, std::span<const int> c, Eigen::Index n) const {
  Matrix out(dim_, n);
  for (Eigen::Index j = 0; j < n; ++j) out.col(j) = sample(rng, pick(c, j));
  return out;
}

Matrix ToyDataset::sample_labeled(Rng& rng, Eigen::Index n, std::vector<int>& labels) const {
  labels.resize(static_cast<std::size_t>(n));
  Matrix out(dim_, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    labels[static_cast<std::size_t>(j)] = rng.uniform_int(0, classes_ - 1);
    out.col(j) = sample(rng, labels[static_cast<std::size_t>(j)]);
  }
  return out;
}

double ToyDataset::class_log_density(const Vector& x, int c) const {
  if (kind_ != DatasetKind::kMixture)
    throw std::invalid_argument("analytic density only available for the mixture dataset");
  const double s2 = params_.spread * params_.spread;
  return -0.5 * (x - means_.col(c)).squaredNorm() / s2 -
         0.5 * dim_ * std::log(2.0 * std::numbers::pi * s2);
}

double ToyDataset::log_density(const Vector& x) const {
  std::vector<double> terms(static_cast<std::size_t>(classes_));
  for (int c = 0; c < classes_; ++c) terms[static_cast<std::size_t>(c)] = class_log_density(x, c);
  const double m = *std::max_element(terms.begin(), terms.end());
  double acc = 0.0;
  for (double v : terms) acc += std::exp(v - m);
  return m + std::log(acc) - std::log(static_cast<double>(classes_));
}

Vector ToyDataset::component_mean(int c) const {
  if (c < 0 || c >= classes_) throw std::invalid_argument("class label out of range");
  return means_.col(c);
}

double ToyDataset::component_std() const { return params_.spread; }

nn::DenoiserNet train_teacher(const ToyDataset& data, const NoiseSchedule& sched,
                              const nn::NetShape& shape, const TeacherTraining& opts,
                              std::uint64_t seed, const std::function<void(int, double)>& on_loss) {
  if (shape.dim != data.dim() || shape.num_classes != data.num_classes() ||
      shape.horizon != sched.T)
    throw std::invalid_argument("teacher shape does not match dataset/schedule");
  Rng rng(seed);
  nn::DenoiserNet net(shape);
  net.init(rng);
  nn::Adam opt(net.param_count(), opts.lr, opts.max_grad_norm);
  Vector ema = net.params();
  std::vector<int> labels;
  for (int it = 0; it < opts.iters; ++it) {
    opt.set_learning_rate(cosine_lr(opts.lr, opts.lr_floor, it, opts.iters));
    const Matrix x0 = data.sample_labeled(rng, opts.batch, labels);
    const DdpmDraw draw = draw_ddpm(data.dim(), opts.batch, sched, rng);
    Vector grad = Vector::Zero(net.param_count());
    const double loss = ddpm_loss(net, x0, labels, draw, sched, &grad);
    opt.step(net.params(), grad);
    ema = opts.ema * ema + (1.0 - opts.ema) * net.params();
    if (on_loss) on_loss(it, loss);
  }
  net.params() = ema;
  return net;
}

double cosine_lr(double lr, double floor, int it, int iters) {
  if (iters <= 1) return lr;
  const double u = static_cast<double>(it) / static_cast<double>(iters - 1);
  return lr * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * u)));
}

ToyDataset make_toy_dataset(const std::string& kind, int dim, int num_classes, std::uint64_t seed,
                            DatasetParams params) {
  return ToyDataset(parse_dataset_kind(kind), dim, num_classes, seed, params);
}

}  // namespace lasro::diffusion
