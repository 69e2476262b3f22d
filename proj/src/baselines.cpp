#include "lasro/baselines.hpp"

#include <cmath>
#include <numbers>

namespace lasro::baselines {
namespace {

void apply_theta_update(const FinetuneContext& ctx, FinetuneState& st, const Vector& grad) {
  st.opt_theta.step(st.f.params(), grad);
  consistency::ema_update(st.f.params(), st.ema, ctx.cfg.mu);
  ++st.counters.theta_updates;
}

double add_lcm(const FinetuneContext& ctx, FinetuneState& st, Vector& grad) {
  if (ctx.cfg.c == 0.0) return 0.0;
  const auto batch =
      train::draw_distill_batch(*ctx.teacher, *ctx.dataset, ctx.cfg.distill_batch, st.f.T(),
                                ctx.cfg.skip, st.rng, ctx.cfg.distill_sampling);
  Vector g = Vector::Zero(st.f.param_count());
  const double l = consistency::distill_loss(st.f, st.f, *ctx.teacher, batch.x0, batch.c,
                                             batch.draw, batch.k, &g);
  grad += ctx.cfg.c * g;
  return l;
}

}  // namespace

Vector gaussian_logprob(const ConsistencyModel& f, const Transition& tr) {
  if (!(tr.sigma > 0.0))
    throw NoDensityError("transition " + std::to_string(tr.t_from) + " -> " +
                         std::to_string(tr.t_to) + " is deterministic and has no density");
  const Matrix mean =
      std::sqrt(f.schedule().ab(tr.t_to)) * consistency::cm_apply(f, tr.x_from, tr.t_from, tr.c);
  const double d = static_cast<double>(tr.x_to.rows());
  const double s2 = tr.sigma * tr.sigma;
  Vector out(tr.x_to.cols());
  for (Eigen::Index j = 0; j < out.size(); ++j)
    out[j] = -0.5 * (tr.x_to.col(j) - mean.col(j)).squaredNorm() / s2 -
             0.5 * d * std::log(2.0 * std::numbers::pi * s2);
  return out;
}

std::vector<Transition> two_step_transitions(const ConsistencyModel& f,
                                             const consistency::TwoStepTrace& trace) {
  Transition first;
  first.x_from = trace.x_T;
  first.t_from = trace.tau0;
  first.x_to = diffusion::forward_diffuse(trace.z1, trace.tau_mid, trace.Z, f.schedule());
  first.t_to = trace.tau_mid;
  first.sigma = std::sqrt(1.0 - f.schedule().ab(trace.tau_mid));
  first.c = trace.c;
  Transition second;
  second.x_from = first.x_to;
  second.t_from = trace.tau_mid;
  second.x_to = trace.z2;
  second.t_to = 0;
  second.sigma = 0.0;
  second.c = trace.c;
  return {first, second};
}

double ddpo_gradient(const ConsistencyModel& f, const std::vector<Transition>& transitions,
                     const Vector& rewards, bool use_baseline, bool degenerate, Vector* grad) {
  if (transitions.empty()) throw std::invalid_argument("ddpo: no transitions");
  const std::size_t used = degenerate ? 1 : transitions.size();
  // Every used transition must carry a density before any gradient is formed.
  std::vector<Vector> logps;
  for (std::size_t k = 0; k < used; ++k) logps.push_back(gaussian_logprob(f, transitions[k]));
  const Eigen::Index n = rewards.size();
  const double b = use_baseline ? rewards.mean() : 0.0;
  const Vector adv = rewards.array() - b;
  double objective = 0.0;
  for (std::size_t k = 0; k < used; ++k) {
    const auto& tr = transitions[k];
    objective -= adv.dot(logps[k]) / static_cast<double>(n);
    if (!grad) continue;
    ConsistencyModel::Cache cache;
    const int t = tr.t_from;
    const Matrix y = f.apply(tr.x_from, std::span<const int>(&t, 1), tr.c, &cache);
    const double a = std::sqrt(f.schedule().ab(tr.t_to));
    // d log p / d y = a (x_to - a y) / sigma^2
    Matrix g = (a / (tr.sigma * tr.sigma)) * (tr.x_to - a * y);
    g = g * (-adv / static_cast<double>(n)).asDiagonal();
    f.backward(cache, g, grad);
  }
  return objective;
}

StepInfo ddpo_update(const FinetuneContext& ctx, FinetuneState& st, bool degenerate) {
  StepInfo info;
  auto g = train::sample_group(ctx, st, false, info);
  const auto transitions = two_step_transitions(st.f, g.trace);
  Vector grad = Vector::Zero(st.f.param_count());
  info.loss = ddpo_gradient(st.f, transitions, g.r2, true, degenerate, &grad);
  info.terms.lcm = add_lcm(ctx, st, grad);
  info.loss += ctx.cfg.c * info.terms.lcm;
  apply_theta_update(ctx, st, grad);
  return info;
}

Vector rwr_weights(const Vector& rewards, double temperature) {
  if (rewards.size() == 0) throw std::invalid_argument("rwr: no rewards");
  if (!(temperature > 0.0)) throw std::invalid_argument("rwr: temperature must be positive");
  Vector w = (rewards.array() - rewards.maxCoeff()) / temperature;
  w = w.array().exp();
  return w / w.sum();
}

double rwr_loss(const ConsistencyModel& f, const Matrix& z, std::span<const int> c,
                const Vector& weights, const consistency::DistillDraw& draw, Vector* grad) {
  if (z.cols() == 0 || weights.size() != z.cols())
    throw std::invalid_argument("rwr: weights do not match samples");
  const Matrix x_t = diffusion::forward_diffuse(z, draw.t, draw.noise, f.schedule());
  ConsistencyModel::Cache cache;
  const Matrix y = f.apply(x_t, draw.t, c, grad ? &cache : nullptr);
  // eps-prediction error of f's implied noise: |Z - eps_hat|^2 = snr * |f - z|^2
  const Matrix diff = y - z;
  Vector w(z.cols());
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const double ab = f.schedule().ab(draw.t[j]);
    w[j] = weights[j] * ab / (1.0 - ab);
  }
  double loss = 0.0;
  for (Eigen::Index j = 0; j < z.cols(); ++j) loss += w[j] * diff.col(j).squaredNorm();
  if (grad) f.backward(cache, 2.0 * diff * w.asDiagonal(), grad);
  return loss;
}

StepInfo rwr_update(const FinetuneContext& ctx, FinetuneState& st) {
  StepInfo info;
  auto g = train::sample_group(ctx, st, false, info);
  const Vector w = rwr_weights(g.r2, ctx.cfg.rwr_temperature);
  const auto draw =
      consistency::draw_distill(st.f.dim(), ctx.cfg.Ns, st.f.T(), ctx.cfg.skip, st.rng, {1.0, 1});
  Vector grad = Vector::Zero(st.f.param_count());
  info.loss = rwr_loss(st.f, g.trace.z2, std::span<const int>(&g.c, 1), w, draw, &grad);
  info.terms.lcm = add_lcm(ctx, st, grad);
  info.loss += ctx.cfg.c * info.terms.lcm;
  apply_theta_update(ctx, st, grad);
  return info;
}

int best_index(const Vector& rewards) {
  if (rewards.size() == 0) throw std::invalid_argument("best_index: no rewards");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < rewards.size(); ++i)
    if (rewards[i] > rewards[best]) best = i;
  return static_cast<int>(best);
}

StepInfo gors_update(const FinetuneContext& ctx, FinetuneState& st) {
  StepInfo info;
  auto g = train::sample_group(ctx, st, false, info);
  Matrix x0(st.f.dim(), 2);
  x0.col(0) = g.trace.z1.col(best_index(g.r1));
  x0.col(1) = g.trace.z2.col(best_index(g.r2));
  const auto draw = consistency::draw_distill(st.f.dim(), 2, st.f.T(), ctx.cfg.skip, st.rng,
                                              ctx.cfg.distill_sampling);
  Vector grad = Vector::Zero(st.f.param_count());
  info.loss = consistency::distill_loss(st.f, st.f, *ctx.teacher, x0, std::span<const int>(&g.c, 1),
                                        draw, ctx.cfg.skip, &grad);
  info.terms.lcm = add_lcm(ctx, st, grad);
  info.loss += ctx.cfg.c * info.terms.lcm;
  apply_theta_update(ctx, st, grad);
  return info;
}

StepInfo direct_grad_update(const FinetuneContext& ctx, FinetuneState& st) {
  const auto scorer = train::reward_scorer(*ctx.reward);
  StepInfo info;
  auto g = train::sample_group(ctx, st, false, info);
  const train::RunningStats* s1 = nullptr;
  const train::RunningStats* s2 = nullptr;
  if (ctx.cfg.direct_normalize) {
    for (Eigen::Index j = 0; j < g.r1.size(); ++j) {
      st.stats1.update(g.r1[j]);
      st.stats2.update(g.r2[j]);
    }
    s1 = &st.stats1;
    s2 = &st.stats2;
  }
  const int i1 = st.rng.uniform_int(0, ctx.cfg.Ns - 1);
  const int i2 = st.rng.uniform_int(0, ctx.cfg.Ns - 1);
  const auto batch =
      train::draw_distill_batch(*ctx.teacher, *ctx.dataset, ctx.cfg.distill_batch, st.f.T(),
                                ctx.cfg.skip, st.rng, ctx.cfg.distill_sampling);
  Vector grad = Vector::Zero(st.f.param_count());
  info.loss =
      train::ft_loss(st.f, scorer, g.trace, i1, i2, s1, s2, ctx.cfg, batch, &grad, &info.terms);
  apply_theta_update(ctx, st, grad);
  return info;
}

}  // namespace lasro::baselines
