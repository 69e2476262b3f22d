#include "lasro/train.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace lasro::train {

RunningStats::RunningStats(int window, double decay, double floor)
    : capacity_(window), decay_(decay), floor_(floor), p90_(floor) {
  if (window < 1) throw std::invalid_argument("stats window must be >= 1");
  if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("stats decay must be in [0, 1)");
  if (!(floor > 0.0)) throw std::invalid_argument("stats floor must be positive");
  ring_.reserve(static_cast<std::size_t>(window));
}

double nearest_rank_percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  const auto n = values.size();
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::nth_element(values.begin(), values.begin() + static_cast<long>(rank - 1), values.end());
  return values[rank - 1];
}

void RunningStats::update(double value) {
  if (!std::isfinite(value)) throw std::invalid_argument("update_stats: non-finite value");
  double residual = 0.0;
  if (count_ == 0) {
    mean_ = value;
  } else {
    residual = value - mean_;
    mean_ = decay_ * mean_ + (1.0 - decay_) * value;
  }
  ++count_;
  if (ring_.size() < static_cast<std::size_t>(capacity_)) {
    ring_.push_back(residual);
  } else {
    ring_[head_] = residual;
    head_ = (head_ + 1) % ring_.size();
  }
  p90_ = std::max(nearest_rank_percentile(ring_, 0.9), floor_);
}

double RunningStats::normalize_clip(double value) const {
  if (count_ == 0) throw InvalidStateError("normalize_clip: stats have no observations");
  return std::min(1.0, (value - mean_) / p90_);
}

double RunningStats::normalize_clip_grad(double value) const {
  if (count_ == 0) throw InvalidStateError("normalize_clip: stats have no observations");
  return (value - mean_) / p90_ < 1.0 ? 1.0 / p90_ : 0.0;
}

std::vector<double> RunningStats::window() const {
  std::vector<double> out;
  out.reserve(ring_.size());
  for (std::size_t i = 0; i < ring_.size(); ++i) out.push_back(ring_[(head_ + i) % ring_.size()]);
  return out;
}

void update_stats(RunningStats& stats, double value) { stats.update(value); }
double normalize_clip(const RunningStats& stats, double value) {
  return stats.normalize_clip(value);
}

void TrainConfig::validate() const {
  if (Ns < 2) throw std::invalid_argument("N_s must be >= 2 for pair mining");
  if (N1 < 0 || N2 < 0) throw std::invalid_argument("N1, N2 must be >= 0");
  if (c < 0 || c1 < 0 || c2 < 0) throw std::invalid_argument("loss coefficients must be >= 0");
  if (!(eta > 0 && eta1 > 0 && eta2 > 0)) throw std::invalid_argument("learning rates must be > 0");
  if (!(mu >= 0 && mu <= 1)) throw std::invalid_argument("EMA rate must be in [0, 1]");
  if (skip < 1) throw std::invalid_argument("skip must be >= 1");
  if (distill_batch < 1 || pair_batch < 1) throw std::invalid_argument("batch sizes must be >= 1");
  if (!(rwr_temperature > 0)) throw std::invalid_argument("RWR temperature must be > 0");
  if (!(distill_sampling.t_power > 0) || distill_sampling.substeps < 0)
    throw std::invalid_argument("invalid distillation sampling");
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("buffer capacity must be >= 1");
}

void ReplayBuffer::clear() {
  pairs_.clear();
  tags_.clear();
  ++epoch_;
}

void ReplayBuffer::push(WLPair pair) {
  if (!(pair.r_w > pair.r_l)) throw std::invalid_argument("W/L pair must have r_w > r_l");
  if (pairs_.size() == capacity_) {
    pairs_.erase(pairs_.begin());
    tags_.erase(tags_.begin());
  }
  pairs_.push_back(std::move(pair));
  tags_.push_back(epoch_);
}

std::vector<WLPair> ReplayBuffer::sample(Rng& rng, std::size_t n) const {
  if (pairs_.empty()) throw InvalidStateError("sampling from an empty replay buffer");
  std::vector<WLPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(
        pairs_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pairs_.size()) - 1))]);
  return out;
}

DistillBatch draw_distill_batch(const nn::DenoiserNet& teacher, const diffusion::ToyDataset& data,
                                int batch, int T, int k, Rng& rng,
                                const consistency::DistillSampling& sampling) {
  DistillBatch b;
  b.teacher = &teacher;
  b.k = k;
  b.x0 = data.sample_labeled(rng, batch, b.c);
  b.draw = consistency::draw_distill(data.dim(), batch, T, k, rng, sampling);
  return b;
}

PointScorer surrogate_scorer(const SurrogateReward& R) {
  return [&R](const Vector& z, int c, Vector* dz) {
    SurrogateReward::Cache cache;
    const Matrix s = R.score(Matrix(z), std::span<const int>(&c, 1), dz ? &cache : nullptr);
    if (dz) *dz = R.backward(cache, Matrix::Ones(1, 1), nullptr).col(0);
    return s(0, 0);
  };
}

PointScorer reward_scorer(const RewardSignal& r) {
  if (!r.differentiable())
    throw std::invalid_argument("reward '" + rewards::to_string(r.kind()) +
                                "' is not differentiable");
  return [&r](const Vector& z, int c, Vector* dz) {
    if (dz) *dz = r.gradient(z, c);
    return r.evaluate(z, c);
  };
}

namespace {

double lcm_term(const ConsistencyModel& f, const TrainConfig& cfg, const DistillBatch& batch,
                Vector* grad) {
  if (cfg.c == 0.0) return 0.0;
  if (!batch.teacher || batch.x0.cols() == 0)
    throw std::invalid_argument("fine-tuning loss needs a nonempty distillation batch");
  Vector g;
  if (grad) g = Vector::Zero(f.param_count());
  const double l = consistency::distill_loss(f, f, *batch.teacher, batch.x0, batch.c, batch.draw,
                                             batch.k, grad ? &g : nullptr);
  if (grad) *grad += cfg.c * g;
  return l;
}

// Adds -coef * S[score(z)] and returns d(-coef * S)/dz.
double s_term(const PointScorer& score, const Vector& z, int c, const RunningStats* stats,
              double coef, Vector* dz_out, double* raw) {
  Vector dz;
  const double v = score(z, c, dz_out ? &dz : nullptr);
  *raw = v;
  const double s = stats ? stats->normalize_clip(v) : v;
  if (dz_out) {
    const double ds = stats ? stats->normalize_clip_grad(v) : 1.0;
    *dz_out = -coef * ds * dz;
  }
  return s;
}

}  // namespace

double ft_loss(const ConsistencyModel& f, const PointScorer& score, const TwoStepTrace& trace,
               int i1, int i2, const RunningStats* stats1, const RunningStats* stats2,
               const TrainConfig& cfg, const DistillBatch& batch, Vector* grad,
               FtLossTerms* terms) {
  const auto n = trace.x_T.cols();
  if (i1 < 0 || i1 >= n || i2 < 0 || i2 >= n)
    throw std::invalid_argument("trace index out of range");
  FtLossTerms t;
  t.lcm = lcm_term(f, cfg, batch, grad);
  double loss = cfg.c * t.lcm;
  if (cfg.c1 == 0.0 && cfg.c2 == 0.0) {
    if (terms) *terms = t;
    return loss;
  }

  consistency::TraceCache cache;
  const TwoStepTrace cur =
      consistency::two_step(f, trace.x_T, trace.Z, trace.c, trace.tau_mid, grad ? &cache : nullptr);
  Matrix g1 = Matrix::Zero(cur.z1.rows(), n);
  Matrix g2 = Matrix::Zero(cur.z2.rows(), n);
  const int ci1 = cur.c.size() == 1 ? cur.c[0] : cur.c[static_cast<std::size_t>(i1)];
  const int ci2 = cur.c.size() == 1 ? cur.c[0] : cur.c[static_cast<std::size_t>(i2)];
  if (cfg.c1 != 0.0) {
    Vector dz;
    t.s1 = s_term(score, cur.z1.col(i1), ci1, stats1, cfg.c1, grad ? &dz : nullptr, &t.score1);
    if (grad) g1.col(i1) = dz;
    loss -= cfg.c1 * t.s1;
  }
  if (cfg.c2 != 0.0) {
    Vector dz;
    t.s2 = s_term(score, cur.z2.col(i2), ci2, stats2, cfg.c2, grad ? &dz : nullptr, &t.score2);
    if (grad) g2.col(i2) = dz;
    loss -= cfg.c2 * t.s2;
  }
  if (grad) consistency::trace_backward(f, cur, cache, g1, g2, grad);
  if (terms) *terms = t;
  return loss;
}

double lasro_ft_loss(const ConsistencyModel& f, const SurrogateReward& R, const TwoStepTrace& trace,
                     int i1, int i2, const RunningStats& stats1, const RunningStats& stats2,
                     const TrainConfig& cfg, const DistillBatch& batch, Vector* grad,
                     FtLossTerms* terms) {
  return ft_loss(f, surrogate_scorer(R), trace, i1, i2, &stats1, &stats2, cfg, batch, grad, terms);
}

namespace {

int add_pairs(const TwoStepTrace& tr, int c, const Vector& r1, const Vector& r2,
              std::vector<WLPair>& out) {
  int added = 0;
  if (auto p = rewards::select_wl_pair(tr.z1, c, r1, 1)) {
    out.push_back(std::move(*p));
    ++added;
  }
  if (auto p = rewards::select_wl_pair(tr.z2, c, r2, 2)) {
    out.push_back(std::move(*p));
    ++added;
  }
  return added;
}

int pick_condition(const std::vector<int>& conditions, Rng& rng) {
  if (conditions.empty()) throw std::invalid_argument("no conditions to sample from");
  return conditions[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<int>(conditions.size()) - 1))];
}

}  // namespace

PretrainResult pretrain_surrogate(const TrainConfig& cfg, const ConsistencyModel& f,
                                  SurrogateReward& R, const RewardSignal& r,
                                  const std::vector<int>& conditions, int iters,
                                  std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  nn::Adam opt(R.param_count(), cfg.eta, cfg.max_grad_norm);
  PretrainResult res;
  const int mid = cfg.mid(f.T());
  int dry = 0;
  for (int it = 0; it < iters; ++it) {
    const int c = pick_condition(conditions, rng);
    const auto cs = nn::repeat(c, cfg.Ns);
    const TwoStepTrace tr = consistency::sample_two_step(f, cs, mid, rng);
    const std::span<const int> cspan(&c, 1);
    std::vector<WLPair> pairs;
    add_pairs(tr, c, r.evaluate(tr.z1, cspan), r.evaluate(tr.z2, cspan), pairs);
    if (pairs.empty()) {
      ++res.skipped;
      if (++dry >= cfg.degenerate_patience)
        throw DegenerateRewardError("reward produced no usable pair for " + std::to_string(dry) +
                                    " consecutive iterations");
      continue;
    }
    dry = 0;
    Vector grad = Vector::Zero(R.param_count());
    // Sum of the per-step losses: each mean over one pair.
    double loss = 0.0;
    for (const auto& p : pairs) loss += rewards::surrogate_pair_loss(R, std::span(&p, 1), &grad);
    Vector params = R.get_params();
    opt.step(params, grad);
    R.set_params(params);
    res.losses.push_back(loss);
    res.pairs += static_cast<long>(pairs.size());
  }
  return res;
}

std::vector<WLPair> mine_pairs(const TrainConfig& cfg, const ConsistencyModel& f,
                               const RewardSignal& r, const std::vector<int>& conditions,
                               int groups, Rng& rng) {
  std::vector<WLPair> out;
  const int mid = cfg.mid(f.T());
  for (int g = 0; g < groups; ++g) {
    const int c = pick_condition(conditions, rng);
    const TwoStepTrace tr = consistency::sample_two_step(f, nn::repeat(c, cfg.Ns), mid, rng);
    const std::span<const int> cspan(&c, 1);
    add_pairs(tr, c, r.evaluate(tr.z1, cspan), r.evaluate(tr.z2, cspan), out);
  }
  return out;
}

FinetuneState make_finetune_state(const FinetuneContext& ctx, ConsistencyModel f,
                                  std::optional<SurrogateReward> R, std::uint64_t seed) {
  ctx.cfg.validate();
  if (!ctx.teacher || !ctx.dataset || !ctx.reward)
    throw std::invalid_argument("fine-tuning context is incomplete");
  FinetuneState st{
      .f = std::move(f),
      .ema = {},
      .R = std::move(R),
      .opt_theta = {},
      .opt_psi = {},
      .stats1 = RunningStats(ctx.cfg.window, ctx.cfg.stats_decay, ctx.cfg.stats_floor),
      .stats2 = RunningStats(ctx.cfg.window, ctx.cfg.stats_decay, ctx.cfg.stats_floor),
      .buffer = ReplayBuffer(static_cast<std::size_t>(ctx.cfg.buffer_capacity)),
      .counters = {},
      .rng = Rng(seed),
  };
  st.ema = st.f.params();
  st.opt_theta = nn::Adam(st.f.param_count(), ctx.cfg.eta1, ctx.cfg.max_grad_norm);
  if (st.R) st.opt_psi = nn::Adam(st.R->param_count(), ctx.cfg.eta2, ctx.cfg.max_grad_norm);
  return st;
}

void warmup_stats(const FinetuneContext& ctx, FinetuneState& st) {
  if (!st.R) throw InvalidStateError("stats warm-up needs a surrogate");
  const int mid = ctx.cfg.mid(st.f.T());
  int left = ctx.cfg.stats_warmup;
  while (left > 0) {
    const int n = std::min(left, 64);
    std::vector<int> cs(static_cast<std::size_t>(n));
    for (auto& c : cs) c = pick_condition(ctx.conditions, st.rng);
    const TwoStepTrace tr = consistency::sample_two_step(st.f, cs, mid, st.rng);
    const Matrix s1 = st.R->score(tr.z1, cs);
    const Matrix s2 = st.R->score(tr.z2, cs);
    for (int j = 0; j < n; ++j) {
      st.stats1.update(s1(0, j));
      st.stats2.update(s2(0, j));
    }
    st.counters.warmup_trajectories += n;
    left -= n;
  }
}

Group sample_group(const FinetuneContext& ctx, FinetuneState& st, bool mint_pairs, StepInfo& info) {
  Group g;
  g.c = pick_condition(ctx.conditions, st.rng);
  const auto cs = nn::repeat(g.c, ctx.cfg.Ns);
  g.trace = consistency::sample_two_step(st.f, cs, ctx.cfg.mid(st.f.T()), st.rng);
  const std::span<const int> cspan(&g.c, 1);
  g.r1 = ctx.reward->evaluate(g.trace.z1, cspan);
  g.r2 = ctx.reward->evaluate(g.trace.z2, cspan);
  st.counters.trajectories += ctx.cfg.Ns;
  st.counters.reward_evals += 2L * ctx.cfg.Ns;
  info.reward_1step = g.r1.mean();
  info.reward_2step = g.r2.mean();
  if (mint_pairs) {
    std::vector<WLPair> pairs;
    info.pairs = add_pairs(g.trace, g.c, g.r1, g.r2, pairs);
    for (auto& p : pairs) st.buffer.push(std::move(p));
    st.counters.pairs_minted += info.pairs;
  }
  return g;
}

namespace {

void apply_theta_update(const FinetuneContext& ctx, FinetuneState& st, const Vector& grad) {
  st.opt_theta.step(st.f.params(), grad);
  consistency::ema_update(st.f.params(), st.ema, ctx.cfg.mu);
  ++st.counters.theta_updates;
}

}  // namespace

StepInfo lasro_theta_step(const FinetuneContext& ctx, FinetuneState& st) {
  if (!st.R) throw InvalidStateError("LaSRO step needs a surrogate");
  StepInfo info;
  Group g = sample_group(ctx, st, true, info);
  const Matrix s1 = st.R->score(g.trace.z1, g.trace.c);
  const Matrix s2 = st.R->score(g.trace.z2, g.trace.c);
  for (Eigen::Index j = 0; j < s1.cols(); ++j) {
    st.stats1.update(s1(0, j));
    st.stats2.update(s2(0, j));
  }
  const int i1 = st.rng.uniform_int(0, ctx.cfg.Ns - 1);
  const int i2 = st.rng.uniform_int(0, ctx.cfg.Ns - 1);
  const DistillBatch batch =
      draw_distill_batch(*ctx.teacher, *ctx.dataset, ctx.cfg.distill_batch, st.f.T(), ctx.cfg.skip,
                         st.rng, ctx.cfg.distill_sampling);
  Vector grad = Vector::Zero(st.f.param_count());
  info.loss = lasro_ft_loss(st.f, *st.R, g.trace, i1, i2, st.stats1, st.stats2, ctx.cfg, batch,
                            &grad, &info.terms);
  apply_theta_update(ctx, st, grad);
  return info;
}

bool lasro_psi_step(const FinetuneContext& ctx, FinetuneState& st, double* loss) {
  if (!st.R) throw InvalidStateError("online adaptation needs a surrogate");
  if (st.buffer.empty()) {
    ++st.counters.skipped_adaptations;
    return false;
  }
  const auto pairs = st.buffer.sample(st.rng, static_cast<std::size_t>(ctx.cfg.pair_batch));
  Vector grad = Vector::Zero(st.R->param_count());
  const double l = rewards::surrogate_pair_loss(*st.R, pairs, &grad);
  Vector params = st.R->get_params();
  st.opt_psi.step(params, grad);
  st.R->set_params(params);
  ++st.counters.psi_updates;
  if (loss) *loss = l;
  return true;
}

std::vector<int> alt_ft_grid(int T, int k) {
  if (k < 1 || k > T) throw std::invalid_argument("alt-FT grid needs 1 <= k <= T");
  std::vector<int> grid;
  for (int t = k; t <= T; ++t) grid.push_back(t);
  return grid;
}

double alt_ft_loss(const ConsistencyModel& f, const SurrogateReward& R, const Matrix& x_t,
                   std::span<const int> t, std::span<const int> c, int i, const RunningStats& stats,
                   const TrainConfig& cfg, const DistillBatch& batch, Vector* grad,
                   FtLossTerms* terms) {
  if (i < 0 || i >= x_t.cols()) throw std::invalid_argument("alt-FT index out of range");
  FtLossTerms tm;
  tm.lcm = lcm_term(f, cfg, batch, grad);
  double loss = cfg.c * tm.lcm;
  const double coef = cfg.c1 + cfg.c2;
  if (coef != 0.0) {
    const Matrix xi = x_t.col(i);
    const int ti = t.size() == 1 ? t[0] : t[static_cast<std::size_t>(i)];
    const int cls = c.size() == 1 ? c[0] : c[static_cast<std::size_t>(i)];
    ConsistencyModel::Cache cache;
    const Matrix y = f.apply(xi, std::span<const int>(&ti, 1), std::span<const int>(&cls, 1),
                             grad ? &cache : nullptr);
    Vector dz;
    const auto scorer = surrogate_scorer(R);
    tm.s1 = s_term(scorer, y.col(0), cls, &stats, coef, grad ? &dz : nullptr, &tm.score1);
    loss -= coef * tm.s1;
    if (grad) f.backward(cache, Matrix(dz), grad);
  }
  if (terms) *terms = tm;
  return loss;
}

StepInfo alt_ft_step(const FinetuneContext& ctx, FinetuneState& st) {
  if (!st.R) throw InvalidStateError("alt-FT step needs a surrogate");
  StepInfo info;
  // Trajectories are still sampled so the buffer and the budget match LaSRO.
  Group g = sample_group(ctx, st, true, info);
  const int T = st.f.T();
  const auto grid = alt_ft_grid(T, ctx.cfg.skip);
  const auto cs = nn::repeat(g.c, ctx.cfg.Ns);
  const Matrix x0 = ctx.dataset->sample(st.rng, std::span<const int>(&g.c, 1), ctx.cfg.Ns);
  std::vector<int> ts(static_cast<std::size_t>(ctx.cfg.Ns));
  for (auto& t : ts)
    t = grid[static_cast<std::size_t>(st.rng.uniform_int(0, static_cast<int>(grid.size()) - 1))];
  const Matrix x_t =
      diffusion::forward_diffuse(x0, ts, st.rng.normal(x0.rows(), x0.cols()), st.f.schedule());
  const Matrix y = st.f.apply(x_t, ts, cs);
  const Matrix s = st.R->score(y, cs);
  for (Eigen::Index j = 0; j < s.cols(); ++j) st.stats1.update(s(0, j));
  const int i = st.rng.uniform_int(0, ctx.cfg.Ns - 1);
  const DistillBatch batch = draw_distill_batch(*ctx.teacher, *ctx.dataset, ctx.cfg.distill_batch,
                                                T, ctx.cfg.skip, st.rng, ctx.cfg.distill_sampling);
  Vector grad = Vector::Zero(st.f.param_count());
  info.loss =
      alt_ft_loss(st.f, *st.R, x_t, ts, cs, i, st.stats1, ctx.cfg, batch, &grad, &info.terms);
  apply_theta_update(ctx, st, grad);
  return info;
}

}  // namespace lasro::train
