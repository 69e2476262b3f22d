#include "lasro/runner.hpp"

#include "lasro/baselines.hpp"

namespace lasro::runner {

Method parse_method(const std::string& name) {
  if (name == "lasro") return Method::kLasro;
  if (name == "ddpo") return Method::kDdpo;
  if (name == "rwr") return Method::kRwr;
  if (name == "gors") return Method::kGors;
  if (name == "direct") return Method::kDirect;
  if (name == "altft") return Method::kAltFt;
  throw std::invalid_argument("unknown method '" + name + "'");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::kLasro:
      return "lasro";
    case Method::kDdpo:
      return "ddpo";
    case Method::kRwr:
      return "rwr";
    case Method::kGors:
      return "gors";
    case Method::kDirect:
      return "direct";
    case Method::kAltFt:
      return "altft";
  }
  return "lasro";
}

bool needs_surrogate(Method m) { return m == Method::kLasro || m == Method::kAltFt; }

consistency::ConsistencyModel with_params(const consistency::ConsistencyModel& f, const Vector& p) {
  consistency::ConsistencyModel g = f;
  if (p.size() != g.param_count()) throw std::invalid_argument("parameter size mismatch");
  g.params() = p;
  return g;
}

namespace {

train::StepInfo theta_step(Method m, const train::FinetuneContext& ctx, train::FinetuneState& st) {
  switch (m) {
    case Method::kLasro:
      return train::lasro_theta_step(ctx, st);
    case Method::kAltFt:
      return train::alt_ft_step(ctx, st);
    case Method::kDdpo:
      return baselines::ddpo_update(ctx, st, true);
    case Method::kRwr:
      return baselines::rwr_update(ctx, st);
    case Method::kGors:
      return baselines::gors_update(ctx, st);
    case Method::kDirect:
      return baselines::direct_grad_update(ctx, st);
  }
  throw std::invalid_argument("unknown method");
}

}  // namespace

FinetuneResult run_finetune(Method method, const train::FinetuneContext& ctx,
                            consistency::ConsistencyModel f,
                            std::optional<rewards::SurrogateReward> R, std::uint64_t seed,
                            const RunOptions& options) {
  if (needs_surrogate(method) && !R)
    throw PreconditionError("method '" + to_string(method) + "' needs a pre-trained surrogate");
  if (method == Method::kDirect)
    train::reward_scorer(*ctx.reward);  // rejects non-differentiable rewards
  if (!needs_surrogate(method)) R.reset();
  auto st = train::make_finetune_state(ctx, std::move(f), std::move(R), seed);
  if (needs_surrogate(method)) train::warmup_stats(ctx, st);

  FinetuneResult res;
  const int mid = ctx.cfg.mid(st.f.T());
  auto evaluate = [&](long step) {
    if (!options.eval) return;
    const auto ema_model = with_params(st.f, st.ema);
    const auto r = analysis::evaluate_sampler(ema_model, *options.eval, *ctx.reward, mid,
                                              options.eval_projections);
    res.evals.emplace_back(step, r);
    if (options.on_eval) options.on_eval(step, r);
  };
  auto after_theta = [&](long step, const train::StepInfo& info) {
    if (options.on_step) options.on_step(step, info);
    if (options.eval_every > 0 && step % options.eval_every == 0) evaluate(step);
    for (long s : options.snapshot_steps)
      if (s == step) res.snapshots[step] = st.ema;
  };

  if (options.eval_every > 0) evaluate(0);
  for (long s : options.snapshot_steps)
    if (s == 0) res.snapshots[0] = st.ema;

  long step = 0;
  if (needs_surrogate(method)) {
    const long n1 = std::max(ctx.cfg.N1, 1);
    while (step < options.steps) {
      st.buffer.clear();
      for (long i = 0; i < n1 && step < options.steps; ++i) {
        const auto info = theta_step(method, ctx, st);
        after_theta(++step, info);
      }
      for (int j = 0; j < ctx.cfg.N2; ++j) {
        double loss = 0.0;
        const bool ran = train::lasro_psi_step(ctx, st, &loss);
        if (options.on_adapt) options.on_adapt(step, ran, loss);
        if (!ran) break;
      }
    }
  } else {
    while (step < options.steps) {
      const auto info = theta_step(method, ctx, st);
      after_theta(++step, info);
    }
  }
  if (options.eval_every <= 0 || step % options.eval_every != 0) evaluate(step);

  res.counters = st.counters;
  res.ema = st.ema;
  res.R = std::move(st.R);
  res.f = std::move(st.f);
  return res;
}

FinetuneResult finetune_lasro(const train::FinetuneContext& ctx, consistency::ConsistencyModel f,
                              rewards::SurrogateReward R, long outer_iters, std::uint64_t seed,
                              RunOptions options) {
  if (ctx.cfg.N1 < 1) throw std::invalid_argument("finetune_lasro needs N1 >= 1");
  options.steps = outer_iters * ctx.cfg.N1;
  return run_finetune(Method::kLasro, ctx, std::move(f), std::move(R), seed, options);
}

}  // namespace lasro::runner
