#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lasro/analysis.hpp"
#include "lasro/train.hpp"

namespace lasro::runner {

enum class Method { kLasro, kDdpo, kRwr, kGors, kDirect, kAltFt };

Method parse_method(const std::string& name);
std::string to_string(Method m);
bool needs_surrogate(Method m);

struct RunOptions {
  long steps = 2000;    // theta updates
  long eval_every = 0;  // 0 disables periodic evaluation
  std::vector<long> snapshot_steps;
  const analysis::EvalSet* eval = nullptr;
  int eval_projections = 64;
  /// Called after every theta update with (step, diagnostics).
  std::function<void(long, const train::StepInfo&)> on_step;
  /// Called for every evaluation with (step, result of the EMA sampler).
  std::function<void(long, const analysis::EvalResult&)> on_eval;
  /// Called when a psi update runs or is skipped: (step, ran, loss).
  std::function<void(long, bool, double)> on_adapt;
};

struct FinetuneResult {
  consistency::ConsistencyModel f;  // raw parameters
  Vector ema;
  std::optional<rewards::SurrogateReward> R;
  train::Counters counters;
  std::vector<std::pair<long, analysis::EvalResult>> evals;
  std::map<long, Vector> snapshots;  // EMA parameters by step
};

/// Alternates N1 theta updates and N2 psi updates (surrogate methods) or runs
/// plain theta updates (baselines) until `steps` theta updates are done.
FinetuneResult run_finetune(Method method, const train::FinetuneContext& ctx,
                            consistency::ConsistencyModel f,
                            std::optional<rewards::SurrogateReward> R, std::uint64_t seed,
                            const RunOptions& options);

/// The LaSRO fine-tuning loop for `outer_iters` outer iterations.
FinetuneResult finetune_lasro(const train::FinetuneContext& ctx, consistency::ConsistencyModel f,
                              rewards::SurrogateReward R, long outer_iters, std::uint64_t seed,
                              RunOptions options = {});

/// Copy of `f` carrying the given parameters.
consistency::ConsistencyModel with_params(const consistency::ConsistencyModel& f, const Vector& p);

}  // namespace lasro::runner
