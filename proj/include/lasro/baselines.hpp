#pragma once

#include "lasro/consistency.hpp"
#include "lasro/train.hpp"

namespace lasro::baselines {

using consistency::ConsistencyModel;
using consistency::Transition;
using train::FinetuneContext;
using train::FinetuneState;
using train::StepInfo;

/// Per-column log N(x_to | sqrt(ab[t_to]) f(x_from, t_from, c), sigma^2 I).
/// Throws NoDensityError for a deterministic transition.
Vector gaussian_logprob(const ConsistencyModel& f, const Transition& tr);

/// Transitions of the two-step sampler for a recorded trace.
std::vector<Transition> two_step_transitions(const ConsistencyModel& f,
                                             const consistency::TwoStepTrace& trace);

/// REINFORCE gradient of -mean((r - b) log p) over the transitions that carry
/// a density. `degenerate` restricts the sum to the first transition;
/// otherwise every transition is used and a deterministic one raises
/// NoDensityError. Returns the surrogate objective value.
double ddpo_gradient(const ConsistencyModel& f, const std::vector<Transition>& transitions,
                     const Vector& rewards, bool use_baseline, bool degenerate, Vector* grad);

/// One DDPO update on N_s freshly sampled traces plus c * L_lcm.
StepInfo ddpo_update(const FinetuneContext& ctx, FinetuneState& st, bool degenerate);

/// softmax(r / temperature).
Vector rwr_weights(const Vector& rewards, double temperature);

/// Noise-prediction loss sum_i w_i ||Z_i - eps_hat_i||^2 at x_t_i = noised z_i, i.e.
/// sum_i w_i snr(t_i) ||f(x_t_i, t_i, c_i) - z_i||^2.
double rwr_loss(const ConsistencyModel& f, const Matrix& z, std::span<const int> c,
                const Vector& weights, const consistency::DistillDraw& draw, Vector* grad);

/// Weighted regression toward the group's final samples plus c * L_lcm.
StepInfo rwr_update(const FinetuneContext& ctx, FinetuneState& st);

/// Index of the best sample, lowest index on ties.
int best_index(const Vector& rewards);

/// Distillation loss on the best first- and second-step samples plus c * L_lcm.
StepInfo gors_update(const FinetuneContext& ctx, FinetuneState& st);

/// LaSRO's theta step with the true reward gradient in place of the surrogate.
StepInfo direct_grad_update(const FinetuneContext& ctx, FinetuneState& st);

}  // namespace lasro::baselines
