#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lasro/consistency.hpp"
#include "lasro/diffusion.hpp"
#include "lasro/rewards.hpp"

namespace lasro::analysis {

using consistency::ConsistencyModel;
using consistency::TwoStepTrace;

/// sqrt(1 - eps^2) z + eps z', z' ~ N(0, I), column-wise.
Matrix perturb_neighbor(const Matrix& z, double epsilon, std::uint64_t seed);
Matrix perturb_neighbor(const Matrix& z, double epsilon, const Matrix& z_prime);

/// Scalar quality of a generated point.
using QualityFn = std::function<double(const Vector& x, int c)>;

QualityFn reward_quality(const rewards::RewardSignal& r);
/// Negative log-density of the mixture dataset (class-free).
QualityFn density_quality(const diffusion::ToyDataset& data);

struct LipschitzReport {
  std::vector<int> t_levels;
  std::vector<double> estimates;
  std::vector<long> skipped;
  int N = 0;
  double epsilon = 0.0;
};

/// Mean over N draws of |q(f(x_t)) - q(f(x_t(eps)))| / ||x_t - x_t(eps)||,
/// where x_t re-noises the first-step output to level t. Draws share x_T, the
/// injected noise and the perturbation direction across levels.
LipschitzReport local_lipschitz(const ConsistencyModel& f, const QualityFn& quality,
                                const std::vector<int>& t_levels, double epsilon, int N,
                                const std::vector<int>& conditions, std::uint64_t seed);

/// Levels {20, 50, 100, 200, 500} of a 1000-step grid mapped onto T.
std::vector<int> default_lipschitz_levels(int T);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

using ScoreFn = std::function<double(const Vector& z, int c)>;

struct TdCheck {
  double l_td = 0.0;
  double l_two_term = 0.0;
  double max_abs_diff = 0.0;
};

/// Horizon-2 TD loss against the per-step L2 regression sum over traces.
TdCheck td_equivalence_check(const ScoreFn& R, const ScoreFn& r,
                             const std::vector<TwoStepTrace>& traces, double gamma);

struct DiversityRow {
  int H = 0;
  double variance = 0.0;  // mean over conditions of trace(cov)
  double std_error = 0.0;
};

/// Output variance under injected noise with x_T fixed per condition.
std::vector<DiversityRow> diversity_probe(const ConsistencyModel& f,
                                          const std::vector<int>& conditions,
                                          const std::vector<int>& H_list, int draws,
                                          std::uint64_t seed);

/// Exact 1-D Wasserstein-1 distance between two empirical distributions.
double wasserstein1_1d(std::vector<double> a, std::vector<double> b);

/// Mean 1-D W1 over seeded random unit projections.
double fidelity_proxy(const Matrix& a, const Matrix& b, int projections, std::uint64_t seed);

/// Fixed evaluation inputs so every method is scored on the same noises.
struct EvalSet {
  Matrix x_T;
  Matrix Z;
  std::vector<int> c;
  Matrix reference;  // held-out data with matching labels
};

EvalSet make_eval_set(const diffusion::ToyDataset& data, const std::vector<int>& conditions,
                      int per_condition, std::uint64_t seed);

struct EvalResult {
  double reward_1step = 0.0;
  double reward_2step = 0.0;
  double fidelity = 0.0;
};

EvalResult evaluate_sampler(const ConsistencyModel& f, const EvalSet& eval,
                            const rewards::RewardSignal& r, int tau_mid, int projections = 64,
                            std::uint64_t seed = 7);

struct TradeoffInput {
  long step = 0;
  std::function<ConsistencyModel()> load;
};

struct TradeoffRow {
  long step = 0;
  double reward_2step = 0.0;
  double fidelity = 0.0;
  std::string error;  // nonempty when the checkpoint could not be evaluated
};

std::vector<TradeoffRow> tradeoff_report(const std::vector<TradeoffInput>& checkpoints,
                                         const rewards::RewardSignal& r, const EvalSet& eval,
                                         int tau_mid, std::uint64_t seed);
void write_tradeoff_csv(const std::vector<TradeoffRow>& rows, const std::string& path);

}  // namespace lasro::analysis
