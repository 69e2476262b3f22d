#include "lasro/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace lasro::analysis {

Matrix perturb_neighbor(const Matrix& z, double epsilon, std::uint64_t seed) {
  Rng rng(seed);
  return perturb_neighbor(z, epsilon, rng.normal(z.rows(), z.cols()));
}

Matrix perturb_neighbor(const Matrix& z, double epsilon, const Matrix& z_prime) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("epsilon must be in (0, 1)");
  if (z_prime.rows() != z.rows() || z_prime.cols() != z.cols())
    throw std::invalid_argument("perturbation shape mismatch");
  return std::sqrt(1.0 - epsilon * epsilon) * z + epsilon * z_prime;
}

QualityFn reward_quality(const rewards::RewardSignal& r) {
  return [&r](const Vector& x, int c) { return r.evaluate(x, c); };
}

QualityFn density_quality(const diffusion::ToyDataset& data) {
  if (!data.has_log_density()) throw std::invalid_argument("dataset has no analytic density");
  return [&data](const Vector& x, int) { return -data.log_density(x); };
}

LipschitzReport local_lipschitz(const ConsistencyModel& f, const QualityFn& quality,
                                const std::vector<int>& t_levels, double epsilon, int N,
                                const std::vector<int>& conditions, std::uint64_t seed) {
  if (N < 100) throw std::invalid_argument("local_lipschitz needs N >= 100");
  if (conditions.empty()) throw std::invalid_argument("local_lipschitz needs conditions");
  for (int t : t_levels)
    if (t < 1 || t > f.T()) throw std::invalid_argument("noise level outside the grid");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("epsilon must be in (0, 1)");

  Rng rng(seed);
  const int d = f.dim();
  std::vector<int> cs(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n)
    cs[static_cast<std::size_t>(n)] = conditions[static_cast<std::size_t>(n) % conditions.size()];
  const Matrix x_T = rng.normal(d, N);
  const Matrix Z = rng.normal(d, N);
  const Matrix z_prime = rng.normal(d, N);
  const Matrix z1 = consistency::cm_apply(f, x_T, f.T(), cs);

  LipschitzReport rep;
  rep.t_levels = t_levels;
  rep.N = N;
  rep.epsilon = epsilon;
  for (int t : t_levels) {
    const Matrix x = diffusion::forward_diffuse(z1, t, Z, f.schedule());
    const Matrix x_eps = perturb_neighbor(x, epsilon, z_prime);
    const Matrix y = consistency::cm_apply(f, x, t, cs);
    const Matrix y_eps = consistency::cm_apply(f, x_eps, t, cs);
    double acc = 0.0;
    long used = 0, skipped = 0;
    for (int n = 0; n < N; ++n) {
      const double denom = (x.col(n) - x_eps.col(n)).norm();
      if (denom == 0.0) {
        ++skipped;
        continue;
      }
      const int c = cs[static_cast<std::size_t>(n)];
      acc += std::abs(quality(y.col(n), c) - quality(y_eps.col(n), c)) / denom;
      ++used;
    }
    rep.estimates.push_back(used > 0 ? acc / static_cast<double>(used) : 0.0);
    rep.skipped.push_back(skipped);
  }
  return rep;
}

std::vector<int> default_lipschitz_levels(int T) {
  std::vector<int> out;
  for (int level : {20, 50, 100, 200, 500})
    out.push_back(std::max(1, static_cast<int>(std::lround(level * T / 1000.0))));
  return out;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw std::invalid_argument("spearman: bad input sizes");
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

TdCheck td_equivalence_check(const ScoreFn& R, const ScoreFn& r,
                             const std::vector<TwoStepTrace>& traces, double gamma) {
  if (traces.empty()) throw std::invalid_argument("td check needs traces");
  // Generic Bellman form over the horizon-2 episode of every trace column:
  // step k scores z_{k+1}; the bootstrap is the next step's score, absent at the end.
  double td = 0.0;
  double first = 0.0, second = 0.0;
  long count = 0;
  for (const auto& tr : traces) {
    for (Eigen::Index j = 0; j < tr.z1.cols(); ++j) {
      const int c = tr.c.size() == 1 ? tr.c[0] : tr.c[static_cast<std::size_t>(j)];
      const Vector outputs[2] = {tr.z1.col(j), tr.z2.col(j)};
      for (int k = 0; k < 2; ++k) {
        const double boot = k + 1 < 2 ? R(outputs[k + 1], c) : 0.0;
        const double target = r(outputs[k], c) + gamma * boot;
        const double e = R(outputs[k], c) - target;
        td += e * e;
      }
      const double e1 = R(outputs[0], c) - r(outputs[0], c);
      const double e2 = R(outputs[1], c) - r(outputs[1], c);
      first += e1 * e1;
      second += e2 * e2;
      ++count;
    }
  }
  TdCheck out;
  out.l_td = td / static_cast<double>(count);
  out.l_two_term = first / static_cast<double>(count) + second / static_cast<double>(count);
  out.max_abs_diff = std::abs(out.l_td - out.l_two_term);
  return out;
}

std::vector<DiversityRow> diversity_probe(const ConsistencyModel& f,
                                          const std::vector<int>& conditions,
                                          const std::vector<int>& H_list, int draws,
                                          std::uint64_t seed) {
  if (conditions.empty() || H_list.empty())
    throw std::invalid_argument("diversity probe: empty input");
  if (draws < 2) throw std::invalid_argument("diversity probe needs >= 2 draws");
  for (int H : H_list) consistency::cm_grid(f.T(), H);
  Rng rng(seed);
  const Matrix anchors = rng.normal(f.dim(), static_cast<Eigen::Index>(conditions.size()));
  std::vector<DiversityRow> rows;
  for (std::size_t h = 0; h < H_list.size(); ++h) {
    const int H = H_list[h];
    double var_sum = 0.0, se2_sum = 0.0;
    for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
      Rng noise_rng(mix_seed(seed, 1000 * (h + 1) + ci));
      const int c = conditions[ci];
      const std::span<const int> cs(&c, 1);
      // The first step sees only the fixed x_T, so it is evaluated once and shared.
      const auto grid = consistency::cm_grid(f.T(), H);
      Matrix y = consistency::cm_apply(f, anchors.col(static_cast<Eigen::Index>(ci)), grid[0], cs)
                     .replicate(1, draws);
      for (std::size_t i = 1; i < grid.size(); ++i) {
        const Matrix noise = noise_rng.normal(f.dim(), draws);
        y = consistency::cm_apply(f, diffusion::forward_diffuse(y, grid[i], noise, f.schedule()),
                                  grid[i], cs);
      }
      // Deviations from the first draw keep the deterministic case exactly zero.
      const Matrix dev = y.colwise() - y.col(0);
      const Vector mean = dev.rowwise().mean();
      const Matrix centered = dev.colwise() - mean;
      const double n = static_cast<double>(draws);
      Vector per_draw(draws);
      for (int j = 0; j < draws; ++j) per_draw[j] = centered.col(j).squaredNorm() * n / (n - 1.0);
      const double var = per_draw.mean();
      const double sd = std::sqrt((per_draw.array() - var).square().sum() / (n - 1.0));
      var_sum += var;
      se2_sum += sd * sd / n;
    }
    const double k = static_cast<double>(conditions.size());
    rows.push_back({H, var_sum / k, std::sqrt(se2_sum) / k});
  }
  return rows;
}

double wasserstein1_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("W1 of an empty set");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double fa = 0.0, fb = 0.0, prev = std::min(a.front(), b.front()), total = 0.0;
  while (i < a.size() || j < b.size()) {
    double x;
    if (j >= b.size() || (i < a.size() && a[i] <= b[j]))
      x = a[i];
    else
      x = b[j];
    total += std::abs(fa - fb) * (x - prev);
    while (i < a.size() && a[i] == x) {
      ++i;
      fa = static_cast<double>(i) / na;
    }
    while (j < b.size() && b[j] == x) {
      ++j;
      fb = static_cast<double>(j) / nb;
    }
    prev = x;
  }
  return total;
}

double fidelity_proxy(const Matrix& a, const Matrix& b, int projections, std::uint64_t seed) {
  if (a.cols() == 0 || b.cols() == 0) throw std::invalid_argument("fidelity proxy: empty set");
  if (a.rows() != b.rows()) throw std::invalid_argument("fidelity proxy: dimension mismatch");
  if (projections < 32) throw std::invalid_argument("fidelity proxy needs >= 32 projections");
  Rng rng(seed);
  double total = 0.0;
  for (int p = 0; p < projections; ++p) {
    Vector u = rng.normal(a.rows(), 1).col(0);
    u /= u.norm();
    const Vector pa = a.transpose() * u;
    const Vector pb = b.transpose() * u;
    total += wasserstein1_1d(std::vector<double>(pa.data(), pa.data() + pa.size()),
                             std::vector<double>(pb.data(), pb.data() + pb.size()));
  }
  return total / projections;
}

EvalSet make_eval_set(const diffusion::ToyDataset& data, const std::vector<int>& conditions,
                      int per_condition, std::uint64_t seed) {
  if (conditions.empty() || per_condition < 1) throw std::invalid_argument("empty evaluation set");
  Rng rng(seed);
  EvalSet e;
  for (int c : conditions)
    for (int i = 0; i < per_condition; ++i) e.c.push_back(c);
  const auto n = static_cast<Eigen::Index>(e.c.size());
  e.x_T = rng.normal(data.dim(), n);
  e.Z = rng.normal(data.dim(), n);
  e.reference = data.sample(rng, e.c, n);
  return e;
}

EvalResult evaluate_sampler(const ConsistencyModel& f, const EvalSet& eval,
                            const rewards::RewardSignal& r, int tau_mid, int projections,
                            std::uint64_t seed) {
  const TwoStepTrace tr = consistency::two_step(f, eval.x_T, eval.Z, eval.c, tau_mid);
  EvalResult out;
  out.reward_1step = r.evaluate(tr.z1, eval.c).mean();
  out.reward_2step = r.evaluate(tr.z2, eval.c).mean();
  out.fidelity = fidelity_proxy(tr.z2, eval.reference, projections, seed);
  return out;
}

std::vector<TradeoffRow> tradeoff_report(const std::vector<TradeoffInput>& checkpoints,
                                         const rewards::RewardSignal& r, const EvalSet& eval,
                                         int tau_mid, std::uint64_t seed) {
  if (checkpoints.size() < 2) throw std::invalid_argument("tradeoff report needs >= 2 checkpoints");
  std::vector<TradeoffRow> rows;
  for (const auto& ck : checkpoints) {
    TradeoffRow row;
    row.step = ck.step;
    try {
      const auto f = ck.load();
      const auto res = evaluate_sampler(f, eval, r, tau_mid, 64, seed);
      row.reward_2step = res.reward_2step;
      row.fidelity = res.fidelity;
    } catch (const std::exception& e) {
      row.reward_2step = std::nan("");
      row.fidelity = std::nan("");
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const TradeoffRow& a, const TradeoffRow& b) { return a.step < b.step; });
  return rows;
}

void write_tradeoff_csv(const std::vector<TradeoffRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.precision(17);
  out << "step,reward_2step,fidelity,error\n";
  for (const auto& row : rows) {
    out << row.step << ',';
    if (row.error.empty())
      out << row.reward_2step << ',' << row.fidelity << ',';
    else
      out << ",,";
    std::string err = row.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << err << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

}  // namespace lasro::analysis
