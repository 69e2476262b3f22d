#include <gtest/gtest.h>

#include <boost/math/distributions/normal.hpp>
#include <cmath>

#include "lasro/baselines.hpp"
#include "lasro/runner.hpp"
#include "test_util.hpp"

using namespace lasro;
using consistency::Transition;

namespace {

consistency::ConsistencyModel jittered_student(std::uint64_t seed) {
  auto f =
      consistency::ConsistencyModel::from_teacher(test::random_net(seed), test::default_schedule());
  Rng jitter(seed + 7);
  f.params() += 0.05 * jitter.normal(f.param_count(), 1);
  return f;
}

Transition first_transition(const consistency::ConsistencyModel& f, const Matrix& x_from,
                            Rng& rng) {
  Transition tr;
  tr.x_from = x_from;
  tr.t_from = f.T();
  tr.t_to = 50;
  tr.sigma = std::sqrt(1.0 - f.schedule().ab(50));
  tr.c = {1};
  const Matrix mean =
      std::sqrt(f.schedule().ab(50)) * consistency::cm_apply(f, x_from, f.T(), tr.c);
  tr.x_to = mean + tr.sigma * rng.normal(mean.rows(), mean.cols());
  return tr;
}

}  // namespace

TEST(GaussianLogprob, MatchesIndependentDensity) {
  const auto f = jittered_student(40);
  Rng rng(40);
  const auto tr = first_transition(f, rng.normal(2, 100), rng);
  const Vector lp = baselines::gaussian_logprob(f, tr);
  const Matrix mean =
      std::sqrt(f.schedule().ab(50)) * consistency::cm_apply(f, tr.x_from, f.T(), tr.c);
  for (Eigen::Index j = 0; j < 100; ++j) {
    double expected = 0.0;
    for (Eigen::Index i = 0; i < 2; ++i)
      expected +=
          std::log(boost::math::pdf(boost::math::normal(mean(i, j), tr.sigma), tr.x_to(i, j)));
    EXPECT_NEAR(lp[j], expected, 1e-10);
  }
}

TEST(GaussianLogprob, PeakAtTheMean) {
  const auto f = jittered_student(41);
  Rng rng(41);
  auto tr = first_transition(f, rng.normal(2, 1), rng);
  tr.x_to = std::sqrt(f.schedule().ab(50)) * consistency::cm_apply(f, tr.x_from, f.T(), tr.c);
  EXPECT_NEAR(baselines::gaussian_logprob(f, tr)[0], -std::log(2.0 * M_PI * tr.sigma * tr.sigma),
              1e-12);
}

TEST(GaussianLogprob, DeterministicTransitionHasNoDensity) {
  const auto f = jittered_student(42);
  Rng rng(42);
  auto tr = first_transition(f, rng.normal(2, 1), rng);
  tr.sigma = 0.0;
  EXPECT_THROW(baselines::gaussian_logprob(f, tr), NoDensityError);
}

TEST(Ddpo, FullTrajectoryRefusesDeterministicStep) {
  const auto f = jittered_student(43);
  Rng rng(43);
  const std::vector<int> cs{0, 0, 0, 0};
  const auto trace = consistency::sample_two_step(f, cs, 50, rng);
  const auto transitions = baselines::two_step_transitions(f, trace);
  ASSERT_EQ(transitions.size(), 2u);
  EXPECT_EQ(transitions[1].sigma, 0.0);
  const Vector r = Vector::LinSpaced(4, 0.0, 1.0);
  Vector grad = Vector::Zero(f.param_count());
  EXPECT_THROW(baselines::ddpo_gradient(f, transitions, r, true, false, &grad), NoDensityError);
  EXPECT_EQ(grad.norm(), 0.0);
  EXPECT_NO_THROW(baselines::ddpo_gradient(f, transitions, r, true, true, &grad));
  EXPECT_GT(grad.norm(), 0.0);
}

TEST(Ddpo, TransitionsReproduceTheTrace) {
  const auto f = jittered_student(44);
  Rng rng(44);
  const std::vector<int> cs{2, 2, 2};
  const auto trace = consistency::sample_two_step(f, cs, 50, rng);
  const auto transitions = baselines::two_step_transitions(f, trace);
  const Matrix z2 = consistency::cm_apply(f, transitions[1].x_from, transitions[1].t_from, cs);
  EXPECT_LT((z2 - trace.z2).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Ddpo, ScoreFunctionMatchesPathwiseGradient) {
  // For r(x) = v.x the expected reward is v.(a f(x_from)), so the REINFORCE
  // estimate must approach -a J^T v.
  const auto f = jittered_student(45);
  Rng rng(45);
  const Vector x_from = rng.normal(2, 1);
  const int n = 100000;
  const auto tr = first_transition(f, x_from.replicate(1, n), rng);
  const Vector v = (Vector(2) << 0.8, -0.6).finished();
  const Vector r = tr.x_to.transpose() * v;
  Vector g_sf = Vector::Zero(f.param_count());
  baselines::ddpo_gradient(f, {tr}, r, true, true, &g_sf);

  consistency::ConsistencyModel::Cache cache;
  const int t = f.T();
  f.apply(Matrix(x_from), std::span<const int>(&t, 1), tr.c, &cache);
  Vector g_pw = Vector::Zero(f.param_count());
  f.backward(cache, Matrix(-std::sqrt(f.schedule().ab(50)) * v), &g_pw);
  EXPECT_LT((g_sf - g_pw).norm() / g_pw.norm(), 0.03);
}

TEST(Rwr, WeightsAreSoftmax) {
  const Vector r = (Vector(4) << -1.0, 0.5, 0.2, 0.5).finished();
  const Vector w = baselines::rwr_weights(r, 0.3);
  const double z = (r.array() / 0.3).exp().sum();
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(w[i], std::exp(r[i] / 0.3) / z, 1e-14);
  EXPECT_NEAR(w.sum(), 1.0, 1e-14);
}

TEST(Rwr, TemperatureLimits) {
  const Vector r = (Vector(4) << -1.0, 0.5, 0.2, 0.4).finished();
  const Vector hot = baselines::rwr_weights(r, 1e12);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(hot[i], 0.25, 1e-10);
  const Vector cold = baselines::rwr_weights(r, 1e-4);
  EXPECT_NEAR(cold[1], 1.0, 1e-12);
  const Vector huge = baselines::rwr_weights((Vector(2) << 1e6, -1e6).finished(), 1.0);
  EXPECT_TRUE(huge.allFinite());
  EXPECT_THROW(baselines::rwr_weights(r, 0.0), std::invalid_argument);
}

TEST(Rwr, LossIsWeightedNoisePredictionError) {
  const auto f = jittered_student(46);
  Rng rng(46);
  const Matrix z = rng.normal(2, 5);
  const std::vector<int> c{3};
  const Vector w = baselines::rwr_weights(rng.normal(5, 1), 0.5);
  const auto draw = consistency::draw_distill(2, 5, f.T(), 10, rng, {1.0, 1});
  const double loss = baselines::rwr_loss(f, z, c, w, draw, nullptr);
  const auto& s = f.schedule();
  const Matrix x_t = diffusion::forward_diffuse(z, draw.t, draw.noise, s);
  const Matrix y = f.apply(x_t, draw.t, c);
  double expected = 0.0;
  for (int j = 0; j < 5; ++j) {
    const double ab = s.ab(draw.t[j]);
    const Vector eps_hat = (x_t.col(j) - std::sqrt(ab) * y.col(j)) / std::sqrt(1.0 - ab);
    expected += w[j] * (draw.noise.col(j) - eps_hat).squaredNorm();
  }
  EXPECT_NEAR(loss, expected, 1e-9 * std::max(1.0, expected));
}

TEST(Rwr, GradientMatchesFiniteDifferences) {
  const auto f = jittered_student(47);
  Rng rng(47);
  const Matrix z = rng.normal(2, 4);
  const std::vector<int> c{0, 1, 2, 3};
  const Vector w = baselines::rwr_weights(rng.normal(4, 1), 0.5);
  auto draw = consistency::draw_distill(2, 4, f.T(), 10, rng, {1.0, 1});
  // Keep away from t = T, where the weight vanishes with the signal.
  for (auto& t : draw.t) t = std::min(t, 90);
  Vector grad = Vector::Zero(f.param_count());
  baselines::rwr_loss(f, z, c, w, draw, &grad);
  auto loss = [&](const Vector& p) {
    return baselines::rwr_loss(runner::with_params(f, p), z, c, w, draw, nullptr);
  };
  const auto rep = test::finite_difference(loss, f.params(), grad, 10, 47);
  EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(Gors, BestIndexTakesFirstOnTies) {
  EXPECT_EQ(baselines::best_index((Vector(3) << 0.2, 0.9, 0.9).finished()), 1);
  EXPECT_EQ(baselines::best_index((Vector(3) << 0.5, 0.5, 0.5).finished()), 0);
  EXPECT_EQ(baselines::best_index((Vector(1) << -3.0).finished()), 0);
  EXPECT_THROW(baselines::best_index(Vector()), std::invalid_argument);
}

TEST(Direct, GradientMatchesFiniteDifferences) {
  const auto f = jittered_student(48);
  rewards::TargetRegionReward reward((Matrix(2, 4) << 3, -3, -3, 3, 3, 3, -3, -3).finished());
  const auto scorer = train::reward_scorer(reward);
  Rng rng(48);
  const std::vector<int> cs{0, 0, 0, 0};
  const auto trace = consistency::sample_two_step(f, cs, 50, rng);
  train::TrainConfig cfg;
  cfg.c = 0.0;
  Vector grad = Vector::Zero(f.param_count());
  train::ft_loss(f, scorer, trace, 1, 2, nullptr, nullptr, cfg, {}, &grad);
  auto loss = [&](const Vector& p) {
    return train::ft_loss(runner::with_params(f, p), scorer, trace, 1, 2, nullptr, nullptr, cfg, {},
                          nullptr);
  };
  const auto rep = test::finite_difference(loss, f.params(), grad, 10, 48);
  EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(Direct, NonDifferentiableRewardRejected) {
  const auto teacher = test::random_net(49);
  const auto data = diffusion::make_toy_dataset("mixture", 2, 4, 0);
  rewards::QuantizedReward reward((Matrix(2, 4) << 3, -3, -3, 3, 3, 3, -3, -3).finished(), 4, 1.0);
  train::FinetuneContext ctx{
      .teacher = &teacher, .dataset = &data, .reward = &reward, .conditions = {0}, .cfg = {}};
  runner::RunOptions opts;
  opts.steps = 1;
  EXPECT_THROW(runner::run_finetune(runner::Method::kDirect, ctx, jittered_student(49),
                                    std::nullopt, 1, opts),
               std::invalid_argument);
}

TEST(Baselines, EveryMethodSpendsTheSameBudget) {
  const auto teacher = test::random_net(50);
  const auto data = diffusion::make_toy_dataset("mixture", 2, 4, 0);
  rewards::TargetRegionReward reward((Matrix(2, 4) << 3, -3, -3, 3, 3, 3, -3, -3).finished());
  train::TrainConfig cfg;
  cfg.distill_batch = 8;
  train::FinetuneContext ctx{
      .teacher = &teacher, .dataset = &data, .reward = &reward, .conditions = {0, 1}, .cfg = cfg};
  runner::RunOptions opts;
  opts.steps = 3;
  for (auto m : {runner::Method::kDdpo, runner::Method::kRwr, runner::Method::kGors,
                 runner::Method::kDirect}) {
    const auto f = jittered_student(50);
    const auto res = runner::run_finetune(m, ctx, f, std::nullopt, 2, opts);
    EXPECT_EQ(res.counters.trajectories, 3L * cfg.Ns) << runner::to_string(m);
    EXPECT_EQ(res.counters.theta_updates, 3) << runner::to_string(m);
    EXPECT_FALSE(res.f.params() == f.params()) << runner::to_string(m);
  }
}
