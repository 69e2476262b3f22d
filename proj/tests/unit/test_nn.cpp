#include <gtest/gtest.h>

#include "lasro/nn.hpp"
#include "test_util.hpp"

using namespace lasro;

namespace {

// Linear probe of the network output, so gradients reach every output coordinate.
double probe(const Matrix& out, const Matrix& w) { return (out.array() * w.array()).sum(); }

}  // namespace

TEST(DenoiserNet, ParameterGradientMatchesFiniteDifferences) {
  auto net = test::random_net(1);
  Rng rng(1);
  const Matrix x = rng.normal(2, 6);
  const Matrix w = rng.normal(2, 6);
  const std::vector<int> t{1, 10, 50, 99, 100, 0};
  const std::vector<int> c{0, 1, 2, 3, 1, 2};
  nn::NetCache cache;
  net.forward(x, t, c, &cache);
  Vector grad = Vector::Zero(net.param_count());
  net.backward(cache, w, &grad);
  auto loss = [&](const Vector& p) {
    nn::DenoiserNet n2 = net;
    n2.params() = p;
    return probe(n2.forward(x, t, c), w);
  };
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto rep = test::finite_difference(loss, net.params(), grad, 10, s);
    EXPECT_LT(rep.max_rel_error, 1e-4) << "coordinate " << rep.worst;
  }
}

TEST(DenoiserNet, InputGradientMatchesFiniteDifferences) {
  const auto net = test::random_net(2);
  Rng rng(2);
  const Matrix x = rng.normal(2, 4);
  const Matrix w = rng.normal(2, 4);
  const std::vector<int> t{30};
  const std::vector<int> c{2};
  nn::NetCache cache;
  net.forward(x, t, c, &cache);
  const Matrix dx = net.backward(cache, w, nullptr);
  const double h = 1e-6;
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      Matrix up = x, down = x;
      up(i, j) += h;
      down(i, j) -= h;
      const double num =
          (probe(net.forward(up, t, c), w) - probe(net.forward(down, t, c), w)) / (2 * h);
      EXPECT_NEAR(dx(i, j), num, 1e-4 * std::max(1.0, std::abs(num)));
    }
}

TEST(DenoiserNet, BroadcastEqualsPerColumnLabels) {
  const auto net = test::random_net(3);
  Rng rng(3);
  const Matrix x = rng.normal(2, 5);
  const std::vector<int> t1{40}, t5(5, 40), c1{3}, c5(5, 3);
  EXPECT_TRUE(net.forward(x, t1, c1) == net.forward(x, t5, c5));
}

TEST(DenoiserNet, ZeroOutputLayerGivesZeroMap) {
  auto net = test::random_net(4);
  net.zero_output_layer();
  Rng rng(4);
  const std::vector<int> t{10}, c{0};
  EXPECT_EQ(net.forward(rng.normal(2, 7), t, c).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ScoreHead, GradientMatchesFiniteDifferences) {
  nn::ScoreHead head(8, 5);
  Rng rng(5);
  head.init(rng);
  const Matrix feats = rng.normal(8, 4);
  const Matrix w = rng.normal(1, 4);
  nn::ScoreHead::Cache cache;
  head.forward(feats, &cache);
  Vector grad = Vector::Zero(head.param_count());
  head.backward(cache, w, &grad);
  auto loss = [&](const Vector& p) {
    nn::ScoreHead h2 = head;
    h2.params() = p;
    return probe(h2.forward(feats), w);
  };
  const auto rep = test::finite_difference(loss, head.params(), grad, 10, 5);
  EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(TimeEmbedding, DistinctTimestepsGiveDistinctFeatures) {
  const std::vector<int> t{0, 1, 50, 100};
  const Matrix e = nn::time_embedding(t, 8, 100);
  ASSERT_EQ(e.rows(), 8);
  ASSERT_EQ(e.cols(), 4);
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b) EXPECT_GT((e.col(a) - e.col(b)).norm(), 1e-3);
}

TEST(Adam, FirstStepMovesEachCoordinateByLearningRate) {
  nn::Adam opt(3, 0.1);
  Vector p = Vector::Zero(3);
  const Vector g = (Vector(3) << 2.0, -0.5, 1e-3).finished();
  opt.step(p, g);
  // Bias-corrected first step is lr * sign(g) up to the epsilon term.
  EXPECT_NEAR(p[0], -0.1, 1e-6);
  EXPECT_NEAR(p[1], 0.1, 1e-6);
  EXPECT_NEAR(p[2], -0.1, 1e-4);
}

TEST(Adam, ClippingBoundsTheGradientNorm) {
  nn::Adam clipped(2, 0.1, 1.0), plain(2, 0.1);
  Vector a = Vector::Zero(2), b = Vector::Zero(2);
  const Vector g = (Vector(2) << 300.0, 400.0).finished();
  clipped.step(a, g);
  plain.step(b, g);
  // First step is -lr * g / (|g| + eps) per coordinate, with g clipped to unit norm.
  const Vector gc = g / g.norm();
  for (int i = 0; i < 2; ++i) {
    EXPECT_NEAR(a[i], -0.1 * gc[i] / (std::abs(gc[i]) + 1e-8), 1e-15);
    EXPECT_NEAR(b[i], -0.1 * g[i] / (std::abs(g[i]) + 1e-8), 1e-15);
  }
  EXPECT_EQ(clipped.steps(), 1);
}
