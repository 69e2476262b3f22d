#include "lasro/rewards.hpp"

#include <cmath>

namespace lasro::rewards {
namespace {

int pick(std::span<const int> v, Eigen::Index j) {
  return v.size() == 1 ? v[0] : v[static_cast<std::size_t>(j)];
}

void check_class(const Matrix& targets, int c) {
  if (c < 0 || c >= targets.cols()) throw std::invalid_argument("reward: class label out of range");
}

}  // namespace

RewardKind parse_reward_kind(const std::string& name) {
  if (name == "target_region") return RewardKind::kTargetRegion;
  if (name == "quantized") return RewardKind::kQuantized;
  if (name == "classifier") return RewardKind::kClassifier;
  throw std::invalid_argument("unknown reward kind '" + name + "'");
}

std::string to_string(RewardKind kind) {
  switch (kind) {
    case RewardKind::kTargetRegion:
      return "target_region";
    case RewardKind::kQuantized:
      return "quantized";
    case RewardKind::kClassifier:
      return "classifier";
  }
  return "target_region";
}

Vector RewardSignal::gradient(const Vector&, int) const {
  throw std::invalid_argument("reward '" + to_string(kind()) + "' exposes no gradient");
}

Vector RewardSignal::evaluate(const Matrix& x, std::span<const int> c) const {
  if (c.size() != 1 && static_cast<Eigen::Index>(c.size()) != x.cols())
    throw std::invalid_argument("reward: label count does not match batch");
  Vector out(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) out[j] = evaluate(Vector(x.col(j)), pick(c, j));
  return out;
}

TargetRegionReward::TargetRegionReward(Matrix targets) : targets_(std::move(targets)) {
  if (targets_.cols() < 1) throw std::invalid_argument("target_region reward needs targets");
}

Vector TargetRegionReward::target(int c) const {
  check_class(targets_, c);
  return targets_.col(c);
}

double TargetRegionReward::evaluate(const Vector& x, int c) const {
  check_class(targets_, c);
  return -(x - targets_.col(c)).norm();
}

Vector TargetRegionReward::gradient(const Vector& x, int c) const {
  check_class(targets_, c);
  const Vector d = x - targets_.col(c);
  const double n = d.norm();
  if (n == 0.0) return Vector::Zero(x.size());
  return -d / n;
}

QuantizedReward::QuantizedReward(Matrix targets, int levels, double scale)
    : base_(std::move(targets)), levels_(levels), scale_(scale) {
  if (levels < 1) throw std::invalid_argument("quantized reward needs levels >= 1");
  if (!(scale > 0.0)) throw std::invalid_argument("quantized reward needs a positive scale");
}

double QuantizedReward::evaluate(const Vector& x, int c) const {
  const double g = std::exp(base_.evaluate(x, c) / scale_);
  return std::round(levels_ * g) / levels_;
}

ToyClassifier::ToyClassifier(int dim, int num_classes) : dim_(dim), classes_(num_classes) {
  if (dim < 1 || num_classes < 1) throw std::invalid_argument("invalid classifier shape");
  params_ = Vector::Zero(param_count(dim, num_classes));
}

Eigen::Index ToyClassifier::param_count(int dim, int num_classes) {
  return static_cast<Eigen::Index>(num_classes) * (1 + dim + dim * (dim + 1) / 2);
}

Vector ToyClassifier::features(const Vector& x) const {
  Vector phi(feature_count());
  phi[0] = 1.0;
  phi.segment(1, dim_) = x;
  Eigen::Index k = 1 + dim_;
  for (int i = 0; i < dim_; ++i)
    for (int j = i; j < dim_; ++j) phi[k++] = x[i] * x[j];
  return phi;
}

Matrix ToyClassifier::feature_jacobian(const Vector& x) const {
  Matrix J = Matrix::Zero(feature_count(), dim_);
  for (int i = 0; i < dim_; ++i) J(1 + i, i) = 1.0;
  Eigen::Index k = 1 + dim_;
  for (int i = 0; i < dim_; ++i)
    for (int j = i; j < dim_; ++j, ++k) {
      J(k, i) += x[j];
      J(k, j) += x[i];
    }
  return J;
}

Vector ToyClassifier::probabilities(const Vector& x) const {
  if (x.size() != dim_) throw std::invalid_argument("classifier input dimension mismatch");
  const Eigen::Map<const Matrix> W(params_.data(), classes_, feature_count());
  Vector logits = W * features(x);
  logits.array() -= logits.maxCoeff();
  Vector p = logits.array().exp();
  return p / p.sum();
}

Vector ToyClassifier::probability_gradient(const Vector& x, int c) const {
  if (c < 0 || c >= classes_) throw std::invalid_argument("classifier label out of range");
  const Eigen::Map<const Matrix> W(params_.data(), classes_, feature_count());
  const Vector p = probabilities(x);
  const Matrix G = W * feature_jacobian(x);  // classes x dim: d logit_k / dx
  const Vector mean_grad = G.transpose() * p;
  return p[c] * (G.row(c).transpose() - mean_grad);
}

void ToyClassifier::fit(const Matrix& x, const std::vector<int>& labels, int iters, double lr) {
  if (x.cols() == 0 || static_cast<Eigen::Index>(labels.size()) != x.cols())
    throw std::invalid_argument("classifier fit: bad training set");
  Matrix phi(feature_count(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) phi.col(j) = features(Vector(x.col(j)));
  nn::Adam opt(params_.size(), lr);
  for (int it = 0; it < iters; ++it) {
    Eigen::Map<Matrix> W(params_.data(), classes_, feature_count());
    Matrix logits = W * phi;
    Matrix g(classes_, x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      Vector l = logits.col(j);
      l.array() -= l.maxCoeff();
      Vector p = l.array().exp();
      p /= p.sum();
      p[labels[static_cast<std::size_t>(j)]] -= 1.0;
      g.col(j) = p;
    }
    Matrix gw = g * phi.transpose() / static_cast<double>(x.cols());
    opt.step(params_, Eigen::Map<Vector>(gw.data(), gw.size()));
  }
}

double ToyClassifier::accuracy(const Matrix& x, const std::vector<int>& labels) const {
  if (x.cols() == 0) return 0.0;
  int hits = 0;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    Eigen::Index best = 0;
    probabilities(Vector(x.col(j))).maxCoeff(&best);
    if (best == labels[static_cast<std::size_t>(j)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(x.cols());
}

ClassifierReward::ClassifierReward(ToyClassifier classifier) : classifier_(std::move(classifier)) {
  if (classifier_.num_classes() < 1) throw std::invalid_argument("classifier reward needs a model");
}

double ClassifierReward::evaluate(const Vector& x, int c) const {
  if (c < 0 || c >= classifier_.num_classes())
    throw std::invalid_argument("reward: class label out of range");
  return classifier_.probabilities(x)[c];
}

Vector ClassifierReward::gradient(const Vector& x, int c) const {
  return classifier_.probability_gradient(x, c);
}

std::unique_ptr<RewardSignal> make_reward(RewardKind kind, const RewardParams& params) {
  switch (kind) {
    case RewardKind::kTargetRegion:
      return std::make_unique<TargetRegionReward>(params.targets);
    case RewardKind::kQuantized:
      return std::make_unique<QuantizedReward>(params.targets, params.levels, params.scale);
    case RewardKind::kClassifier:
      if (!params.classifier)
        throw std::invalid_argument("classifier reward needs a trained classifier");
      return std::make_unique<ClassifierReward>(*params.classifier);
  }
  throw std::invalid_argument("unknown reward kind");
}

std::unique_ptr<RewardSignal> make_reward(const std::string& kind, const RewardParams& params) {
  return make_reward(parse_reward_kind(kind), params);
}

SurrogateReward::SurrogateReward(const nn::DenoiserNet& trunk, int head_hidden, Rng& rng,
                                 int scorer_t)
    : trunk_(trunk), head_(trunk.shape().hidden, head_hidden), scorer_t_(scorer_t) {
  if (scorer_t < 0 || scorer_t > trunk.shape().horizon)
    throw std::invalid_argument("scorer timestep out of range");
  head_.init(rng);
}

Matrix SurrogateReward::score(const Matrix& z, std::span<const int> c, Cache* cache) const {
  if (!z.allFinite()) throw std::invalid_argument("surrogate_score: non-finite input");
  const Matrix feats =
      trunk_.features(z, std::span<const int>(&scorer_t_, 1), c, cache ? &cache->trunk : nullptr);
  return head_.forward(feats, cache ? &cache->head : nullptr);
}

double SurrogateReward::score(const Vector& z, int c) const {
  return score(Matrix(z), std::span<const int>(&c, 1))(0, 0);
}

Matrix SurrogateReward::backward(const Cache& cache, const Matrix& grad_scores,
                                 Vector* grad) const {
  Vector head_grad;
  if (grad) head_grad = Vector::Zero(head_.param_count());
  const Matrix d_feats = head_.backward(cache.head, grad_scores, grad ? &head_grad : nullptr);
  // Trunk parameters occupy the leading segment of the flat layout.
  const Matrix dz = trunk_.backward_features(cache.trunk, d_feats, grad);
  if (grad) grad->tail(head_.param_count()) += head_grad;
  return dz;
}

Vector SurrogateReward::get_params() const {
  Vector p(param_count());
  p << trunk_.params(), head_.params();
  return p;
}

void SurrogateReward::set_params(const Vector& p) {
  if (p.size() != param_count()) throw std::invalid_argument("surrogate parameter size mismatch");
  trunk_.params() = p.head(trunk_.param_count());
  head_.params() = p.tail(head_.param_count());
}

double pair_loss_from_gap(double gap) {
  // softplus(-gap) = log(1 + exp(-gap)), evaluated without overflow.
  return std::max(-gap, 0.0) + std::log1p(std::exp(-std::abs(gap)));
}

double pair_loss_gap_grad(double gap) {
  // d/dgap softplus(-gap) = -sigmoid(-gap)
  if (gap >= 0.0) {
    const double e = std::exp(-gap);
    return -e / (1.0 + e);
  }
  return -1.0 / (1.0 + std::exp(gap));
}

double surrogate_pair_loss(const SurrogateReward& R, const WLPair& pair) {
  return pair_loss_from_gap(R.score(pair.z_w, pair.c) - R.score(pair.z_l, pair.c));
}

double surrogate_pair_loss(const SurrogateReward& R, std::span<const WLPair> pairs, Vector* grad) {
  if (pairs.empty()) throw std::invalid_argument("surrogate_pair_loss: no pairs");
  const auto n = static_cast<Eigen::Index>(pairs.size());
  const Eigen::Index d = pairs.front().z_w.size();
  Matrix z(d, 2 * n);
  std::vector<int> c(static_cast<std::size_t>(2 * n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = pairs[static_cast<std::size_t>(i)];
    z.col(i) = p.z_w;
    z.col(n + i) = p.z_l;
    c[static_cast<std::size_t>(i)] = p.c;
    c[static_cast<std::size_t>(n + i)] = p.c;
  }
  SurrogateReward::Cache cache;
  const Matrix s = R.score(z, c, grad ? &cache : nullptr);
  double loss = 0.0;
  Matrix g(1, 2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double gap = s(0, i) - s(0, n + i);
    loss += pair_loss_from_gap(gap);
    const double dg = pair_loss_gap_grad(gap) / static_cast<double>(n);
    g(0, i) = dg;
    g(0, n + i) = -dg;
  }
  if (grad) R.backward(cache, g, grad);
  return loss / static_cast<double>(n);
}

double pair_accuracy(const SurrogateReward& R, std::span<const WLPair> pairs) {
  if (pairs.empty()) return 0.0;
  int hits = 0;
  for (const auto& p : pairs)
    if (R.score(p.z_w, p.c) > R.score(p.z_l, p.c)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

std::optional<std::pair<int, int>> select_wl_indices(const Vector& rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("pair selection needs at least 2 samples");
  Eigen::Index hi = 0, lo = 0;
  for (Eigen::Index i = 1; i < rewards.size(); ++i) {
    if (rewards[i] > rewards[hi]) hi = i;
    if (rewards[i] < rewards[lo]) lo = i;
  }
  if (!(rewards[hi] > rewards[lo])) return std::nullopt;
  return std::make_pair(static_cast<int>(hi), static_cast<int>(lo));
}

std::optional<WLPair> select_wl_pair(const Matrix& samples, int c, const RewardSignal& r,
                                     int step_index) {
  if (samples.cols() < 2) throw std::invalid_argument("pair selection needs at least 2 samples");
  return select_wl_pair(samples, c, r.evaluate(samples, std::span<const int>(&c, 1)), step_index);
}

std::optional<WLPair> select_wl_pair(const Matrix& samples, int c, const Vector& rewards,
                                     int step_index) {
  if (rewards.size() != samples.cols())
    throw std::invalid_argument("pair selection: reward count does not match samples");
  const auto idx = select_wl_indices(rewards);
  if (!idx) return std::nullopt;
  WLPair p;
  p.z_w = samples.col(idx->first);
  p.z_l = samples.col(idx->second);
  p.c = c;
  p.r_w = rewards[idx->first];
  p.r_l = rewards[idx->second];
  p.step_index = step_index;
  return p;
}

}  // namespace lasro::rewards
