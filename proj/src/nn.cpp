#include "lasro/nn.hpp"

#include <cmath>

namespace lasro::nn {
namespace {

int pick(std::span<const int> v, Eigen::Index j) {
  return v.size() == 1 ? v[0] : v[static_cast<std::size_t>(j)];
}

void check_broadcast(std::span<const int> v, Eigen::Index n, const char* what) {
  if (v.size() != 1 && static_cast<Eigen::Index>(v.size()) != n)
    throw std::invalid_argument(std::string(what) + " size does not match batch");
}

Matrix apply_silu(const Matrix& m) {
  return m.unaryExpr([](double x) { return silu(x); });
}
Matrix apply_silu_grad(const Matrix& m) {
  return m.unaryExpr([](double x) { return silu_grad(x); });
}

void fill_normal(Eigen::Map<Matrix> m, Rng& rng, double scale) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * rng.normal();
}

}  // namespace

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

Matrix time_embedding(std::span<const int> t, int features, int horizon) {
  const int half = features / 2;
  Matrix out = Matrix::Zero(features, static_cast<Eigen::Index>(t.size()));
  const double scale = 1000.0 / static_cast<double>(horizon);
  for (std::size_t j = 0; j < t.size(); ++j) {
    const double pos = scale * t[j];
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / std::max(half, 1));
      out(k, static_cast<Eigen::Index>(j)) = std::sin(pos * freq);
      out(half + k, static_cast<Eigen::Index>(j)) = std::cos(pos * freq);
    }
  }
  return out;
}

DenoiserNet::DenoiserNet(const NetShape& shape) : shape_(shape) {
  if (shape.dim < 1 || shape.num_classes < 1 || shape.hidden < 1 || shape.blocks < 0 ||
      shape.time_features < 0 || shape.class_features < 0 || shape.horizon < 1)
    throw std::invalid_argument("invalid network shape");
  const Eigen::Index h = shape.hidden;
  Eigen::Index off = 0;
  class_emb_ = off;
  off += static_cast<Eigen::Index>(shape.class_features) * shape.num_classes;
  w_in_ = off;
  off += h * input_rows();
  b_in_ = off;
  off += h;
  for (int b = 0; b < shape.blocks; ++b) {
    Block blk{};
    blk.w1 = off;
    off += h * h;
    blk.b1 = off;
    off += h;
    blk.w2 = off;
    off += h * h;
    blk.b2 = off;
    off += h;
    blocks_.push_back(blk);
  }
  w_out_ = off;
  off += shape.dim * h;
  b_out_ = off;
  off += shape.dim;
  params_ = Vector::Zero(off);
}

void DenoiserNet::init(Rng& rng) {
  const Eigen::Index h = shape_.hidden;
  params_.setZero();
  fill_normal(view(params_, class_emb_, shape_.class_features, shape_.num_classes), rng, 1.0);
  fill_normal(view(params_, w_in_, h, input_rows()), rng, 1.0 / std::sqrt(input_rows()));
  for (const auto& blk : blocks_) {
    fill_normal(view(params_, blk.w1, h, h), rng, 1.0 / std::sqrt(static_cast<double>(h)));
    // Residual branches start small so the stack begins close to the identity.
    fill_normal(view(params_, blk.w2, h, h), rng, 0.1 / std::sqrt(static_cast<double>(h)));
  }
  fill_normal(view(params_, w_out_, shape_.dim, h), rng, 1.0 / std::sqrt(static_cast<double>(h)));
}

void DenoiserNet::zero_output_layer() {
  params_.segment(w_out_, shape_.dim * shape_.hidden).setZero();
  params_.segment(b_out_, shape_.dim).setZero();
}

Matrix DenoiserNet::features(const Matrix& x, std::span<const int> t, std::span<const int> c,
                             NetCache* cache) const {
  const Eigen::Index n = x.cols();
  if (x.rows() != shape_.dim) throw std::invalid_argument("input dimension mismatch");
  check_broadcast(t, n, "timestep");
  check_broadcast(c, n, "condition");

  Matrix input(input_rows(), n);
  input.topRows(shape_.dim) = x;
  if (shape_.time_features > 0) {
    std::vector<int> ts(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) ts[static_cast<std::size_t>(j)] = pick(t, j);
    input.middleRows(shape_.dim, shape_.time_features) =
        time_embedding(ts, shape_.time_features, shape_.horizon);
  }
  std::vector<int> classes(static_cast<std::size_t>(n));
  const auto emb = view(class_emb_, shape_.class_features, shape_.num_classes);
  for (Eigen::Index j = 0; j < n; ++j) {
    const int cj = pick(c, j);
    if (cj < 0 || cj >= shape_.num_classes) throw std::invalid_argument("condition out of range");
    classes[static_cast<std::size_t>(j)] = cj;
    if (shape_.class_features > 0) input.col(j).tail(shape_.class_features) = emb.col(cj);
  }

  const Eigen::Index h = shape_.hidden;
  Matrix stream = view(w_in_, h, input_rows()) * input;
  stream.colwise() += view(b_in_, h, 1).col(0);
  if (cache) {
    cache->block_in.clear();
    cache->block_pre.clear();
  }
  for (const auto& blk : blocks_) {
    Matrix pre = view(blk.w1, h, h) * apply_silu(stream);
    pre.colwise() += view(blk.b1, h, 1).col(0);
    Matrix next = stream + view(blk.w2, h, h) * apply_silu(pre);
    next.colwise() += view(blk.b2, h, 1).col(0);
    if (cache) {
      cache->block_in.push_back(std::move(stream));
      cache->block_pre.push_back(std::move(pre));
    }
    stream = std::move(next);
  }
  Matrix feats = apply_silu(stream);
  if (cache) {
    cache->input = std::move(input);
    cache->classes = std::move(classes);
    cache->stream = std::move(stream);
    cache->features = feats;
  }
  return feats;
}

Matrix DenoiserNet::forward(const Matrix& x, std::span<const int> t, std::span<const int> c,
                            NetCache* cache) const {
  Matrix out = view(w_out_, shape_.dim, shape_.hidden) * features(x, t, c, cache);
  out.colwise() += view(b_out_, shape_.dim, 1).col(0);
  return out;
}

Matrix DenoiserNet::backward(const NetCache& cache, const Matrix& grad_out, Vector* grad) const {
  if (grad) {
    view(*grad, w_out_, shape_.dim, shape_.hidden).noalias() +=
        grad_out * cache.features.transpose();
    grad->segment(b_out_, shape_.dim) += grad_out.rowwise().sum();
  }
  const Matrix grad_feats = view(w_out_, shape_.dim, shape_.hidden).transpose() * grad_out;
  return backward_features(cache, grad_feats, grad);
}

Matrix DenoiserNet::backward_features(const NetCache& cache, const Matrix& grad_features,
                                      Vector* grad) const {
  const Eigen::Index h = shape_.hidden;
  Matrix d_stream = grad_features.cwiseProduct(apply_silu_grad(cache.stream));
  for (std::size_t b = blocks_.size(); b-- > 0;) {
    const auto& blk = blocks_[b];
    const Matrix& in = cache.block_in[b];
    const Matrix& pre = cache.block_pre[b];
    const Matrix act = apply_silu(pre);
    if (grad) {
      view(*grad, blk.w2, h, h).noalias() += d_stream * act.transpose();
      grad->segment(blk.b2, h) += d_stream.rowwise().sum();
    }
    const Matrix d_pre =
        (view(blk.w2, h, h).transpose() * d_stream).cwiseProduct(apply_silu_grad(pre));
    if (grad) {
      view(*grad, blk.w1, h, h).noalias() += d_pre * apply_silu(in).transpose();
      grad->segment(blk.b1, h) += d_pre.rowwise().sum();
    }
    d_stream += (view(blk.w1, h, h).transpose() * d_pre).cwiseProduct(apply_silu_grad(in));
  }
  if (grad) {
    view(*grad, w_in_, h, input_rows()).noalias() += d_stream * cache.input.transpose();
    grad->segment(b_in_, h) += d_stream.rowwise().sum();
  }
  const Matrix d_input = view(w_in_, h, input_rows()).transpose() * d_stream;
  if (grad && shape_.class_features > 0) {
    auto emb = view(*grad, class_emb_, shape_.class_features, shape_.num_classes);
    for (Eigen::Index j = 0; j < d_input.cols(); ++j)
      emb.col(cache.classes[static_cast<std::size_t>(j)]) +=
          d_input.col(j).tail(shape_.class_features);
  }
  return d_input.topRows(shape_.dim);
}

ScoreHead::ScoreHead(int in_features, int hidden) : in_(in_features), hidden_(hidden) {
  if (in_features < 1 || hidden < 1) throw std::invalid_argument("invalid head shape");
  params_ = Vector::Zero(static_cast<Eigen::Index>(hidden) * in_features + hidden + hidden + 1);
}

void ScoreHead::init(Rng& rng) {
  params_.setZero();
  const Eigen::Index w1 = static_cast<Eigen::Index>(hidden_) * in_;
  for (Eigen::Index i = 0; i < w1; ++i) params_[i] = rng.normal() / std::sqrt(in_);
  const Eigen::Index w2 = w1 + hidden_;
  for (Eigen::Index i = 0; i < hidden_; ++i) params_[w2 + i] = rng.normal() / std::sqrt(hidden_);
}

Matrix ScoreHead::forward(const Matrix& features, Cache* cache) const {
  const Eigen::Map<const Matrix> w1(params_.data(), hidden_, in_);
  const Eigen::Map<const Vector> b1(params_.data() + hidden_ * in_, hidden_);
  const Eigen::Map<const Matrix> w2(params_.data() + hidden_ * in_ + hidden_, 1, hidden_);
  const double b2 = params_[params_.size() - 1];
  Matrix pre = w1 * features;
  pre.colwise() += b1;
  Matrix out = w2 * apply_silu(pre);
  out.array() += b2;
  if (cache) {
    cache->input = features;
    cache->pre = std::move(pre);
  }
  return out;
}

Matrix ScoreHead::backward(const Cache& cache, const Matrix& grad_out, Vector* grad) const {
  const Eigen::Map<const Matrix> w1(params_.data(), hidden_, in_);
  const Eigen::Map<const Matrix> w2(params_.data() + hidden_ * in_ + hidden_, 1, hidden_);
  const Matrix act = apply_silu(cache.pre);
  const Matrix d_pre = (w2.transpose() * grad_out).cwiseProduct(apply_silu_grad(cache.pre));
  if (grad) {
    Eigen::Map<Matrix>(grad->data(), hidden_, in_).noalias() += d_pre * cache.input.transpose();
    grad->segment(hidden_ * in_, hidden_) += d_pre.rowwise().sum();
    Eigen::Map<Matrix>(grad->data() + hidden_ * in_ + hidden_, 1, hidden_).noalias() +=
        grad_out * act.transpose();
    (*grad)[grad->size() - 1] += grad_out.sum();
  }
  return w1.transpose() * d_pre;
}

Adam::Adam(Eigen::Index size, double learning_rate, double max_grad_norm)
    : m_(Vector::Zero(size)),
      v_(Vector::Zero(size)),
      lr_(learning_rate),
      max_grad_norm_(max_grad_norm) {}

void Adam::step(Vector& params, const Vector& grad) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    throw std::invalid_argument("optimizer size mismatch");
  double scale = 1.0;
  if (max_grad_norm_ > 0.0) {
    const double norm = grad.norm();
    if (norm > max_grad_norm_) scale = max_grad_norm_ / norm;
  }
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * scale * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * (scale * grad).cwiseAbs2();
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + eps_);
}

}  // namespace lasro::nn
