#pragma once

#include <span>
#include <vector>

#include "lasro/common.hpp"

namespace lasro::nn {

/// Architecture of the conditional residual MLP shared by teacher, student
/// and surrogate trunk.
struct NetShape {
  int dim = 2;
  int num_classes = 4;
  int hidden = 64;
  int blocks = 2;
  int time_features = 16;
  int class_features = 8;
  int horizon = 100;  // timestep normalization for the sinusoidal embedding

  bool operator==(const NetShape&) const = default;
};

/// Activations kept by a forward pass for the matching backward pass.
struct NetCache {
  Matrix input;  // [x; time embedding; class embedding]
  std::vector<int> classes;
  std::vector<Matrix> block_in;   // residual stream entering each block
  std::vector<Matrix> block_pre;  // pre-activation inside each block
  Matrix stream;                  // residual stream after the last block
  Matrix features;                // silu(stream)
};

double silu(double x);
double silu_grad(double x);

/// Sinusoidal embedding of integer timesteps, one column per entry of `t`.
Matrix time_embedding(std::span<const int> t, int features, int horizon);

/// Small residual MLP mapping (x, t, c) to a point in R^d.
///
/// Parameters live in one flat vector so that EMA, optimizers, checkpoints and
/// finite-difference checks can treat every network uniformly. `t` and `c`
/// spans either match the batch size or hold a single broadcast entry.
class DenoiserNet {
 public:
  DenoiserNet() = default;
  explicit DenoiserNet(const NetShape& shape);

  void init(Rng& rng);
  /// Zero the output projection so the network starts as the zero map.
  void zero_output_layer();

  const NetShape& shape() const { return shape_; }
  Eigen::Index param_count() const { return params_.size(); }
  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  Matrix forward(const Matrix& x, std::span<const int> t, std::span<const int> c,
                 NetCache* cache = nullptr) const;
  /// Hidden representation (hidden x batch) feeding the output projection.
  Matrix features(const Matrix& x, std::span<const int> t, std::span<const int> c,
                  NetCache* cache = nullptr) const;

  /// Accumulates parameter gradients into `grad` (if non-null) and returns the
  /// gradient with respect to the input points.
  Matrix backward(const NetCache& cache, const Matrix& grad_out, Vector* grad) const;
  Matrix backward_features(const NetCache& cache, const Matrix& grad_features, Vector* grad) const;

 private:
  struct Block {
    Eigen::Index w1, b1, w2, b2;
  };
  using ConstMap = Eigen::Map<const Matrix>;
  using MutMap = Eigen::Map<Matrix>;

  int input_rows() const { return shape_.dim + shape_.time_features + shape_.class_features; }
  ConstMap view(Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) const {
    return ConstMap(params_.data() + offset, rows, cols);
  }
  static MutMap view(Vector& v, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
    return MutMap(v.data() + offset, rows, cols);
  }

  NetShape shape_;
  Vector params_;
  Eigen::Index class_emb_ = 0, w_in_ = 0, b_in_ = 0, w_out_ = 0, b_out_ = 0;
  std::vector<Block> blocks_;
};

/// Two-layer scoring head: features -> hidden -> scalar.
class ScoreHead {
 public:
  ScoreHead() = default;
  ScoreHead(int in_features, int hidden);

  void init(Rng& rng);
  Eigen::Index param_count() const { return params_.size(); }
  Vector& params() { return params_; }
  const Vector& params() const { return params_; }
  int in_features() const { return in_; }
  int hidden() const { return hidden_; }

  struct Cache {
    Matrix input;
    Matrix pre;
  };
  /// Returns a row vector of scores (1 x batch).
  Matrix forward(const Matrix& features, Cache* cache = nullptr) const;
  Matrix backward(const Cache& cache, const Matrix& grad_out, Vector* grad) const;

 private:
  int in_ = 0;
  int hidden_ = 0;
  Vector params_;
};

/// Adam with optional global gradient-norm clipping.
class Adam {
 public:
  Adam() = default;
  Adam(Eigen::Index size, double learning_rate, double max_grad_norm = 0.0);

  void step(Vector& params, const Vector& grad);
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  long steps() const { return t_; }

 private:
  Vector m_, v_;
  double lr_ = 1e-3;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  double max_grad_norm_ = 0.0;
  long t_ = 0;
};

/// Broadcast helper: n copies of `value`.
inline std::vector<int> repeat(int value, Eigen::Index n) {
  return std::vector<int>(static_cast<std::size_t>(n), value);
}

}  // namespace lasro::nn
