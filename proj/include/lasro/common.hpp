#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lasro {

/// Points are stored column-wise: a batch of n points in R^d is a d x n matrix.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Requested density for a transition that has none (deterministic step).
class NoDensityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Operation called on an object that has not been initialized yet.
class InvalidStateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A pipeline stage was started without the artifact it depends on.
class PreconditionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A reward produced no usable winner/loser pair for too long.
class DegenerateRewardError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Configuration failed validation; `path()` names the offending key.
class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::string path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// splitmix64 finalizer, used to derive independent sub-seeds.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Seeded random source. All sampling in the library goes through this type so
/// that every operation is a pure function of its seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix_seed(seed, 0)) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  Matrix normal(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal_(engine_);
    return m;
  }
  /// Fresh generator for an independent sub-stream.
  Rng fork(std::uint64_t stream) { return Rng(mix_seed(engine_(), stream)); }
  std::uint64_t next_u64() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

}  // namespace lasro
