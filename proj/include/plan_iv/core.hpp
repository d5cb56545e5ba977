#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>

namespace plan_iv {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Invalid recipe, configuration or precondition supplied by the caller.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Singular systems, non-PSD Gram matrices and similar failures of the linear algebra.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Seed for the `index`-th independent substream of `seed`.
std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index);

/// Seeded random stream. Every sampler in the library draws from one of these, so all
/// sampling is a pure function of the seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  static Rng substream(std::uint64_t seed, std::uint64_t index) {
    return Rng(substream_seed(seed, index));
  }

  double normal();
  Vec normal_vec(Index n);
  double uniform();  // [0, 1)
  std::uint64_t next_u64() { return engine_(); }

  /// One uniform draw, inverted through the cumulative sum of `probs`.
  std::size_t categorical(std::span<const double> probs);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace plan_iv
