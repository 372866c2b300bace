#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include <Eigen/Dense>

namespace dmh {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// SplitMix64 finalizer; used to derive independent seeds and counter-based draws.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  return mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

/// Maps 64 random bits to a double in (0, 1].
inline double bits_to_unit_open_closed(std::uint64_t bits) noexcept {
  return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
}

/// Sequential generator owned by one chain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform on (0, 1]; log() of the result is always finite.
  double uniform() { return bits_to_unit_open_closed(engine_()); }

  double normal() { return normal_(engine_); }

  Vector normal_vector(Eigen::Index n) {
    Vector z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = normal();
    return z;
  }

  bool bernoulli(double p) { return uniform() <= p; }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Stateless stream: draw k is a pure function of (key, k). Alternatives use one of
/// these so their latent randomness does not depend on how many siblings are alive.
class CounterStream {
 public:
  CounterStream() = default;
  explicit CounterStream(std::uint64_t key) : key_(key) {}

  double uniform() { return bits_to_unit_open_closed(mix64(key_ ^ mix64(counter_++))); }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t position() const noexcept { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace dmh
