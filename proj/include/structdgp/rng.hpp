#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace sdgp {

/// Independent noise streams are keyed by (seed, datapoint key, repetition,
/// purpose) so that row-wise and batched evaluations draw identical numbers.
enum class StreamTag : std::uint64_t {
  LayerNoise = 0,
  InducingNoise = 1,
  Oracle = 2,
  Training = 3,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t key,
                                 std::uint64_t rep, StreamTag tag) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ key);
  h = splitmix64(h ^ (rep * 0x100000001B3ULL));
  return splitmix64(h ^ static_cast<std::uint64_t>(tag));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, std::uint64_t key, std::uint64_t rep, StreamTag tag)
      : engine_(stream_seed(seed, key, rep, tag)) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }

  Eigen::VectorXd normal_vector(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace sdgp
