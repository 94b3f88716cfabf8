#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>

namespace bidmix {

// Deterministic random source. The engine (std::mt19937_64) and every variate
// transform below are fully pinned, so streams reproduce bit-for-bit across
// platforms and standard-library versions. Substreams are derived from
// (seed, stream_id) with a splitmix64 finalizer, which makes draws independent
// of loop scheduling: give each replicate / subject / start its own stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix(seed ^ 0x9e3779b97f4a7c15ULL)) {}

  static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
    return Rng(mix(seed + 0x9e3779b97f4a7c15ULL * (stream_id + 1)));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1): top 53 bits of the engine output.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  // Index draw from a probability vector (assumed nonnegative, summing to ~1).
  int categorical(const double* probs, int k);

  // Symmetric Dirichlet(1): normalized -log(U) draws.
  Eigen::VectorXd dirichlet_ones(int k);

 private:
  static std::uint64_t mix(std::uint64_t x);
  std::mt19937_64 engine_;
};

}  // namespace bidmix
