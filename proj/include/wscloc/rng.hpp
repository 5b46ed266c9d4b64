#pragma once

#include <Eigen/Core>

#include <cstdint>

namespace wscloc::util {

// Deterministic 64-bit generator (xoshiro256++) with hand-rolled
// distributions. <random>'s distributions are implementation-defined, so
// they cannot back the byte-identical-rerun guarantees this project makes;
// everything random in the library goes through this class.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0, 1), 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);

  // Uniform integer in [0, n), n >= 1.
  uint64_t uniform_int(uint64_t n);

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal();

  Eigen::Vector3d normal3(double sigma);
  Eigen::Vector3d unit_vector();
  // Uniform density over the solid ball of the given radius.
  Eigen::Vector3d in_ball(double radius);

 private:
  uint64_t s_[4];
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

// Stream derivation for per-frame / per-worker substreams.
uint64_t mix_seed(uint64_t seed, uint64_t stream);

}  // namespace wscloc::util
