#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>

namespace cesaa {

/// Deterministic pseudo-random generator (xoshiro256**) with a fully
/// serializable 256-bit state. All randomness in the project flows through
/// this class so that a fixed seed gives bit-identical runs; the standard
/// library distributions are avoided because their algorithms are
/// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi);

  /// Standard normal via Box-Muller; consumes exactly two uniforms per call
  /// so the stream position is easy to reason about.
  double normal();

  /// Uniform integer in [0, n), n > 0.
  int uniform_int(int n);

  std::array<std::uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<std::uint64_t, 4>& s) { s_ = s; }

  /// Derive an independent stream from (seed, path...). Each run, epoch and
  /// purpose gets its own stream so that checkpoint/restore and parallel
  /// sweeps never share or race a generator.
  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

 private:
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace cesaa
