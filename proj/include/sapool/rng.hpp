#pragma once

#include <cstdint>
#include <span>

namespace sapool {

// Counter-based generator: draw k from (seed, counter) is a pure function, so a
// saved state reproduces the stream on any platform.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller; consumes two draws.
  double normal(double mean = 0.0, double stddev = 1.0);
  // Uniform integer in [0, n). Rejection-free multiply-shift; n must be > 0.
  std::uint64_t below(std::uint64_t n);

  // Derive an independent stream, e.g. one per layer or per epoch.
  RngState fork(std::uint64_t salt) const;

  friend bool operator==(const RngState&, const RngState&) = default;
};

template <typename T>
void fill_uniform(std::span<T> out, RngState& rng, double lo, double hi) {
  for (auto& v : out) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_normal(std::span<T> out, RngState& rng, double mean, double stddev) {
  for (auto& v : out) v = static_cast<T>(rng.normal(mean, stddev));
}

}  // namespace sapool
