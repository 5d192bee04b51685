#pragma once

#include <cstddef>
#include <cstdint>

namespace flowsynth {

// SplitMix64 (Steele, Lea, Flood 2014). The whole project draws randomness
// from this generator so phantoms and training runs are reproducible from a
// seed on any platform:
//
//   state += 0x9E3779B97F4A7C15
//   z = state
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   return z ^ (z >> 31)
//
// uniform() uses the top 53 bits: (next() >> 11) * 2^-53.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next();
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller, one output per two uniforms (no cached second value).
  double normal();
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

// Independent sub-stream seed: one SplitMix64 step applied to root ^ mix(stream).
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream);

}  // namespace flowsynth
