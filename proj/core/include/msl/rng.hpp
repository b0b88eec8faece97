#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace msl {

// splitmix64; used to derive stream seeds so that substreams are decorrelated.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(mix64(a) ^ b); }
inline uint64_t mix64(uint64_t a, uint64_t b, uint64_t c) {
  return mix64(mix64(a, b) ^ c);
}

// Seeded random stream. All distributions are implemented here rather than
// with std:: distribution objects, whose output is implementation-defined;
// this keeps every sampled value a pure function of the seed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t u64() { return engine_(); }

  // uniform double in [0, 1)
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  // uniform double in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [lo, hi] inclusive
  int uniform_int(int lo, int hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; one value per call, cached pair discarded for simplicity.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  Rng child(uint64_t tag) { return Rng(mix64(u64(), tag)); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace msl
