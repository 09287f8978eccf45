#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace pdisco {

// splitmix64 step; used both as a mixer and to seed streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) ^ (0x9e3779b97f4a7c15ULL + b));
}

inline std::uint64_t hash_mix(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x7f4a7c15ULL;
  for (std::uint64_t p : parts) h = hash_mix(h, p);
  return h;
}

// Seeded random stream. All sampling in the engine goes through this so that
// results are a pure function of the seeds handed in; distributions are
// implemented by hand to keep sequences stable across standard libraries.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  std::uint64_t uniform_index(std::uint64_t n) { return engine_() % n; }

  // standard Gumbel(0,1): -log(-log(U)), U clamped away from {0,1}
  double gumbel() {
    double u = std::clamp(uniform(), 1e-300, 1.0 - 1e-16);
    return -std::log(-std::log(u));
  }

  // Box-Muller normal; one value per call, no caching so streams stay simple
  double normal() {
    double u1 = std::clamp(uniform(), 1e-300, 1.0);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pdisco
