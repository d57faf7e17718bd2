// Counter-based random streams. A stream is identified by a key derived from
// (seed, tile, point index); the j-th draw is a pure function of (key, j), so
// sampling order and parallelism never change the output.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace elab {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  return splitmix64(h ^ (splitmix64(v) + 0x632BE59BD9B4E019ULL + (h << 6) + (h >> 2)));
}

class CounterStream {
 public:
  explicit constexpr CounterStream(std::uint64_t key) : key_(key) {}

  [[nodiscard]] constexpr std::uint64_t bits(std::uint64_t j) const {
    return splitmix64(key_ ^ splitmix64(j + 0xD1B54A32D192ED03ULL));
  }

  /// Uniform on [0, 1) with 53 random bits.
  [[nodiscard]] double uniform(std::uint64_t j) const {
    return static_cast<double>(bits(j) >> 11) * 0x1.0p-53;
  }

  /// Uniform on (0, 1]; safe for logarithms.
  [[nodiscard]] double uniform_open0(std::uint64_t j) const { return 1.0 - uniform(j); }

  /// Poisson(mean) by sequential inversion from draw 0; large means fall back to
  /// the standard library sampler seeded from the stream key.
  [[nodiscard]] std::uint64_t poisson(double mean) const {
    if (mean <= 0.0) return 0;
    if (mean > 60.0) {
      std::mt19937_64 eng(bits(0));
      std::poisson_distribution<std::uint64_t> dist(mean);
      return dist(eng);
    }
    const double u = uniform(0);
    double p = std::exp(-mean);
    double cdf = p;
    std::uint64_t k = 0;
    while (u >= cdf && k < 10000) {
      ++k;
      p *= mean / static_cast<double>(k);
      cdf += p;
      if (p == 0.0) break;
    }
    return k;
  }

  [[nodiscard]] constexpr std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
};

}  // namespace elab
