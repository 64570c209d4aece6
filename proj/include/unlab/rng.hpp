#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string_view>
#include <vector>

namespace unlab {

// FNV-1a over bytes, used to fold stream tags into seeds.
inline uint64_t hash_bytes(std::string_view s,
                           uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// splitmix64 finalizer; decorrelates nearby seeds.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic random stream. All draw algorithms are spelled out here
// instead of relying on std::*_distribution, whose outputs vary between
// standard library implementations; this keeps artifacts byte-stable.
//
// Streams are derived, not advanced: every consumer asks for a fresh stream
// named by (master seed, purpose tag, index), so adding or removing one
// consumer never shifts the draws seen by another.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(mix64(seed)) {}

  static Rng stream(uint64_t master, std::string_view tag) {
    return Rng(mix64(master) ^ hash_bytes(tag));
  }

  static Rng stream(uint64_t master, std::string_view tag, uint64_t index) {
    return Rng(mix64(mix64(master) ^ hash_bytes(tag)) ^ mix64(index));
  }

  uint64_t next_u64() { return gen_(); }

  // Unbiased integer in [0, n) via rejection sampling.
  uint64_t bounded(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t max = std::numeric_limits<uint64_t>::max();
    const uint64_t limit = max - max % n;
    uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  // Uniform double in [0, 1) with 53 bits of precision.
  double unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Box-Muller with cached spare.
  double normal(double mu = 0.0, double sigma = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mu + sigma * spare_;
    }
    double u1 = unit();
    double u2 = unit();
    while (u1 <= 0.0) u1 = unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mu + sigma * r * std::cos(theta);
  }

  // Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace unlab
