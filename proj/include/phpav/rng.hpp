#ifndef PHPAV_RNG_HPP
#define PHPAV_RNG_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "phpav/tensor.hpp"

namespace phpav {

// FNV-1a, used both for label-derived seeding and array fingerprints.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

// Deterministic splitmix64 stream with a Box-Muller normal on top. Hand-rolled
// rather than <random> so that frozen golden values do not depend on the
// standard library's unspecified distribution algorithms.
class Rng {
public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  // Independent stream derived from a parent seed and a text label. Params and
  // datasets each get their own labeled stream, so init values do not depend
  // on registration order.
  static Rng derive(uint64_t seed, const std::string& label) {
    uint64_t h = fnv1a(label);
    h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return Rng(h);
  }

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0,1), 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  long uniform_int(long n) { return static_cast<long>(next_u64() % static_cast<uint64_t>(n)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // Box-Muller; u clamped away from 0 so log stays finite.
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    double v = uniform();
    double r = std::sqrt(-2.0 * std::log(u));
    double a = 6.283185307179586476925286766559 * v;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void fill_normal(Tensor<T>& t, double stddev) {
    for (auto& x : t.data) x = static_cast<T>(normal() * stddev);
  }

  template <typename T>
  Tensor<T> normal_tensor(std::vector<long> shape, double stddev) {
    Tensor<T> t(std::move(shape));
    fill_normal(t, stddev);
    return t;
  }

  // Fisher-Yates shuffle (deterministic given the stream state).
  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (long i = static_cast<long>(v.size()) - 1; i > 0; --i) {
      long j = uniform_int(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace phpav

#endif
