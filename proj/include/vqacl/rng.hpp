#pragma once

#include <cstdint>
#include <vector>

namespace vqacl {

// splitmix64 finalizer; also used directly as a counter-based hash so
// per-scene / per-cell draws depend only on their keys, never on call order.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_key(std::uint64_t a, std::uint64_t b) {
  return mix64(mix64(a) ^ (b + 0x9e3779b97f4a7c15ULL));
}

inline std::uint64_t hash_key(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return hash_key(hash_key(a, b), c);
}

inline std::uint64_t hash_key(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                              std::uint64_t d) {
  return hash_key(hash_key(a, b, c), d);
}

// top 53 bits -> [0,1)
inline double unit_double(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Sequential splitmix64 stream. Self-contained so streams are bit-identical
// across platforms and standard library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  double next_double() { return unit_double(next_u64()); }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // unbiased bounded draw via rejection
  std::uint64_t next_below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace vqacl
