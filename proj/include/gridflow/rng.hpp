#pragma once
#include <cstdint>
#include <random>
#include <vector>

#include "gridflow/errors.hpp"

namespace gridflow {

/// mt19937_64 with hand-rolled draws so streams are identical across
/// standard libraries (std::uniform_real_distribution is not portable).
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  /// [0, 1) with 53-bit resolution
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// index in [0, n) by rejection, bias-free
  uint64_t below(uint64_t n) {
    if (n == 0) throw DomainError("Rng::below(0)");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  /// Beta(2,2) via the median of three independent uniforms.
  double beta22() {
    double a = uniform(), b = uniform(), c = uniform();
    double lo = std::min(a, std::min(b, c)), hi = std::max(a, std::max(b, c));
    return a + b + c - lo - hi;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[size_t(below(i))]);
  }

 private:
  std::mt19937_64 eng_;
};

/// Stable stream splitting (per-scenario seeds etc).
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t x = a + 0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

}  // namespace gridflow
