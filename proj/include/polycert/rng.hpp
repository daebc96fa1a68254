// rng.hpp — deterministic 64-bit mixer PRNG, identical on every platform and
// standard library.  Used for corpus generation and randomized checks so
// seeds reproduce byte-for-byte everywhere.

#pragma once

#include <cstdint>
#include <vector>

namespace polycert {

struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next() {
    state += 0x9e3779b97f4a7c15ull;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, n); n must be positive.  The tiny modulo bias is
  // irrelevant here — determinism is what matters.
  uint64_t below(uint64_t n) { return next() % n; }

  int irange(int lo, int hi_inclusive) {
    return lo + static_cast<int>(below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
  }

  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }
};

}  // namespace polycert
