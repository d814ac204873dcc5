#pragma once

#include <cstdint>
#include <random>

namespace mass {

// splitmix64 step; used to derive independent stream seeds from a master seed.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic seed derivation: fold any number of labels into a master seed.
inline uint64_t derive_seed(uint64_t master, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t s = master;
  splitmix64(s);
  s ^= a;
  splitmix64(s);
  s ^= b;
  splitmix64(s);
  s ^= c;
  return splitmix64(s);
}

// mt19937_64 with hand-rolled distributions. std::uniform_real_distribution is
// implementation-defined, so batches would not reproduce across standard
// libraries; the 53-bit construction below is pinned.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t bits() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

  // uniform integer in [0, n)
  int index(int n) { return static_cast<int>(uniform() * n); }

  bool coin() { return (gen_() & 1ULL) != 0; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace mass
