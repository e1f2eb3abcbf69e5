#pragma once

#include <algorithm>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace aapp {

// Deterministic counter-based PRNG (splitmix64 core). Streams are derived
// from a root seed by label, so every consumer — weight synthesis, prompt
// generation, random pruning, shuffles — draws from an independent,
// reproducible sequence. std::random distributions are avoided on purpose:
// their output is implementation-defined and would break cross-platform
// byte-stable artifacts.
//
// Derivation tree used by the project (root = RunConfig.seed):
//   root / "world"            synthetic-world construction attempts
//   root / "weights"          model weight synthesis
//   root / "prompts/<label>"  calibration + evaluation prompt streams
//   root / "eval_order"       evaluation stream shuffle
//   root / "random_prune"     Random-method kept sets
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), state_(mix(seed)) {}

  // Child stream keyed by (this stream's seed, label). Does not advance
  // the parent.
  Rng derive(std::string_view label) const { return Rng(mix(seed_ ^ fnv1a(label))); }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
  uint64_t below(uint64_t n) { return next_u64() % n; }

  int uniform_int(int lo, int hi_inclusive) {
    return lo + int(below(uint64_t(hi_inclusive - lo + 1)));
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[size_t(below(i))]);
    }
  }

  // k distinct values from [0, n), ascending.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> all(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) all[size_t(i)] = i;
    shuffle(all);
    all.resize(static_cast<size_t>(k));
    std::vector<int> out(all.begin(), all.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  uint64_t seed() const { return seed_; }

  static uint64_t fnv1a(std::string_view s, uint64_t h = 1469598103934665603ull) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    return h;
  }

  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  uint64_t seed_;
  uint64_t state_;
};

}  // namespace aapp
