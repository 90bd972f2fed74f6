#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <utility>
#include <vector>

namespace maskdiff {

// Counter-free deterministic RNG.  Streams are derived by hashing a seed with
// a list of tag words (purpose, step, example index, ...), so any draw in the
// training loop depends only on (seed, tags) and never on how many draws some
// other code path consumed.  That property is what makes checkpoint-resume
// reproduce an uninterrupted run bit for bit.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_stream(uint64_t seed, std::initializer_list<uint64_t> tags) {
  uint64_t h = splitmix64(seed);
  for (uint64_t t : tags) h = splitmix64(h ^ t);
  return h;
}

// Tag words for the independent random streams used across the codebase.
namespace stream {
constexpr uint64_t init = 0x11;       // parameter initialization
constexpr uint64_t shuffle = 0x22;    // per-epoch example order
constexpr uint64_t branch = 0x33;     // loss-branch / timestep / mask draws
constexpr uint64_t noise = 0x44;      // forward-process eps draws
constexpr uint64_t augment = 0x55;    // crop / flip draws
constexpr uint64_t dropout = 0x66;    // label dropout draws
constexpr uint64_t sample = 0x77;     // sampler noise
constexpr uint64_t data = 0x88;       // synthetic dataset generation
constexpr uint64_t eval = 0x99;       // probe / eval subset selection
}  // namespace stream

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc908ULL)) {}

  Rng(uint64_t seed, std::initializer_list<uint64_t> tags) : Rng(derive_stream(seed, tags)) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  // Standard normal via Box-Muller; draws are paired so one call in two is free.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace maskdiff
