#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>

namespace mmkd {

// Counter-based PRNG built on the SplitMix64 finalizer. Every random draw is
// a pure function of (key, counter), so generation is reproducible across
// platforms and embarrassingly parallel: no stream state is ever shared.
//
// word(key, i) = mix64(key + (i + 1) * GOLDEN), the SplitMix64 output stream
// seeded at `key`. Keys for sub-streams are derived with derive()/derive_tag().

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t key, std::uint64_t index) {
  return mix64(mix64(key) + kGolden * index);
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

constexpr std::uint64_t derive_tag(std::uint64_t key, std::string_view tag) {
  return derive_seed(key, fnv1a64(tag));
}

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t word(std::uint64_t counter) const {
    return mix64(key_ + (counter + 1) * kGolden);
  }

  std::uint64_t next() { return word(cursor_++); }

  // Uniform in [0, 1), 53-bit resolution.
  double next_unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double next_range(double lo, double hi) {
    return lo + (hi - lo) * next_unit();
  }

  // Uniform integer in [0, n). Modulo bias is negligible for the small n
  // used here (class counts, pixel offsets).
  int next_int(int n) {
    return static_cast<int>(next() % static_cast<std::uint64_t>(n));
  }

  bool next_bool() { return (next() & 1ULL) != 0; }

  // Standard normal via Box-Muller; consumes two counters per pair.
  std::pair<double, double> next_gauss_pair() {
    double u1 = 1.0 - next_unit();
    double u2 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    return {r * std::cos(a), r * std::sin(a)};
  }

  double next_gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    auto [g0, g1] = next_gauss_pair();
    spare_ = g1;
    have_spare_ = true;
    return g0;
  }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t cursor_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace mmkd
