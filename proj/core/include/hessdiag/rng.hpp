#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

// Counter-based random numbers: every draw is a pure function of
// (key, counter), so results never depend on evaluation order.
namespace hessdiag::rng {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Derives an independent key from a parent seed and up to two stream ids.
constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t a,
                               std::uint64_t b = 0) noexcept {
  std::uint64_t k = splitmix64(seed ^ 0xA0761D6478BD642FULL);
  k = splitmix64(k ^ splitmix64(a + 0xE7037ED1A0B428DBULL));
  k = splitmix64(k ^ splitmix64(b + 0x8EBC6AF09C88C6E3ULL));
  return k;
}

constexpr std::uint64_t bits(std::uint64_t key, std::uint64_t counter) noexcept {
  return splitmix64(splitmix64(key) ^ splitmix64(counter ^ 0x589965CC75374CC3ULL));
}

// Uniform in [0, 1) with 53 random bits.
constexpr double uniform(std::uint64_t key, std::uint64_t counter) noexcept {
  return static_cast<double>(bits(key, counter) >> 11) * 0x1.0p-53;
}

// Uniform in (0, 1), safe for log().
constexpr double uniform_open(std::uint64_t key, std::uint64_t counter) noexcept {
  return (static_cast<double>(bits(key, counter) >> 11) + 0.5) * 0x1.0p-53;
}

inline double normal(std::uint64_t key, std::uint64_t counter) noexcept {
  const double u1 = uniform_open(key, 2 * counter);
  const double u2 = uniform(key, 2 * counter + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

constexpr double rademacher(std::uint64_t key, std::uint64_t counter) noexcept {
  return (bits(key, counter) >> 63) != 0 ? 1.0 : -1.0;
}

// Sequential view over a counter stream, for code that draws many values.
class Stream {
 public:
  explicit constexpr Stream(std::uint64_t key) noexcept : key_(key) {}

  std::uint64_t next_bits() noexcept { return bits(key_, counter_++); }
  double next_uniform() noexcept { return uniform(key_, counter_++); }
  double next_normal() noexcept { return normal(key_, counter_++); }

  // Unbiased integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    for (;;) {
      const std::uint64_t r = next_bits();
      if (r < limit) return r % n;
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace hessdiag::rng
