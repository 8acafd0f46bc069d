#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace weam {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

/// Deterministic random source. All draws are derived from mt19937_64 output
/// with hand-rolled distributions, so a given seed produces the same stream
/// on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t bits() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Uniform in [a, b).
  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) { return gen_() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller. Each call consumes two draws.
  double normal() {
    double u1 = static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53;  // (0,1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
};

/// Derives an independent named stream from a master seed, e.g.
/// substream(seed, "dropout") or substream(seed, "sensitivity", sigma_index).
inline Rng substream(std::uint64_t master, std::string_view name,
                     std::uint64_t index = 0) {
  std::uint64_t x = master ^ detail::fnv1a(name);
  std::uint64_t a = detail::splitmix64(x);
  x ^= index * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull;
  std::uint64_t b = detail::splitmix64(x);
  return Rng(a ^ (b << 1));
}

}  // namespace weam
