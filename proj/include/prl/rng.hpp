#ifndef PRL_RNG_HPP_
#define PRL_RNG_HPP_

#include <cstdint>
#include <initializer_list>
#include <random>

namespace prl {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept
{
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Folds a list of integers into one seed, order-sensitive.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) noexcept
{
  std::uint64_t h = 0x2545f4914f6cdd1dULL;
  for (auto p : parts) {
    h = mix64(h ^ mix64(p));
  }
  return h;
}

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) built from the top 53 bits; identical on every platform.
inline double uniform01(Rng& rng) noexcept
{
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n); n must be positive.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) noexcept
{
  // Rejection sampling keeps the result unbiased and platform independent.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

}  // namespace prl

#endif  // PRL_RNG_HPP_
