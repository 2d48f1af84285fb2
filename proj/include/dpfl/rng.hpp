#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string_view>

namespace dpfl {

/// Deterministic, splittable random stream.
///
/// The engine is a SplitMix64 counter: the n-th output is a pure function of
/// (seed, n). Child streams are derived from the seed and a label only, so a
/// child never depends on how much its parent or siblings have consumed.
/// Satisfies UniformRandomBitGenerator for use with <random> distributions.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) noexcept : seed_(seed), counter_(0) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept;

  Rng split(std::string_view label) const noexcept;
  Rng split(std::uint64_t index) const noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Uniform in [0, 1).
  double uniform() noexcept;
  double normal();
  double gamma(double shape);
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  bool bernoulli(double p) noexcept { return uniform() < p; }
  /// Index drawn proportionally to nonnegative weights.
  std::size_t discrete(std::span<const double> weights);

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

/// Fisher-Yates shuffle driven by an Rng.
template <typename T>
void shuffle(std::span<T> items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace dpfl
