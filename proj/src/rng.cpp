#include "dpfl/rng.hpp"

#include <random>

#include "dpfl/error.hpp"

namespace dpfl {
namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Rng::result_type Rng::operator()() noexcept {
  ++counter_;
  return mix(seed_ + counter_ * kGolden);
}

Rng Rng::split(std::string_view label) const noexcept {
  return Rng(mix(seed_ ^ mix(fnv1a(label))));
}

Rng Rng::split(std::uint64_t index) const noexcept {
  return Rng(mix(seed_ ^ mix(index + kGolden)));
}

double Rng::uniform() noexcept {
  // 53 high bits -> [0, 1)
  return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(*this);
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) throw ValidationError("gamma shape must be positive");
  std::gamma_distribution<double> dist(shape, 1.0);
  return dist(*this);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw ValidationError("Rng::below requires n > 0");
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(*this);
}

std::size_t Rng::discrete(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ValidationError("discrete weights must be nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw ValidationError("discrete weights sum to zero");
  const double u = uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  // Rounding at the top end: last index with positive weight.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return i;
  }
  return weights.size() - 1;
}

}  // namespace dpfl
