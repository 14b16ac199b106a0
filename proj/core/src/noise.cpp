#include "factrace/noise.hpp"

#include <cmath>
#include <numbers>

namespace factrace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace {

std::uint64_t key(std::uint64_t seed, std::uint64_t position, std::uint64_t component, std::uint64_t lane) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ position);
  h = splitmix64(h ^ component);
  return splitmix64(h ^ lane);
}

// Uniform in (0, 1].
double unit(std::uint64_t bits) { return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53; }

}  // namespace

double gaussian_at(std::uint64_t seed, std::uint64_t position, std::uint64_t component) {
  const double u1 = unit(key(seed, position, component, 0));
  const double u2 = unit(key(seed, position, component, 1));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t sample_seed(std::uint64_t base_seed, std::uint64_t sample_index) {
  return splitmix64(splitmix64(base_seed) ^ (0xa5a5a5a5ULL + sample_index));
}

std::vector<float> gaussian_noise(float sigma, std::uint64_t seed, std::size_t position, std::size_t dim) {
  std::vector<float> out(dim);
  for (std::size_t c = 0; c < dim; ++c) out[c] = sigma * static_cast<float>(gaussian_at(seed, position, c));
  return out;
}

}  // namespace factrace
