#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace factrace {

std::uint64_t splitmix64(std::uint64_t x);

// Standard normal draw keyed by (seed, position, component). Independent of
// call order.
double gaussian_at(std::uint64_t seed, std::uint64_t position, std::uint64_t component);

// Derives the per-sample seed used by the corrupted runs.
std::uint64_t sample_seed(std::uint64_t base_seed, std::uint64_t sample_index);

// sigma * N(0,1) per component, keyed by (seed, position, component).
std::vector<float> gaussian_noise(float sigma, std::uint64_t seed, std::size_t position, std::size_t dim);

}  // namespace factrace
