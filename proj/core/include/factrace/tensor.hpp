#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace factrace {

// Dense row-major float32 tensor.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s)
      : shape(std::move(s)), data(element_count(shape), 0.0f) {}
  Tensor(std::vector<std::size_t> s, std::vector<float> d);

  static std::size_t element_count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, std::size_t b) { return a * b; });
  }

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  // Row `i` of a rank-2 tensor.
  std::span<const float> row(std::size_t i) const {
    const std::size_t cols = shape.back();
    return {data.data() + i * cols, cols};
  }
  std::span<float> row(std::size_t i) {
    const std::size_t cols = shape.back();
    return {data.data() + i * cols, cols};
  }

  std::string shape_string() const;
};

bool operator==(const Tensor& a, const Tensor& b);

}  // namespace factrace
