#include "factrace/tensor.hpp"

#include "factrace/error.hpp"

namespace factrace {

Tensor::Tensor(std::vector<std::size_t> s, std::vector<float> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (element_count(shape) != data.size()) {
    throw Error(ErrorKind::ShapeMismatch, "tensor data length " + std::to_string(data.size()) +
                                              " does not match shape " + shape_string());
  }
}

std::string Tensor::shape_string() const {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data == b.data;
}

}  // namespace factrace
