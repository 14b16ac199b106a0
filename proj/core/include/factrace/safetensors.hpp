#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "factrace/tensor.hpp"

namespace factrace {

// Named-tensor container in the safetensors layout:
//   u64 LE header length N | N bytes JSON header | raw tensor data
// Header entries: name -> {"dtype", "shape", "data_offsets": [begin, end)}.
// F32, F16 and BF16 are accepted and widened to float32 on read.
using TensorMap = std::map<std::string, Tensor>;

TensorMap read_safetensors(const std::filesystem::path& path);
TensorMap parse_safetensors(const std::vector<std::uint8_t>& bytes);

// Writes F32 tensors, names in sorted order. Output is byte-deterministic.
void write_safetensors(const std::filesystem::path& path, const TensorMap& tensors);
std::vector<std::uint8_t> serialize_safetensors(const TensorMap& tensors);

float half_to_float(std::uint16_t h);
float bfloat16_to_float(std::uint16_t h);

}  // namespace factrace
