#include "factrace/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "factrace/error.hpp"

namespace factrace {

namespace {

using nlohmann::json;

std::uint64_t read_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  return 0;
}

float read_f32_le(const std::uint8_t* p) {
  std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                       (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = std::uint32_t(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1fu;
  std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: renormalise
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ffu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

float bfloat16_to_float(std::uint16_t h) {
  return std::bit_cast<float>(std::uint32_t(h) << 16);
}

TensorMap parse_safetensors(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw Error(ErrorKind::Io, "safetensors: file shorter than header length");
  const std::uint64_t header_len = read_u64_le(bytes.data());
  if (header_len > bytes.size() - 8) throw Error(ErrorKind::Io, "safetensors: header length exceeds file size");
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, std::string("safetensors: bad header JSON: ") + e.what());
  }
  const std::uint8_t* data = bytes.data() + 8 + header_len;
  const std::size_t data_size = bytes.size() - 8 - header_len;

  TensorMap out;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") continue;
    const auto dtype = entry.at("dtype").get<std::string>();
    const std::size_t width = dtype_size(dtype);
    if (width == 0) {
      throw Error(ErrorKind::UnsupportedDtype,
                  "tensor '" + name + "' has unsupported dtype " + dtype);
    }
    auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
    if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_size) {
      throw Error(ErrorKind::Io, "tensor '" + name + "' has invalid data_offsets");
    }
    const std::size_t count = Tensor::element_count(shape);
    if ((offsets[1] - offsets[0]) != count * width) {
      throw Error(ErrorKind::ShapeMismatch,
                  "tensor '" + name + "' byte length does not match its shape");
    }
    std::vector<float> values(count);
    const std::uint8_t* p = data + offsets[0];
    for (std::size_t i = 0; i < count; ++i) {
      if (dtype == "F32") {
        values[i] = read_f32_le(p + 4 * i);
      } else {
        const std::uint16_t h = std::uint16_t(p[2 * i] | (p[2 * i + 1] << 8));
        values[i] = dtype == "F16" ? half_to_float(h) : bfloat16_to_float(h);
      }
    }
    out.emplace(name, Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

TensorMap read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open weights file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_safetensors(bytes);
}

std::vector<std::uint8_t> serialize_safetensors(const TensorMap& tensors) {
  json header = json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::size_t bytes = t.data.size() * 4;
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string header_text = header.dump();
  // pad so the data section starts 8-byte aligned
  while ((header_text.size() % 8) != 0) header_text.push_back(' ');

  std::vector<std::uint8_t> out;
  out.reserve(8 + header_text.size() + offset);
  const std::uint64_t len = header_text.size();
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(len >> (8 * i)));
  out.insert(out.end(), header_text.begin(), header_text.end());
  for (const auto& [name, t] : tensors) {
    for (float f : t.data) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(bits >> (8 * i)));
    }
  }
  return out;
}

void write_safetensors(const std::filesystem::path& path, const TensorMap& tensors) {
  const auto bytes = serialize_safetensors(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace factrace
