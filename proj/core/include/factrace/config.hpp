#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace factrace {

enum class Activation { gelu, silu };
enum class NormKind { layernorm, rmsnorm };
enum class PositionalKind { learned_absolute, rotary };

// Tensor-name schema of the weight container.
//   gpt2  : wte/wpe/h.{i}.* with fused c_attn, Conv1D [in,out] layout
//   llama : model.embed_tokens / model.layers.{i}.* with Linear [out,in]
//           layout (also covers Qwen2 via qkv_bias)
enum class ArchFamily { gpt2, llama };

struct ModelConfig {
  ArchFamily family = ArchFamily::gpt2;
  int num_layers = 0;
  int d_model = 0;
  int num_heads = 0;
  int num_kv_heads = 0;  // 0 means num_heads
  int d_ff = 0;
  int vocab_size = 0;
  int max_positions = 0;
  Activation activation = Activation::gelu;
  NormKind norm_kind = NormKind::layernorm;
  PositionalKind positional_kind = PositionalKind::learned_absolute;
  bool gated_mlp = false;
  bool qkv_bias = false;
  bool tie_embeddings = true;
  float norm_eps = 1e-5f;
  float rope_theta = 10000.0f;

  int kv_heads() const { return num_kv_heads > 0 ? num_kv_heads : num_heads; }
  int head_dim() const { return d_model / num_heads; }

  // Throws Error(InvalidConfig) naming the violated constraint.
  void validate() const;
};

// Accepts either the native schema (keys mirror ModelConfig fields) or a
// Hugging Face config.json for gpt2 / llama / qwen2 model types.
ModelConfig parse_model_config(std::string_view json_text);
ModelConfig load_model_config(const std::filesystem::path& path);
std::string to_json(const ModelConfig& config);

std::string_view to_string(Activation a);
std::string_view to_string(NormKind n);
std::string_view to_string(PositionalKind p);
std::string_view to_string(ArchFamily f);

}  // namespace factrace
