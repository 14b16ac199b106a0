#include "factrace/config.hpp"

#include <nlohmann/json.hpp>

#include "factrace/error.hpp"
#include "factrace/report.hpp"

namespace factrace {

namespace {

using nlohmann::json;

[[noreturn]] void invalid(const std::string& what) {
  throw Error(ErrorKind::InvalidConfig, "invalid model config: " + what);
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  return it->get<T>();
}

int require_int(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_number_integer()) invalid(std::string("missing integer field '") + key + "'");
  return it->get<int>();
}

Activation parse_activation(const std::string& s) {
  if (s == "gelu" || s == "gelu_new" || s == "gelu_pytorch_tanh") return Activation::gelu;
  if (s == "silu" || s == "swish") return Activation::silu;
  invalid("unknown activation '" + s + "'");
}

NormKind parse_norm(const std::string& s) {
  if (s == "layernorm") return NormKind::layernorm;
  if (s == "rmsnorm") return NormKind::rmsnorm;
  invalid("unknown norm_kind '" + s + "'");
}

PositionalKind parse_positional(const std::string& s) {
  if (s == "learned_absolute") return PositionalKind::learned_absolute;
  if (s == "rotary") return PositionalKind::rotary;
  invalid("unknown positional_kind '" + s + "'");
}

ArchFamily parse_family(const std::string& s) {
  if (s == "gpt2") return ArchFamily::gpt2;
  if (s == "llama" || s == "qwen2") return ArchFamily::llama;
  invalid("unknown family '" + s + "'");
}

ModelConfig from_hf_gpt2(const json& j) {
  ModelConfig c;
  c.family = ArchFamily::gpt2;
  c.num_layers = require_int(j, "n_layer");
  c.d_model = require_int(j, "n_embd");
  c.num_heads = require_int(j, "n_head");
  c.d_ff = get_or<int>(j, "n_inner", 4 * c.d_model);
  c.vocab_size = require_int(j, "vocab_size");
  c.max_positions = require_int(j, "n_positions");
  c.activation = parse_activation(get_or<std::string>(j, "activation_function", "gelu_new"));
  c.norm_kind = NormKind::layernorm;
  c.positional_kind = PositionalKind::learned_absolute;
  c.norm_eps = get_or<float>(j, "layer_norm_epsilon", 1e-5f);
  c.tie_embeddings = true;
  return c;
}

ModelConfig from_hf_llama(const json& j, bool qwen) {
  ModelConfig c;
  c.family = ArchFamily::llama;
  c.num_layers = require_int(j, "num_hidden_layers");
  c.d_model = require_int(j, "hidden_size");
  c.num_heads = require_int(j, "num_attention_heads");
  c.num_kv_heads = get_or<int>(j, "num_key_value_heads", c.num_heads);
  c.d_ff = require_int(j, "intermediate_size");
  c.vocab_size = require_int(j, "vocab_size");
  c.max_positions = require_int(j, "max_position_embeddings");
  c.activation = parse_activation(get_or<std::string>(j, "hidden_act", "silu"));
  c.norm_kind = NormKind::rmsnorm;
  c.positional_kind = PositionalKind::rotary;
  c.gated_mlp = true;
  c.qkv_bias = qwen || get_or<bool>(j, "attention_bias", false);
  c.tie_embeddings = get_or<bool>(j, "tie_word_embeddings", false);
  c.norm_eps = get_or<float>(j, "rms_norm_eps", 1e-6f);
  c.rope_theta = get_or<float>(j, "rope_theta", 10000.0f);
  return c;
}

ModelConfig from_native(const json& j) {
  ModelConfig c;
  c.family = parse_family(get_or<std::string>(j, "family", "gpt2"));
  c.num_layers = require_int(j, "num_layers");
  c.d_model = require_int(j, "d_model");
  c.num_heads = require_int(j, "num_heads");
  c.num_kv_heads = get_or<int>(j, "num_kv_heads", 0);
  c.d_ff = require_int(j, "d_ff");
  c.vocab_size = require_int(j, "vocab_size");
  c.max_positions = require_int(j, "max_positions");
  c.activation = parse_activation(get_or<std::string>(j, "activation_kind", "gelu"));
  c.norm_kind = parse_norm(get_or<std::string>(j, "norm_kind", "layernorm"));
  c.positional_kind = parse_positional(get_or<std::string>(j, "positional_kind", "learned_absolute"));
  const bool llama = c.family == ArchFamily::llama;
  c.gated_mlp = get_or<bool>(j, "gated_mlp", llama);
  c.qkv_bias = get_or<bool>(j, "qkv_bias", false);
  c.tie_embeddings = get_or<bool>(j, "tie_embeddings", !llama);
  c.norm_eps = get_or<float>(j, "norm_eps", llama ? 1e-6f : 1e-5f);
  c.rope_theta = get_or<float>(j, "rope_theta", 10000.0f);
  return c;
}

}  // namespace

void ModelConfig::validate() const {
  if (num_layers < 1) invalid("num_layers must be >= 1 (got " + std::to_string(num_layers) + ")");
  if (d_model < 1) invalid("d_model must be >= 1");
  if (num_heads < 1) invalid("num_heads must be >= 1");
  if (d_model % num_heads != 0) {
    invalid("d_model " + std::to_string(d_model) + " is not divisible by num_heads " +
            std::to_string(num_heads));
  }
  if (kv_heads() < 1 || num_heads % kv_heads() != 0) invalid("num_heads must be a multiple of num_kv_heads");
  if (d_ff < 1) invalid("d_ff must be >= 1");
  if (vocab_size < 1) invalid("vocab_size must be >= 1");
  if (max_positions < 1) invalid("max_positions must be >= 1");
  if (positional_kind == PositionalKind::rotary && head_dim() % 2 != 0) {
    invalid("rotary embeddings need an even head dimension");
  }
  if (family == ArchFamily::gpt2) {
    if (norm_kind != NormKind::layernorm || positional_kind != PositionalKind::learned_absolute ||
        gated_mlp) {
      invalid("gpt2 family requires layernorm, learned_absolute positions and a plain MLP");
    }
  } else {
    if (norm_kind != NormKind::rmsnorm || positional_kind != PositionalKind::rotary) {
      invalid("llama family requires rmsnorm and rotary positions");
    }
  }
}

ModelConfig parse_model_config(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    invalid(std::string("not valid JSON: ") + e.what());
  }
  if (!j.is_object()) invalid("top level must be an object");
  ModelConfig c;
  try {
    if (j.contains("model_type")) {
      const auto type = j["model_type"].get<std::string>();
      if (type == "gpt2") {
        c = from_hf_gpt2(j);
      } else if (type == "llama" || type == "qwen2") {
        c = from_hf_llama(j, type == "qwen2");
      } else {
        invalid("unsupported model_type '" + type + "'");
      }
    } else {
      c = from_native(j);
    }
  } catch (const json::exception& e) {
    invalid(e.what());
  }
  c.validate();
  return c;
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  return parse_model_config(read_text_file(path));
}

std::string to_json(const ModelConfig& c) {
  json j = {
      {"family", to_string(c.family)},
      {"num_layers", c.num_layers},
      {"d_model", c.d_model},
      {"num_heads", c.num_heads},
      {"num_kv_heads", c.num_kv_heads},
      {"d_ff", c.d_ff},
      {"vocab_size", c.vocab_size},
      {"max_positions", c.max_positions},
      {"activation_kind", to_string(c.activation)},
      {"norm_kind", to_string(c.norm_kind)},
      {"positional_kind", to_string(c.positional_kind)},
      {"gated_mlp", c.gated_mlp},
      {"qkv_bias", c.qkv_bias},
      {"tie_embeddings", c.tie_embeddings},
      {"norm_eps", c.norm_eps},
      {"rope_theta", c.rope_theta},
  };
  return j.dump(2);
}

std::string_view to_string(Activation a) { return a == Activation::gelu ? "gelu" : "silu"; }
std::string_view to_string(NormKind n) { return n == NormKind::layernorm ? "layernorm" : "rmsnorm"; }
std::string_view to_string(PositionalKind p) {
  return p == PositionalKind::learned_absolute ? "learned_absolute" : "rotary";
}
std::string_view to_string(ArchFamily f) { return f == ArchFamily::gpt2 ? "gpt2" : "llama"; }

}  // namespace factrace
