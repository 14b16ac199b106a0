#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "factrace/config.hpp"
#include "factrace/safetensors.hpp"
#include "factrace/tensor.hpp"
#include "factrace/tokenizer.hpp"

namespace factrace {

// ---------------------------------------------------------------------------
// Hook points

enum class HookKind : std::uint8_t { embed, hidden, attn_out, mlp_out };

std::string_view to_string(HookKind k);
HookKind parse_hook_kind(std::string_view s);

// One (layer, kind, position) site. For `embed` the layer is ignored and
// normalised to -1 so that sites compare equal regardless of what was passed.
struct HookSite {
  int layer = 0;
  HookKind kind = HookKind::hidden;
  std::size_t position = 0;

  static HookSite embed(std::size_t pos) { return {-1, HookKind::embed, pos}; }
  static HookSite at(HookKind kind, int layer, std::size_t pos) {
    return kind == HookKind::embed ? embed(pos) : HookSite{layer, kind, pos};
  }

  friend auto operator<=>(const HookSite&, const HookSite&) = default;
};

// ---------------------------------------------------------------------------
// Interventions

struct Restore {
  std::vector<float> value;
};
struct ReplaceWith {
  std::vector<float> value;
};
struct Zero {};
struct AddNoise {
  float sigma = 0.0f;
  std::uint64_t seed = 0;
};

using InterventionAction = std::variant<Restore, ReplaceWith, Zero, AddNoise>;

// Applied at its site right after the site value is computed and before it
// is consumed. At one site: overwrites (Restore/ReplaceWith, declared order,
// last wins), then Zero, then AddNoise terms are added.
struct Intervention {
  HookSite site;
  InterventionAction action;
};

// ---------------------------------------------------------------------------
// Weights

struct Linear {
  Tensor weight;             // [out, in]
  std::vector<float> bias;   // empty or [out]

  std::size_t out_features() const { return weight.shape.at(0); }
  std::size_t in_features() const { return weight.shape.at(1); }
};

struct NormWeights {
  std::vector<float> gain;
  std::vector<float> bias;  // empty for rmsnorm
};

struct LayerWeights {
  NormWeights attn_norm;
  Linear q, k, v, o;
  NormWeights mlp_norm;
  Linear fc;    // W_fc (up projection)
  Linear gate;  // gated MLP only
  Linear proj;  // W_proj (down projection)
};

struct ModelWeights {
  Tensor token_embedding;     // [V, d]
  Tensor position_embedding;  // [P, d], empty for rotary models
  std::vector<LayerWeights> layers;
  NormWeights final_norm;
  Tensor unembedding;  // [V, d]; empty when tied to token_embedding

  const Tensor& output_matrix() const {
    return unembedding.empty() ? token_embedding : unembedding;
  }
};

// Builds weights from a named-tensor map using the config's family schema.
// Throws MissingTensor / ShapeMismatch naming the offending tensor.
ModelWeights weights_from_tensors(const ModelConfig& config, const TensorMap& tensors);

// Immutable model + tokenizer. Cheap to copy; shareable across threads.
struct ModelBundle {
  ModelConfig config;
  std::shared_ptr<const ModelWeights> weights;
  std::shared_ptr<const Tokenizer> tokenizer;  // may be null for raw-id use

  const Tokenizer& tok() const;
};

struct ModelPaths {
  std::filesystem::path weights;
  std::filesystem::path config;
  std::filesystem::path vocab;   // optional
  std::filesystem::path merges;  // optional
};

ModelBundle load_model(const ModelPaths& paths);
ModelBundle make_bundle(ModelConfig config, const TensorMap& tensors,
                        std::shared_ptr<const Tokenizer> tokenizer = nullptr);

// ---------------------------------------------------------------------------
// Forward pass

struct ForwardOptions {
  // Compute logits only for the final position (other rows stay zero).
  bool last_logits_only = false;
  // Record every site (embed + all layers x kinds x positions).
  bool record_all = false;
};

struct ForwardResult {
  Tensor logits;  // [seq_len, |V|]
  std::map<HookSite, std::vector<float>> recorded;

  const std::vector<float>& at(const HookSite& site) const;
};

ForwardResult forward(const ModelBundle& bundle, std::span<const TokenId> tokens,
                      std::span<const Intervention> interventions = {},
                      std::span<const HookSite> record = {}, const ForwardOptions& options = {});

std::vector<double> next_token_distribution(const ForwardResult& result, std::size_t position);
std::vector<double> softmax(std::span<const float> logits);

// k highest-probability ids, descending; ties by ascending id; clamps to |V|.
std::vector<TokenId> top_k_tokens(std::span<const double> dist, std::size_t k);

}  // namespace factrace
