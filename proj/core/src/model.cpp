#include "factrace/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "factrace/error.hpp"
#include "factrace/noise.hpp"

namespace factrace {

std::string_view to_string(HookKind k) {
  switch (k) {
    case HookKind::embed: return "embed";
    case HookKind::hidden: return "hidden";
    case HookKind::attn_out: return "attn_out";
    case HookKind::mlp_out: return "mlp_out";
  }
  return "?";
}

HookKind parse_hook_kind(std::string_view s) {
  if (s == "embed") return HookKind::embed;
  if (s == "hidden") return HookKind::hidden;
  if (s == "attn_out" || s == "attn") return HookKind::attn_out;
  if (s == "mlp_out" || s == "mlp") return HookKind::mlp_out;
  throw Error(ErrorKind::InvalidArgument, "unknown hook kind '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Weight loading

namespace {

class TensorSource {
 public:
  TensorSource(const TensorMap& tensors, std::string prefix) : tensors_(tensors), prefix_(std::move(prefix)) {}

  bool has(const std::string& name) const { return tensors_.contains(prefix_ + name); }

  const Tensor& get(const std::string& name, std::vector<std::size_t> shape) const {
    auto it = tensors_.find(prefix_ + name);
    if (it == tensors_.end()) throw Error(ErrorKind::MissingTensor, "missing tensor '" + prefix_ + name + "'");
    if (it->second.shape != shape) {
      throw Error(ErrorKind::ShapeMismatch, "tensor '" + prefix_ + name + "' has shape " +
                                                it->second.shape_string() + ", expected " +
                                                Tensor(shape).shape_string());
    }
    return it->second;
  }

  std::vector<float> vec(const std::string& name, std::size_t n) const { return get(name, {n}).data; }

 private:
  const TensorMap& tensors_;
  std::string prefix_;
};

Tensor transpose(const Tensor& t) {
  const std::size_t r = t.shape[0], c = t.shape[1];
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = t.data[i * c + j];
  return out;
}

// Columns [begin, begin + width) of a Conv1D [in, out] matrix, as Linear [width, in].
Tensor conv1d_slice(const Tensor& t, std::size_t begin, std::size_t width) {
  const std::size_t in = t.shape[0], out_all = t.shape[1];
  Tensor out({width, in});
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < width; ++j) out.data[j * in + i] = t.data[i * out_all + begin + j];
  return out;
}

ModelWeights gpt2_weights(const ModelConfig& c, const TensorMap& tensors) {
  const std::string prefix = tensors.contains("wte.weight") ? "" : "transformer.";
  const TensorSource src(tensors, prefix);
  const std::size_t d = c.d_model, V = c.vocab_size, P = c.max_positions, ff = c.d_ff;
  ModelWeights w;
  w.token_embedding = src.get("wte.weight", {V, d});
  w.position_embedding = src.get("wpe.weight", {P, d});
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.attn_norm = {src.vec(p + "ln_1.weight", d), src.vec(p + "ln_1.bias", d)};
    const Tensor& qkv = src.get(p + "attn.c_attn.weight", {d, 3 * d});
    const auto qkv_b = src.vec(p + "attn.c_attn.bias", 3 * d);
    lw.q = {conv1d_slice(qkv, 0, d), {qkv_b.begin(), qkv_b.begin() + d}};
    lw.k = {conv1d_slice(qkv, d, d), {qkv_b.begin() + d, qkv_b.begin() + 2 * d}};
    lw.v = {conv1d_slice(qkv, 2 * d, d), {qkv_b.begin() + 2 * d, qkv_b.end()}};
    lw.o = {transpose(src.get(p + "attn.c_proj.weight", {d, d})), src.vec(p + "attn.c_proj.bias", d)};
    lw.mlp_norm = {src.vec(p + "ln_2.weight", d), src.vec(p + "ln_2.bias", d)};
    lw.fc = {transpose(src.get(p + "mlp.c_fc.weight", {d, ff})), src.vec(p + "mlp.c_fc.bias", ff)};
    lw.proj = {transpose(src.get(p + "mlp.c_proj.weight", {ff, d})), src.vec(p + "mlp.c_proj.bias", d)};
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = {src.vec("ln_f.weight", d), src.vec("ln_f.bias", d)};
  if (!c.tie_embeddings) {
    w.unembedding = TensorSource(tensors, "").get("lm_head.weight", {V, d});
  }
  return w;
}

ModelWeights llama_weights(const ModelConfig& c, const TensorMap& tensors) {
  const TensorSource src(tensors, "");
  const std::size_t d = c.d_model, V = c.vocab_size, ff = c.d_ff;
  const std::size_t hd = c.head_dim();
  const std::size_t q_out = hd * c.num_heads, kv_out = hd * c.kv_heads();
  ModelWeights w;
  w.token_embedding = src.get("model.embed_tokens.weight", {V, d});
  for (int l = 0; l < c.num_layers; ++l) {
    const std::string p = "model.layers." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.attn_norm = {src.vec(p + "input_layernorm.weight", d), {}};
    auto linear = [&](const std::string& name, std::size_t out, std::size_t in, bool bias) {
      Linear lin{src.get(name + ".weight", {out, in}), {}};
      if (bias) lin.bias = src.vec(name + ".bias", out);
      return lin;
    };
    lw.q = linear(p + "self_attn.q_proj", q_out, d, c.qkv_bias);
    lw.k = linear(p + "self_attn.k_proj", kv_out, d, c.qkv_bias);
    lw.v = linear(p + "self_attn.v_proj", kv_out, d, c.qkv_bias);
    lw.o = linear(p + "self_attn.o_proj", d, q_out, false);
    lw.mlp_norm = {src.vec(p + "post_attention_layernorm.weight", d), {}};
    if (c.gated_mlp) lw.gate = linear(p + "mlp.gate_proj", ff, d, false);
    lw.fc = linear(p + "mlp.up_proj", ff, d, false);
    lw.proj = linear(p + "mlp.down_proj", d, ff, false);
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = {src.vec("model.norm.weight", d), {}};
  if (!c.tie_embeddings) w.unembedding = src.get("lm_head.weight", {V, d});
  return w;
}

}  // namespace

ModelWeights weights_from_tensors(const ModelConfig& config, const TensorMap& tensors) {
  config.validate();
  return config.family == ArchFamily::gpt2 ? gpt2_weights(config, tensors) : llama_weights(config, tensors);
}

const Tokenizer& ModelBundle::tok() const {
  if (!tokenizer) throw Error(ErrorKind::MissingPrerequisite, "model bundle has no tokenizer");
  return *tokenizer;
}

ModelBundle make_bundle(ModelConfig config, const TensorMap& tensors, std::shared_ptr<const Tokenizer> tokenizer) {
  auto weights = std::make_shared<const ModelWeights>(weights_from_tensors(config, tensors));
  if (tokenizer && tokenizer->vocab_size() > static_cast<std::size_t>(config.vocab_size)) {
    throw Error(ErrorKind::InvalidConfig, "tokenizer vocabulary (" + std::to_string(tokenizer->vocab_size()) +
                                              ") exceeds model vocab_size (" + std::to_string(config.vocab_size) + ")");
  }
  return ModelBundle{std::move(config), std::move(weights), std::move(tokenizer)};
}

ModelBundle load_model(const ModelPaths& paths) {
  for (const auto* p : {&paths.weights, &paths.config}) {
    if (!std::filesystem::exists(*p)) throw Error(ErrorKind::Io, "file not found: " + p->string());
  }
  auto config = load_model_config(paths.config);
  std::shared_ptr<const Tokenizer> tok;
  if (!paths.vocab.empty() || !paths.merges.empty()) {
    tok = std::make_shared<const Tokenizer>(Tokenizer::from_files(paths.vocab, paths.merges));
  }
  return make_bundle(std::move(config), read_safetensors(paths.weights), std::move(tok));
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

// Fixed reduction order: eight interleaved lanes, combined pairwise, then
// the tail left to right.
float dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  float s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// y[t] = W x[t] + b for rows x[t] of length in.
std::vector<float> apply_linear(const Linear& lin, const std::vector<float>& x, std::size_t rows) {
  const std::size_t in = lin.in_features(), out = lin.out_features();
  std::vector<float> y(rows * out);
  for (std::size_t t = 0; t < rows; ++t) {
    const float* xt = x.data() + t * in;
    float* yt = y.data() + t * out;
    for (std::size_t o = 0; o < out; ++o) {
      float v = dot(lin.weight.data.data() + o * in, xt, in);
      if (!lin.bias.empty()) v += lin.bias[o];
      yt[o] = v;
    }
  }
  return y;
}

std::vector<float> apply_norm(const ModelConfig& c, const NormWeights& nw, const std::vector<float>& x,
                              std::size_t rows) {
  const std::size_t d = c.d_model;
  std::vector<float> y(rows * d);
  for (std::size_t t = 0; t < rows; ++t) {
    const float* xt = x.data() + t * d;
    float* yt = y.data() + t * d;
    if (c.norm_kind == NormKind::layernorm) {
      float sum = 0.0f;
      for (std::size_t i = 0; i < d; ++i) sum += xt[i];
      const float mean = sum / static_cast<float>(d);
      float var = 0.0f;
      for (std::size_t i = 0; i < d; ++i) var += (xt[i] - mean) * (xt[i] - mean);
      var /= static_cast<float>(d);
      const float inv = 1.0f / std::sqrt(var + c.norm_eps);
      for (std::size_t i = 0; i < d; ++i) yt[i] = (xt[i] - mean) * inv * nw.gain[i] + nw.bias[i];
    } else {
      float ss = 0.0f;
      for (std::size_t i = 0; i < d; ++i) ss += xt[i] * xt[i];
      const float inv = 1.0f / std::sqrt(ss / static_cast<float>(d) + c.norm_eps);
      for (std::size_t i = 0; i < d; ++i) yt[i] = (xt[i] * inv) * nw.gain[i];
    }
  }
  return y;
}

float activate(Activation a, float x) {
  if (a == Activation::gelu) {
    constexpr float k = 0.7978845608028654f;  // sqrt(2 / pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
  }
  return x / (1.0f + std::exp(-x));
}

void apply_rotary(const ModelConfig& c, std::vector<float>& x, std::size_t rows, int heads) {
  const std::size_t hd = c.head_dim(), half = hd / 2;
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double inv_freq = std::pow(static_cast<double>(c.rope_theta), -2.0 * double(i) / double(hd));
      const double angle = double(t) * inv_freq;
      const float cs = static_cast<float>(std::cos(angle));
      const float sn = static_cast<float>(std::sin(angle));
      for (int h = 0; h < heads; ++h) {
        float* v = x.data() + (t * heads + h) * hd;
        const float a = v[i], b = v[i + half];
        v[i] = a * cs - b * sn;
        v[i + half] = b * cs + a * sn;
      }
    }
  }
}

// Causal multi-head (grouped-query) attention over positions <= t.
std::vector<float> attend(const ModelConfig& c, const std::vector<float>& q, const std::vector<float>& k,
                          const std::vector<float>& v, std::size_t rows) {
  const int nh = c.num_heads, nkv = c.kv_heads();
  const std::size_t hd = c.head_dim();
  const int group = nh / nkv;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> ctx(rows * nh * hd, 0.0f);
  std::vector<float> scores(rows);
  for (int h = 0; h < nh; ++h) {
    const int g = h / group;
    for (std::size_t t = 0; t < rows; ++t) {
      const float* qt = q.data() + (t * nh + h) * hd;
      float mx = -INFINITY;
      for (std::size_t j = 0; j <= t; ++j) {
        scores[j] = dot(qt, k.data() + (j * nkv + g) * hd, hd) * scale;
        mx = std::max(mx, scores[j]);
      }
      float denom = 0.0f;
      for (std::size_t j = 0; j <= t; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        denom += scores[j];
      }
      float* out = ctx.data() + (t * nh + h) * hd;
      for (std::size_t j = 0; j <= t; ++j) {
        const float p = scores[j] / denom;
        const float* vj = v.data() + (j * nkv + g) * hd;
        for (std::size_t i = 0; i < hd; ++i) out[i] += p * vj[i];
      }
    }
  }
  return ctx;
}

// Interventions and recording requests, indexed by site slot.
class HookPlan {
 public:
  HookPlan(const ModelConfig& c, std::size_t rows, std::span<const Intervention> interventions,
           std::span<const HookSite> record, bool record_all)
      : layers_(c.num_layers), rows_(rows), d_(c.d_model), interventions_(interventions),
        by_slot_((1 + 3 * layers_) * rows), record_(by_slot_.size(), record_all) {
    for (std::size_t i = 0; i < interventions.size(); ++i) {
      const auto& iv = interventions[i];
      validate(iv.site);
      if (std::holds_alternative<AddNoise>(iv.action) && iv.site.kind != HookKind::embed) {
        throw Error(ErrorKind::InvalidArgument, "AddNoise is only legal at embed sites");
      }
      const std::vector<float>* value = nullptr;
      if (auto* r = std::get_if<Restore>(&iv.action)) value = &r->value;
      if (auto* r = std::get_if<ReplaceWith>(&iv.action)) value = &r->value;
      if (value && value->size() != d_) {
        throw Error(ErrorKind::InvalidArgument, "intervention value length " + std::to_string(value->size()) +
                                                    " != d_model " + std::to_string(d_));
      }
      by_slot_[slot(iv.site)].push_back(i);
    }
    for (const auto& s : record) {
      validate(s);
      record_[slot(s)] = true;
    }
  }

  std::size_t slot(const HookSite& s) const {
    if (s.kind == HookKind::embed) return s.position;
    const std::size_t k = static_cast<std::size_t>(s.kind) - 1;
    return rows_ + (k * layers_ + static_cast<std::size_t>(s.layer)) * rows_ + s.position;
  }

  // Applies interventions at (kind, layer) to every row of `x`, then records.
  void visit(HookKind kind, int layer, std::vector<float>& x, ForwardResult& result) const {
    for (std::size_t t = 0; t < rows_; ++t) {
      const HookSite site = HookSite::at(kind, layer, t);
      const std::size_t sl = slot(site);
      std::span<float> value(x.data() + t * d_, d_);
      if (!by_slot_[sl].empty()) apply(by_slot_[sl], value, t);
      if (record_[sl]) result.recorded[site] = std::vector<float>(value.begin(), value.end());
    }
  }

 private:
  void validate(const HookSite& s) const {
    if (s.position >= rows_) {
      throw Error(ErrorKind::SiteOutOfRange, "site position " + std::to_string(s.position) +
                                                 " beyond sequence length " + std::to_string(rows_));
    }
    if (s.kind != HookKind::embed && (s.layer < 0 || static_cast<std::size_t>(s.layer) >= layers_)) {
      throw Error(ErrorKind::SiteOutOfRange, "site layer " + std::to_string(s.layer) + " outside 0.." +
                                                 std::to_string(layers_ - 1));
    }
  }

  void apply(const std::vector<std::size_t>& idx, std::span<float> value, std::size_t position) const {
    for (auto i : idx) {
      const auto& a = interventions_[i].action;
      if (auto* r = std::get_if<Restore>(&a)) std::copy(r->value.begin(), r->value.end(), value.begin());
      if (auto* r = std::get_if<ReplaceWith>(&a)) std::copy(r->value.begin(), r->value.end(), value.begin());
    }
    for (auto i : idx) {
      if (std::holds_alternative<Zero>(interventions_[i].action)) std::fill(value.begin(), value.end(), 0.0f);
    }
    for (auto i : idx) {
      if (auto* n = std::get_if<AddNoise>(&interventions_[i].action)) {
        const auto noise = gaussian_noise(n->sigma, n->seed, position, d_);
        for (std::size_t c = 0; c < d_; ++c) value[c] += noise[c];
      }
    }
  }

  std::size_t layers_, rows_, d_;
  std::span<const Intervention> interventions_;
  std::vector<std::vector<std::size_t>> by_slot_;
  std::vector<bool> record_;
};

}  // namespace

const std::vector<float>& ForwardResult::at(const HookSite& site) const {
  auto it = recorded.find(site);
  if (it == recorded.end()) {
    throw Error(ErrorKind::SiteOutOfRange, "site (" + std::string(to_string(site.kind)) + ", layer " +
                                               std::to_string(site.layer) + ", position " +
                                               std::to_string(site.position) + ") was not recorded");
  }
  return it->second;
}

ForwardResult forward(const ModelBundle& bundle, std::span<const TokenId> tokens,
                      std::span<const Intervention> interventions, std::span<const HookSite> record,
                      const ForwardOptions& options) {
  const ModelConfig& c = bundle.config;
  const ModelWeights& w = *bundle.weights;
  const std::size_t T = tokens.size(), d = c.d_model;
  if (T == 0) throw Error(ErrorKind::InvalidArgument, "empty token sequence");
  if (T > static_cast<std::size_t>(c.max_positions)) {
    throw Error(ErrorKind::TokenOutOfRange, "sequence length " + std::to_string(T) + " exceeds max_positions " +
                                                std::to_string(c.max_positions));
  }
  for (auto id : tokens) {
    if (id < 0 || id >= c.vocab_size) {
      throw Error(ErrorKind::TokenOutOfRange, "token id " + std::to_string(id) + " outside vocabulary of size " +
                                                  std::to_string(c.vocab_size));
    }
  }
  const HookPlan plan(c, T, interventions, record, options.record_all);
  ForwardResult result;

  // h_emb = emb(x) + pos(i)
  std::vector<float> h(T * d);
  for (std::size_t t = 0; t < T; ++t) {
    const auto e = w.token_embedding.row(static_cast<std::size_t>(tokens[t]));
    for (std::size_t i = 0; i < d; ++i) h[t * d + i] = e[i];
    if (c.positional_kind == PositionalKind::learned_absolute) {
      const auto p = w.position_embedding.row(t);
      for (std::size_t i = 0; i < d; ++i) h[t * d + i] += p[i];
    }
  }
  plan.visit(HookKind::embed, -1, h, result);

  const int nh = c.num_heads, nkv = c.kv_heads();
  for (int l = 0; l < c.num_layers; ++l) {
    const LayerWeights& lw = w.layers[l];
    const auto x = apply_norm(c, lw.attn_norm, h, T);
    auto q = apply_linear(lw.q, x, T);
    auto k = apply_linear(lw.k, x, T);
    const auto v = apply_linear(lw.v, x, T);
    if (c.positional_kind == PositionalKind::rotary) {
      apply_rotary(c, q, T, nh);
      apply_rotary(c, k, T, nkv);
    }
    const auto ctx = attend(c, q, k, v, T);
    auto a = apply_linear(lw.o, ctx, T);
    plan.visit(HookKind::attn_out, l, a, result);

    std::vector<float> mid(T * d);
    for (std::size_t i = 0; i < T * d; ++i) mid[i] = h[i] + a[i];
    const auto y = apply_norm(c, lw.mlp_norm, mid, T);
    auto up = apply_linear(lw.fc, y, T);
    if (c.gated_mlp) {
      const auto gate = apply_linear(lw.gate, y, T);
      for (std::size_t i = 0; i < up.size(); ++i) up[i] = activate(c.activation, gate[i]) * up[i];
    } else {
      for (auto& u : up) u = activate(c.activation, u);
    }
    auto m = apply_linear(lw.proj, up, T);
    plan.visit(HookKind::mlp_out, l, m, result);

    for (std::size_t i = 0; i < T * d; ++i) h[i] = mid[i] + m[i];
    plan.visit(HookKind::hidden, l, h, result);
  }

  const auto hf = apply_norm(c, w.final_norm, h, T);
  const Tensor& U = w.output_matrix();
  const std::size_t V = c.vocab_size;
  result.logits = Tensor({T, V});
  for (std::size_t t = options.last_logits_only ? T - 1 : 0; t < T; ++t) {
    const float* ht = hf.data() + t * d;
    float* out = result.logits.data.data() + t * V;
    for (std::size_t o = 0; o < V; ++o) out[o] = dot(U.data.data() + o * d, ht, d);
  }
  return result;
}

std::vector<double> softmax(std::span<const float> logits) {
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (auto& x : p) x /= sum;
  return p;
}

std::vector<double> next_token_distribution(const ForwardResult& result, std::size_t position) {
  if (result.logits.rank() != 2 || position >= result.logits.shape[0]) {
    throw Error(ErrorKind::SiteOutOfRange, "position " + std::to_string(position) + " outside the logits rows");
  }
  return softmax(result.logits.row(position));
}

std::vector<TokenId> top_k_tokens(std::span<const double> dist, std::size_t k) {
  std::vector<TokenId> ids(dist.size());
  std::iota(ids.begin(), ids.end(), 0);
  const std::size_t n = std::min(k, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end(),
                    [&](TokenId a, TokenId b) { return dist[a] != dist[b] ? dist[a] > dist[b] : a < b; });
  ids.resize(n);
  return ids;
}

}  // namespace factrace
