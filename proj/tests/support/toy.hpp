#pragma once

// Toy fixture: a small BPE vocabulary trained on a synthetic text, seeded
// random transformer weights in the checkpoint layouts, and a synthetic
// world (facts, corpus, stopwords, embedding table) derived from them.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "factrace/dataset.hpp"
#include "factrace/facteval.hpp"
#include "factrace/model.hpp"
#include "factrace/safetensors.hpp"
#include "factrace/tokenizer.hpp"

namespace toy {

using factrace::ModelConfig;
using factrace::TensorMap;

std::string corpus_text();

// Greedy byte-level BPE training; ties broken by the lexicographically
// smallest pair.
factrace::Tokenizer train_bpe(const std::string& text, std::size_t num_merges);
std::string vocab_json(const factrace::Tokenizer& tok);
std::string merges_txt(const factrace::Tokenizer& tok);

std::shared_ptr<const factrace::Tokenizer> shared_tokenizer();

struct ModelSpec {
  factrace::ArchFamily family = factrace::ArchFamily::gpt2;
  int num_layers = 2;
  int d_model = 8;
  int num_heads = 2;
  int num_kv_heads = 0;
  int d_ff = 32;
  int vocab_size = 0;  // 0: tokenizer size
  int max_positions = 64;
  bool qkv_bias = false;
  bool tie_embeddings = true;
  std::uint64_t seed = 1;
  float weight_scale = 0.5f;
  bool zero_mlp = false;   // all MLP output weights and biases zero
  bool zero_attn = false;  // all attention output weights and biases zero
};

ModelConfig make_config(const ModelSpec& spec);
// Tensors named and laid out like the real checkpoints (Conv1D [in, out]
// for gpt2, Linear [out, in] for llama).
TensorMap random_tensors(const ModelSpec& spec, const ModelConfig& config);

struct Model {
  ModelConfig config;
  TensorMap tensors;
  factrace::ModelBundle bundle;
};
Model make_model(const ModelSpec& spec, std::shared_ptr<const factrace::Tokenizer> tok = shared_tokenizer());

// Subjects and templates the synthetic world is built from.
const std::vector<std::string>& subjects();
const std::vector<std::string>& templates();

// Triples whose object is the toy model's own top-1 continuation (so they
// pass filter_correct), followed by `wrong` triples with a mismatching object.
std::vector<factrace::KnowledgeTriple> model_facts(const factrace::ModelBundle& bundle, std::size_t wrong = 4);
std::string counterfact_json(const std::vector<factrace::KnowledgeTriple>& triples);

std::vector<factrace::Document> corpus_documents();
std::string corpus_jsonl(const std::vector<factrace::Document>& docs);
std::string stopwords_txt();

// Unit vectors for every word-like vocabulary token (normalised form), with
// a few deliberately close pairs.
factrace::EmbeddingTable embedding_table(const factrace::Tokenizer& tok, std::size_t dim = 16,
                                         std::uint64_t seed = 7);

// Writes a complete fixture directory and a run config pointing at it.
// Returns the path of the run config.
std::filesystem::path write_fixture(const std::filesystem::path& dir, std::uint64_t seed = 1);

}  // namespace toy
