#include "toy.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "factrace/config.hpp"
#include "factrace/report.hpp"

namespace toy {

using factrace::Tensor;
using nlohmann::json;

namespace {

struct Entity {
  std::string subject;
  std::vector<std::string> related;
};

const std::vector<Entity>& entities() {
  static const std::vector<Entity> e = {
      {"Paris", {"Seine", "Louvre", "France", "croissant", "boulevard"}},
      {"Danube River", {"Vienna", "Budapest", "barge", "delta", "Europe"}},
      {"Mount Fuji", {"Japan", "volcano", "snow", "pilgrim", "summit"}},
      {"Toyota Corolla", {"Japan", "sedan", "engine", "Toyota", "hybrid"}},
      {"Marie Curie", {"radium", "physics", "Warsaw", "Nobel", "chemistry"}},
      {"Amazon Rainforest", {"Brazil", "jaguar", "canopy", "river", "parrot"}},
      {"Great Wall", {"China", "dynasty", "brick", "tower", "border"}},
      {"Sahara Desert", {"dune", "camel", "Africa", "oasis", "sand"}},
      {"Eiffel Tower", {"Paris", "iron", "France", "tourist", "lattice"}},
      {"Lake Baikal", {"Siberia", "Russia", "seal", "ice", "deepest"}},
      {"Ludwig van Beethoven", {"symphony", "piano", "Bonn", "Vienna", "sonata"}},
      {"William Shakespeare", {"Hamlet", "theatre", "England", "sonnet", "playwright"}},
      {"Tokyo", {"Japan", "subway", "sushi", "Shibuya", "capital"}},
      {"Berlin", {"Germany", "wall", "Spree", "capital", "museum"}},
      {"Nile", {"Egypt", "Cairo", "delta", "river", "Africa"}},
      {"Andes Mountains", {"Chile", "Peru", "condor", "glacier", "llama"}},
  };
  return e;
}

const std::vector<std::string>& fillers() {
  static const std::vector<std::string> f = {
      "The weather was mild and the streets were quiet in the morning.",
      "Many people enjoy reading about history and travel in the evening.",
      "A new report describes the economy and the growth of trade in the region.",
      "Students learn mathematics, science and languages at the school.",
  };
  return f;
}

std::string paragraph(const Entity& e, int variant) {
  const auto& r = e.related;
  std::ostringstream s;
  if (variant == 0) {
    s << e.subject << " is known for " << r[0] << " and " << r[1] << ". Many visitors describe " << e.subject
      << " through its " << r[2] << " and the " << r[3] << ". The " << r[4] << " is part of the story of "
      << e.subject << ".";
  } else {
    s << "In the history of " << e.subject << ", the " << r[1] << " and the " << r[3]
      << " were important. Writers often mention " << r[0] << " when they talk about " << e.subject << ".";
  }
  return s.str();
}

bool word_like(const std::string& bytes) {
  if (bytes.size() < 3 || bytes[0] != ' ') return false;
  return std::all_of(bytes.begin() + 1, bytes.end(), [](unsigned char c) { return std::isalpha(c); });
}

}  // namespace

const std::vector<std::string>& subjects() {
  static const std::vector<std::string> s = [] {
    std::vector<std::string> out;
    for (const auto& e : entities()) out.push_back(e.subject);
    return out;
  }();
  return s;
}

const std::vector<std::string>& templates() {
  static const std::vector<std::string> t = {
      "{} is located in",
      "{} is famous for the",
      "The home country of {} is",
      "People often associate {} with",
      "The best known feature of {} is the",
      "In the story, {} was visited by",
  };
  return t;
}

std::string corpus_text() {
  std::string text;
  for (const auto& e : entities()) {
    for (int v = 0; v < 2; ++v) text += paragraph(e, v) + "\n";
  }
  for (const auto& f : fillers()) text += f + "\n";
  for (const auto& t : templates()) {
    for (const auto& s : subjects()) text += factrace::fill_template(t, s) + " ";
  }
  return text;
}

factrace::Tokenizer train_bpe(const std::string& text, std::size_t num_merges) {
  std::map<std::vector<std::string>, std::size_t> words;
  const auto& table = factrace::byte_to_unicode_table();
  for (auto piece : factrace::Tokenizer::pretokenize(text)) {
    std::vector<std::string> sym;
    for (unsigned char b : piece) sym.push_back(table[b]);
    ++words[sym];
  }
  std::vector<std::pair<std::string, std::string>> merges;
  for (std::size_t m = 0; m < num_merges; ++m) {
    std::map<std::pair<std::string, std::string>, std::size_t> pairs;
    for (const auto& [w, n] : words) {
      for (std::size_t i = 0; i + 1 < w.size(); ++i) pairs[{w[i], w[i + 1]}] += n;
    }
    if (pairs.empty()) break;
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    if (best->second < 2) break;
    const auto [a, b] = best->first;
    merges.emplace_back(a, b);
    std::map<std::vector<std::string>, std::size_t> next;
    for (const auto& [w, n] : words) {
      std::vector<std::string> out;
      for (std::size_t i = 0; i < w.size();) {
        if (i + 1 < w.size() && w[i] == a && w[i + 1] == b) {
          out.push_back(a + b);
          i += 2;
        } else {
          out.push_back(w[i++]);
        }
      }
      next[out] += n;
    }
    words = std::move(next);
  }
  std::unordered_map<std::string, factrace::TokenId> vocab;
  for (const auto& s : table) vocab.emplace(s, static_cast<factrace::TokenId>(vocab.size()));
  for (const auto& [a, b] : merges) vocab.emplace(a + b, static_cast<factrace::TokenId>(vocab.size()));
  return factrace::Tokenizer(std::move(vocab), std::move(merges));
}

std::string vocab_json(const factrace::Tokenizer& tok) {
  json j = json::object();
  for (std::size_t i = 0; i < tok.vocab_size(); ++i) j[tok.token_string(static_cast<factrace::TokenId>(i))] = i;
  return j.dump() + "\n";
}

std::string merges_txt(const factrace::Tokenizer& tok) {
  std::string out = "#version: 0.2\n";
  for (const auto& [a, b] : tok.merges()) out += a + " " + b + "\n";
  return out;
}

std::shared_ptr<const factrace::Tokenizer> shared_tokenizer() {
  static const auto tok = std::make_shared<const factrace::Tokenizer>(train_bpe(corpus_text(), 320));
  return tok;
}

ModelConfig make_config(const ModelSpec& spec) {
  ModelConfig c;
  c.family = spec.family;
  c.num_layers = spec.num_layers;
  c.d_model = spec.d_model;
  c.num_heads = spec.num_heads;
  c.num_kv_heads = spec.num_kv_heads;
  c.d_ff = spec.d_ff;
  c.vocab_size = spec.vocab_size > 0 ? spec.vocab_size : static_cast<int>(shared_tokenizer()->vocab_size());
  c.max_positions = spec.max_positions;
  c.qkv_bias = spec.qkv_bias;
  c.tie_embeddings = spec.tie_embeddings;
  if (spec.family == factrace::ArchFamily::gpt2) {
    c.activation = factrace::Activation::gelu;
    c.norm_kind = factrace::NormKind::layernorm;
    c.positional_kind = factrace::PositionalKind::learned_absolute;
    c.gated_mlp = false;
    c.qkv_bias = true;
  } else {
    c.activation = factrace::Activation::silu;
    c.norm_kind = factrace::NormKind::rmsnorm;
    c.positional_kind = factrace::PositionalKind::rotary;
    c.gated_mlp = true;
    c.norm_eps = 1e-6f;
  }
  c.validate();
  return c;
}

TensorMap random_tensors(const ModelSpec& spec, const ModelConfig& c) {
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto randn = [&](std::vector<std::size_t> shape, float scale) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = scale * normal(rng);
    return t;
  };
  auto gain = [&](std::size_t n) {
    Tensor t({n});
    for (auto& v : t.data) v = 1.0f + 0.1f * normal(rng);
    return t;
  };
  const std::size_t d = c.d_model, ff = c.d_ff, V = c.vocab_size, P = c.max_positions;
  const float s = spec.weight_scale;
  TensorMap m;

  // Word-like tokens get larger embeddings so they dominate the toy model's
  // predictions.
  Tensor emb = randn({V, d}, s);
  const auto tok = shared_tokenizer();
  for (std::size_t v = 0; v < V; ++v) {
    const bool word = v < tok->vocab_size() && word_like(tok->token_bytes(static_cast<factrace::TokenId>(v)));
    const float f = word ? 2.0f : 0.4f;
    for (auto& x : emb.row(v)) x *= f;
  }

  if (c.family == factrace::ArchFamily::gpt2) {
    m["wte.weight"] = std::move(emb);
    m["wpe.weight"] = randn({P, d}, 0.2f * s);
    for (int l = 0; l < c.num_layers; ++l) {
      const std::string p = "h." + std::to_string(l) + ".";
      m[p + "ln_1.weight"] = gain(d);
      m[p + "ln_1.bias"] = randn({d}, 0.1f);
      m[p + "attn.c_attn.weight"] = randn({d, 3 * d}, s);
      m[p + "attn.c_attn.bias"] = randn({3 * d}, 0.1f);
      m[p + "attn.c_proj.weight"] = randn({d, d}, spec.zero_attn ? 0.0f : s);
      m[p + "attn.c_proj.bias"] = randn({d}, spec.zero_attn ? 0.0f : 0.1f);
      m[p + "ln_2.weight"] = gain(d);
      m[p + "ln_2.bias"] = randn({d}, 0.1f);
      m[p + "mlp.c_fc.weight"] = randn({d, ff}, s);
      m[p + "mlp.c_fc.bias"] = randn({ff}, 0.1f);
      m[p + "mlp.c_proj.weight"] = randn({ff, d}, spec.zero_mlp ? 0.0f : s);
      m[p + "mlp.c_proj.bias"] = randn({d}, spec.zero_mlp ? 0.0f : 0.1f);
    }
    m["ln_f.weight"] = gain(d);
    m["ln_f.bias"] = randn({d}, 0.1f);
  } else {
    const std::size_t hd = c.head_dim();
    const std::size_t qo = hd * c.num_heads, kvo = hd * c.kv_heads();
    m["model.embed_tokens.weight"] = std::move(emb);
    for (int l = 0; l < c.num_layers; ++l) {
      const std::string p = "model.layers." + std::to_string(l) + ".";
      m[p + "input_layernorm.weight"] = gain(d);
      m[p + "self_attn.q_proj.weight"] = randn({qo, d}, s);
      m[p + "self_attn.k_proj.weight"] = randn({kvo, d}, s);
      m[p + "self_attn.v_proj.weight"] = randn({kvo, d}, s);
      if (c.qkv_bias) {
        m[p + "self_attn.q_proj.bias"] = randn({qo}, 0.1f);
        m[p + "self_attn.k_proj.bias"] = randn({kvo}, 0.1f);
        m[p + "self_attn.v_proj.bias"] = randn({kvo}, 0.1f);
      }
      m[p + "self_attn.o_proj.weight"] = randn({d, qo}, spec.zero_attn ? 0.0f : s);
      m[p + "post_attention_layernorm.weight"] = gain(d);
      m[p + "mlp.gate_proj.weight"] = randn({ff, d}, s);
      m[p + "mlp.up_proj.weight"] = randn({ff, d}, s);
      m[p + "mlp.down_proj.weight"] = randn({d, ff}, spec.zero_mlp ? 0.0f : s);
    }
    m["model.norm.weight"] = gain(d);
  }
  if (!c.tie_embeddings) m["lm_head.weight"] = randn({V, d}, s);
  return m;
}

Model make_model(const ModelSpec& spec, std::shared_ptr<const factrace::Tokenizer> tok) {
  Model out{make_config(spec), {}, {}};
  out.tensors = random_tensors(spec, out.config);
  out.bundle = factrace::make_bundle(out.config, out.tensors, std::move(tok));
  return out;
}

std::vector<factrace::KnowledgeTriple> model_facts(const factrace::ModelBundle& bundle, std::size_t wrong) {
  const auto& tok = bundle.tok();
  std::vector<factrace::KnowledgeTriple> good, bad;
  std::size_t id = 0;
  for (const auto& t : templates()) {
    for (const auto& s : subjects()) {
      factrace::KnowledgeTriple kt;
      kt.case_id = "toy-" + std::to_string(id++);
      kt.subject = s;
      kt.relation_template = t;
      const auto tokens = tok.encode(kt.prompt());
      factrace::ForwardOptions opts;
      opts.last_logits_only = true;
      const auto run = factrace::forward(bundle, tokens, {}, {}, opts);
      const auto top = factrace::top_k_tokens(factrace::next_token_distribution(run, tokens.size() - 1), 2);
      for (std::size_t r = 0; r < top.size(); ++r) {
        const auto bytes = tok.token_bytes(top[r]);
        if (!word_like(bytes)) continue;
        const auto ids = tok.encode(bytes);
        if (ids.empty() || ids.front() != top[r]) continue;
        kt.object = bytes.substr(1);
        kt.object_token_ids = ids;
        if (r == 0) {
          good.push_back(kt);
        } else if (bad.size() < wrong) {
          bad.push_back(kt);
        }
        break;
      }
    }
  }
  good.insert(good.end(), bad.begin(), bad.end());
  return good;
}

std::string counterfact_json(const std::vector<factrace::KnowledgeTriple>& triples) {
  json arr = json::array();
  for (const auto& t : triples) {
    json rec;
    rec["case_id"] = t.case_id;
    rec["requested_rewrite"] = {{"subject", t.subject},
                                {"prompt", t.relation_template},
                                {"target_true", {{"str", t.object}}},
                                {"target_new", {{"str", "nothing"}}}};
    arr.push_back(rec);
  }
  return arr.dump(1) + "\n";
}

std::vector<factrace::Document> corpus_documents() {
  std::vector<factrace::Document> docs;
  std::uint64_t id = 100;
  for (const auto& e : entities()) {
    for (int v = 0; v < 2; ++v) docs.push_back({id++, e.subject, paragraph(e, v)});
  }
  for (const auto& f : fillers()) docs.push_back({id++, "", f});
  return docs;
}

std::string corpus_jsonl(const std::vector<factrace::Document>& docs) {
  std::string out;
  for (const auto& d : docs) out += json{{"id", d.id}, {"subject", d.subject}, {"text", d.text}}.dump() + "\n";
  return out;
}

std::string stopwords_txt() {
  return "# toy stopword list\nthe\na\nan\nand\nis\nof\nin\nits\nto\nwere\nwas\nwhen\nthey\nabout\nthrough\n"
         "part\nmany\noften\n";
}

factrace::EmbeddingTable embedding_table(const factrace::Tokenizer& tok, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::map<std::string, std::vector<float>> rows;
  for (std::size_t i = 0; i < tok.vocab_size(); ++i) {
    const auto norm = factrace::normalize_token(tok.token_bytes(static_cast<factrace::TokenId>(i)));
    if (norm.empty() || !std::any_of(norm.begin(), norm.end(), [](unsigned char c) { return std::isalnum(c); })) {
      continue;
    }
    if (rows.contains(norm)) continue;
    std::vector<float> v(dim);
    for (auto& x : v) x = normal(rng);
    rows.emplace(norm, std::move(v));
  }
  // Close pairs: related words of each entity echo its first related word.
  for (const auto& e : entities()) {
    const auto anchor = factrace::normalize_token(e.related[0]);
    if (!rows.contains(anchor)) continue;
    for (std::size_t k = 1; k < 3; ++k) {
      const auto w = factrace::normalize_token(e.related[k]);
      if (!rows.contains(w)) continue;
      auto& v = rows[w];
      const auto& a = rows[anchor];
      for (std::size_t i = 0; i < dim; ++i) v[i] = a[i] + 0.2f * normal(rng);
    }
  }
  factrace::EmbeddingTable table(dim);
  for (const auto& [w, v] : rows) table.add(w, v);
  return table;
}

std::filesystem::path write_fixture(const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  ModelSpec spec;
  spec.seed = seed;
  const auto model = make_model(spec);
  const auto tok = shared_tokenizer();
  factrace::write_safetensors(dir / "model.safetensors", model.tensors);
  factrace::write_text_file(dir / "config.json", factrace::to_json(model.config));
  factrace::write_text_file(dir / "vocab.json", vocab_json(*tok));
  factrace::write_text_file(dir / "merges.txt", merges_txt(*tok));
  factrace::write_text_file(dir / "counterfact.json", counterfact_json(model_facts(model.bundle)));
  factrace::write_text_file(dir / "corpus.jsonl", corpus_jsonl(corpus_documents()));
  factrace::write_text_file(dir / "stopwords.txt", stopwords_txt());
  embedding_table(*tok).save(dir / "embeddings.bin");
  json run = {
      {"model",
       {{"weights", "model.safetensors"}, {"config", "config.json"}, {"vocab", "vocab.json"}, {"merges", "merges.txt"}}},
      {"dataset", "counterfact.json"},
      {"corpus", "corpus.jsonl"},
      {"embeddings", "embeddings.bin"},
      {"stopwords", "stopwords.txt"},
      {"n_cases", 6},
      {"noise_samples", 3},
      {"window", 1},
      {"tau", 0.7},
      {"k", 10},
      {"seed", seed},
      {"top_m", 5},
      {"df_cutoff", 0.5},
  };
  const auto path = dir / "run.json";
  factrace::write_text_file(path, run.dump(2) + "\n");
  return path;
}

}  // namespace toy
