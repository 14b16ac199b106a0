#include "factrace/facteval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include <nlohmann/json.hpp>

#include "factrace/error.hpp"
#include "factrace/parallel.hpp"
#include "factrace/report.hpp"
#include "utf8.hpp"

namespace factrace {

std::vector<std::string> bm25_terms(std::string_view text) {
  std::vector<std::string> terms;
  std::size_t i = 0;
  while (i < text.size()) {
    auto c = utf8::decode(text, i);
    if (!utf8::is_alnum(c)) {
      i += c.len;
      continue;
    }
    const std::size_t start = i;
    while (i < text.size()) {
      c = utf8::decode(text, i);
      if (!utf8::is_alnum(c)) break;
      i += c.len;
    }
    terms.push_back(utf8::lower(text.substr(start, i - start)));
  }
  return terms;
}

Corpus::Corpus(std::vector<Document> documents, Bm25Params params)
    : documents_(std::move(documents)), params_(params) {
  std::set<std::uint64_t> ids;
  std::size_t total = 0;
  for (const auto& doc : documents_) {
    if (!ids.insert(doc.id).second) {
      throw Error(ErrorKind::MalformedRecord, "duplicate document id " + std::to_string(doc.id));
    }
    std::unordered_map<std::string, std::size_t> tf;
    const auto terms = bm25_terms(doc.text);
    for (const auto& t : terms) ++tf[t];
    for (const auto& [t, n] : tf) ++doc_counts_[t];
    lengths_.push_back(terms.size());
    total += terms.size();
    term_freqs_.push_back(std::move(tf));
  }
  if (documents_.empty()) return;
  const double n = static_cast<double>(documents_.size());
  avgdl_ = static_cast<double>(total) / n;

  // Sorted term order keeps the idf sum independent of hash layout.
  std::vector<std::pair<std::string, std::size_t>> sorted(doc_counts_.begin(), doc_counts_.end());
  std::sort(sorted.begin(), sorted.end());
  double idf_sum = 0.0;
  std::vector<std::string> negative;
  for (const auto& [term, df] : sorted) {
    const double v = std::log(n - static_cast<double>(df) + 0.5) - std::log(static_cast<double>(df) + 0.5);
    idf_[term] = v;
    idf_sum += v;
    if (v < 0.0) negative.push_back(term);
  }
  const double floor = params_.epsilon * idf_sum / static_cast<double>(sorted.size());
  for (const auto& term : negative) idf_[term] = floor;
}

double Corpus::document_frequency(const std::string& term) const {
  if (documents_.empty()) return 0.0;
  auto it = doc_counts_.find(term);
  return it == doc_counts_.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(documents_.size());
}

double Corpus::idf(const std::string& term) const {
  auto it = idf_.find(term);
  return it == idf_.end() ? 0.0 : it->second;
}

double Corpus::score(std::size_t doc_index, const std::vector<std::string>& query_terms) const {
  if (doc_index >= documents_.size()) {
    throw Error(ErrorKind::InvalidArgument, "document index " + std::to_string(doc_index) + " out of range");
  }
  const auto& tf = term_freqs_[doc_index];
  const double dl = static_cast<double>(lengths_[doc_index]);
  double s = 0.0;
  for (const auto& q : query_terms) {
    auto it = tf.find(q);
    if (it == tf.end()) continue;
    const double f = static_cast<double>(it->second);
    s += idf(q) * f * (params_.k1 + 1.0) / (f + params_.k1 * (1.0 - params_.b + params_.b * dl / avgdl_));
  }
  return s;
}

Corpus parse_corpus(std::string_view jsonl) {
  std::vector<Document> docs;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      Document d;
      d.id = rec.at("id").get<std::uint64_t>();
      d.subject = rec.value("subject", std::string());
      d.text = rec.at("text").get<std::string>();
      docs.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, "MalformedRecord(" + std::to_string(index) + "): " + e.what());
    }
    ++index;
  }
  return Corpus(std::move(docs));
}

Corpus load_corpus(const std::filesystem::path& path) { return parse_corpus(read_text_file(path)); }

std::vector<ScoredDocument> bm25_rank(const Corpus& corpus, std::string_view query, std::size_t top_m) {
  if (top_m == 0) throw Error(ErrorKind::InvalidArgument, "top_m must be >= 1");
  const auto terms = bm25_terms(query);
  std::vector<ScoredDocument> scored;
  scored.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    scored.push_back({i, corpus.documents()[i].id, corpus.score(i, terms)});
  }
  std::sort(scored.begin(), scored.end(), [](const ScoredDocument& a, const ScoredDocument& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  if (scored.size() > top_m) scored.resize(top_m);
  return scored;
}

std::set<std::string> parse_stopwords(std::string_view text) {
  std::set<std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.insert(utf8::lower(line.substr(b, e - b + 1)));
  }
  return out;
}

std::set<std::string> load_stopwords(const std::filesystem::path& path) {
  return parse_stopwords(read_text_file(path));
}

std::string normalize_token(std::string_view token) {
  std::size_t i = 0;
  while (i < token.size()) {
    const auto c = utf8::decode(token, i);
    if (utf8::classify(c) != utf8::CharClass::space) break;
    i += c.len;
  }
  return utf8::lower(token.substr(i));
}

namespace {

bool has_alnum(std::string_view s) {
  for (std::size_t i = 0; i < s.size();) {
    const auto c = utf8::decode(s, i);
    if (utf8::is_alnum(c)) return true;
    i += c.len;
  }
  return false;
}

}  // namespace

CandidateSet build_candidates(const Tokenizer& tok, const Corpus& corpus, const std::vector<ScoredDocument>& retrieved,
                              const std::set<std::string>& stopwords, double df_cutoff, std::string subject) {
  CandidateSet out;
  out.subject = std::move(subject);
  for (const auto& r : retrieved) {
    if (r.index >= corpus.size()) throw Error(ErrorKind::InvalidArgument, "retrieved index out of range");
    for (auto id : tok.encode(corpus.documents()[r.index].text)) {
      if (tok.is_subword_fragment(id)) continue;
      const auto norm = normalize_token(tok.token_bytes(id));
      if (norm.empty() || !has_alnum(norm) || stopwords.contains(norm)) continue;
      // df is measured on the token's BM25 terms; a token is frequent if any of them is
      bool frequent = false;
      for (const auto& term : bm25_terms(norm)) {
        if (corpus.document_frequency(term) > df_cutoff) frequent = true;
      }
      if (frequent) continue;
      out.candidates.insert(norm);
    }
  }
  return out;
}

std::map<std::string, CandidateSet> build_candidate_sets(const Tokenizer& tok, const Corpus& corpus,
                                                         const std::vector<PromptCase>& cases,
                                                         const std::set<std::string>& stopwords,
                                                         const CandidateOptions& options) {
  std::map<std::string, CandidateSet> out;
  for (const auto& pc : cases) {
    const auto& subject = pc.triple.subject;
    if (out.contains(subject)) continue;
    const auto retrieved = bm25_rank(corpus, subject, options.top_m);
    out.emplace(subject, build_candidates(tok, corpus, retrieved, stopwords, options.df_cutoff, subject));
  }
  return out;
}

// ---------------------------------------------------------------------------

void EmbeddingTable::add(const std::string& token, std::span<const float> vec) {
  if (dim_ == 0) dim_ = vec.size();
  if (vec.size() != dim_ || dim_ == 0) {
    throw Error(ErrorKind::ShapeMismatch, "embedding for '" + token + "' has dim " + std::to_string(vec.size()) +
                                              ", table has " + std::to_string(dim_));
  }
  if (index_.contains(token)) throw Error(ErrorKind::MalformedRecord, "duplicate embedding token '" + token + "'");
  double sq = 0.0;
  for (float v : vec) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw Error(ErrorKind::MalformedRecord, "embedding for '" + token + "' has zero or non-finite norm");
  }
  index_.emplace(token, tokens_.size());
  tokens_.push_back(token);
  for (float v : vec) data_.push_back(static_cast<float>(v / norm));
}

namespace {

std::optional<std::size_t> resolve(const std::unordered_map<std::string, std::size_t>& index, std::string_view token) {
  if (auto it = index.find(std::string(token)); it != index.end()) return it->second;
  if (auto it = index.find(normalize_token(token)); it != index.end()) return it->second;
  return std::nullopt;
}

}  // namespace

std::optional<std::span<const float>> EmbeddingTable::lookup(std::string_view token) const {
  const auto i = resolve(index_, token);
  if (!i) return std::nullopt;
  return std::span<const float>(data_.data() + *i * dim_, dim_);
}

std::vector<std::uint8_t> EmbeddingTable::serialize() const {
  std::vector<std::uint8_t> out;
  auto put = [&](auto v) {
    std::uint8_t b[sizeof(v)];
    std::memcpy(b, &v, sizeof(v));
    out.insert(out.end(), b, b + sizeof(v));
  };
  put(static_cast<std::uint64_t>(tokens_.size()));
  put(static_cast<std::uint32_t>(dim_));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    put(static_cast<std::uint32_t>(tokens_[i].size()));
    out.insert(out.end(), tokens_[i].begin(), tokens_[i].end());
    for (std::size_t k = 0; k < dim_; ++k) put(data_[i * dim_ + k]);
  }
  return out;
}

EmbeddingTable EmbeddingTable::parse(const std::vector<std::uint8_t>& bytes) {
  std::size_t off = 0;
  auto take = [&](auto& v) {
    if (bytes.size() - off < sizeof(v)) throw Error(ErrorKind::MalformedRecord, "embedding table is truncated");
    std::memcpy(&v, bytes.data() + off, sizeof(v));
    off += sizeof(v);
  };
  std::uint64_t count = 0;
  std::uint32_t dim = 0;
  take(count);
  take(dim);
  if (dim == 0 && count > 0) throw Error(ErrorKind::MalformedRecord, "embedding table has dim 0");
  EmbeddingTable t(dim);
  std::vector<float> vec(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    take(len);
    if (bytes.size() - off < len) throw Error(ErrorKind::MalformedRecord, "embedding table is truncated");
    std::string token(reinterpret_cast<const char*>(bytes.data() + off), len);
    off += len;
    for (auto& v : vec) take(v);
    t.add(token, vec);
  }
  if (off != bytes.size()) throw Error(ErrorKind::MalformedRecord, "trailing bytes after embedding table");
  return t;
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
  const std::string s = read_text_file(path);
  return parse(std::vector<std::uint8_t>(s.begin(), s.end()));
}

void EmbeddingTable::save(const std::filesystem::path& path) const {
  const auto b = serialize();
  write_text_file(path, std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
}

std::optional<double> try_cosine_sim(const EmbeddingTable& table, std::string_view a, std::string_view b) {
  const auto va = table.lookup(a);
  const auto vb = table.lookup(b);
  if (!va || !vb) return std::nullopt;
  if (va->data() == vb->data()) return 1.0;
  double dot = 0.0;
  for (std::size_t i = 0; i < va->size(); ++i) dot += static_cast<double>((*va)[i]) * (*vb)[i];
  return std::clamp(dot, -1.0, 1.0);
}

double cosine_sim(const EmbeddingTable& table, std::string_view a, std::string_view b) {
  if (!table.lookup(a)) throw Error(ErrorKind::UnknownToken, "no embedding for '" + std::string(a) + "'");
  if (!table.lookup(b)) throw Error(ErrorKind::UnknownToken, "no embedding for '" + std::string(b) + "'");
  return *try_cosine_sim(table, a, b);
}

double objects_rate(const EmbeddingTable& table, const std::vector<std::string>& top_tokens,
                    const CandidateSet& candidates, double tau) {
  if (top_tokens.empty()) throw Error(ErrorKind::InvalidArgument, "objects rate of an empty token list");
  std::size_t matched = 0;
  for (const auto& t : top_tokens) {
    if (!table.lookup(t)) continue;
    for (const auto& o : candidates.candidates) {
      const auto s = try_cosine_sim(table, t, o);
      if (s && *s >= tau) {
        ++matched;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(matched) / static_cast<double>(top_tokens.size());
}

std::vector<std::string> decode_each(const Tokenizer& tok, const std::vector<TokenId>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(tok.token_bytes(id));
  return out;
}

KnockoutCurve knockout_sweep(const ModelBundle& bundle, const std::vector<PromptCase>& cases, KnockoutTarget target,
                             const EmbeddingTable& table, const std::map<std::string, CandidateSet>& candidate_sets,
                             double tau, std::size_t k, unsigned threads) {
  if (cases.empty()) throw Error(ErrorKind::EmptyDataset, "knockout sweep needs at least one case");
  std::vector<const CandidateSet*> sets;
  for (const auto& pc : cases) {
    auto it = candidate_sets.find(pc.triple.subject);
    if (it == candidate_sets.end()) {
      throw Error(ErrorKind::MissingCandidates, "no candidate set for subject '" + pc.triple.subject + "'");
    }
    sets.push_back(&it->second);
  }
  const int L = bundle.config.num_layers;
  const std::size_t per_case = static_cast<std::size_t>(L) + 1;
  std::vector<double> rates(cases.size() * per_case);
  parallel_for(rates.size(), threads, [&](std::size_t job) {
    const std::size_t c = job / per_case;
    const std::size_t slot = job % per_case;
    const auto& pc = cases[c];
    std::vector<TokenId> top;
    if (slot == 0) {
      top = clean_topk(bundle, pc, k);
    } else {
      KnockoutSpec spec;
      spec.target = target;
      spec.start_layer = static_cast<int>(slot) - 1;
      top = knockout_topk(bundle, pc, spec, k);
    }
    rates[job] = objects_rate(table, decode_each(bundle.tok(), top), *sets[c], tau);
  });
  KnockoutCurve curve;
  curve.target = target;
  curve.rate.assign(static_cast<std::size_t>(L), 0.0);
  for (std::size_t c = 0; c < cases.size(); ++c) {
    curve.clean_rate += rates[c * per_case];
    for (int l = 0; l < L; ++l) curve.rate[l] += rates[c * per_case + 1 + l];
  }
  const double n = static_cast<double>(cases.size());
  curve.clean_rate /= n;
  for (auto& r : curve.rate) r /= n;
  return curve;
}

}  // namespace factrace
