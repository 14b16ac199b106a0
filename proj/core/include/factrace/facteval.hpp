#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "factrace/dataset.hpp"
#include "factrace/tracing.hpp"

namespace factrace {

// ---------------------------------------------------------------------------
// Corpus and BM25

struct Document {
  std::uint64_t id = 0;
  std::string subject;
  std::string text;
};

// Lowercased runs of letters/digits; everything else separates terms.
std::vector<std::string> bm25_terms(std::string_view text);

struct Bm25Params {
  double k1 = 1.5;
  double b = 0.75;
  double epsilon = 0.25;  // floor for negative idf, as a fraction of mean idf
};

class Corpus {
 public:
  explicit Corpus(std::vector<Document> documents, Bm25Params params = {});

  const std::vector<Document>& documents() const { return documents_; }
  std::size_t size() const { return documents_.size(); }
  // Fraction of documents containing the term.
  double document_frequency(const std::string& term) const;
  double idf(const std::string& term) const;
  double score(std::size_t doc_index, const std::vector<std::string>& query_terms) const;
  double average_length() const { return avgdl_; }

 private:
  std::vector<Document> documents_;
  Bm25Params params_;
  std::vector<std::unordered_map<std::string, std::size_t>> term_freqs_;
  std::vector<std::size_t> lengths_;
  std::unordered_map<std::string, std::size_t> doc_counts_;
  std::unordered_map<std::string, double> idf_;
  double avgdl_ = 0.0;
};

Corpus load_corpus(const std::filesystem::path& path);
Corpus parse_corpus(std::string_view jsonl);

struct ScoredDocument {
  std::size_t index = 0;
  std::uint64_t id = 0;
  double score = 0.0;
};

// Descending score, ties by ascending doc id.
std::vector<ScoredDocument> bm25_rank(const Corpus& corpus, std::string_view query,
                                      std::size_t top_m);

// ---------------------------------------------------------------------------
// Candidate sets

struct CandidateSet {
  std::string subject;
  std::set<std::string> candidates;  // normalised token strings
};

std::set<std::string> load_stopwords(const std::filesystem::path& path);
std::set<std::string> parse_stopwords(std::string_view text);

// Strips leading whitespace and lowercases.
std::string normalize_token(std::string_view token);

CandidateSet build_candidates(const Tokenizer& tok, const Corpus& corpus,
                              const std::vector<ScoredDocument>& retrieved,
                              const std::set<std::string>& stopwords, double df_cutoff,
                              std::string subject = {});

struct CandidateOptions {
  std::size_t top_m = 20;
  double df_cutoff = 0.5;
};

std::map<std::string, CandidateSet> build_candidate_sets(const Tokenizer& tok, const Corpus& corpus,
                                                         const std::vector<PromptCase>& cases,
                                                         const std::set<std::string>& stopwords,
                                                         const CandidateOptions& options);

// ---------------------------------------------------------------------------
// Embeddings

// Token string -> unit vector. File layout (little-endian):
//   u64 count | u32 dim | count x (u32 byte_len | utf-8 bytes | dim x f32)
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  // Normalises `vec` to unit length; throws on zero vectors or dim mismatch.
  void add(const std::string& token, std::span<const float> vec);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return tokens_.size(); }
  // Exact key, then the normalised key.
  std::optional<std::span<const float>> lookup(std::string_view token) const;

  static EmbeddingTable load(const std::filesystem::path& path);
  static EmbeddingTable parse(const std::vector<std::uint8_t>& bytes);
  void save(const std::filesystem::path& path) const;
  std::vector<std::uint8_t> serialize() const;

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<float> data_;
};

// Throws UnknownToken when either side cannot be resolved.
double cosine_sim(const EmbeddingTable& table, std::string_view a, std::string_view b);
std::optional<double> try_cosine_sim(const EmbeddingTable& table, std::string_view a,
                                     std::string_view b);

// |{t in T : exists o in O, sim(t, o) >= tau}| / |T| * 100.
double objects_rate(const EmbeddingTable& table, const std::vector<std::string>& top_tokens,
                    const CandidateSet& candidates, double tau);

struct KnockoutCurve {
  KnockoutTarget target = KnockoutTarget::mlp_out;
  std::vector<double> rate;  // indexed by start layer
  double clean_rate = 0.0;   // unintervened
};

std::vector<std::string> decode_each(const Tokenizer& tok, const std::vector<TokenId>& ids);

KnockoutCurve knockout_sweep(const ModelBundle& bundle, const std::vector<PromptCase>& cases,
                             KnockoutTarget target, const EmbeddingTable& table,
                             const std::map<std::string, CandidateSet>& candidate_sets, double tau,
                             std::size_t k, unsigned threads = 1);

}  // namespace factrace
