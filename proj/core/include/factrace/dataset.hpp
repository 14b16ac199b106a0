#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "factrace/model.hpp"
#include "factrace/tokenizer.hpp"

namespace factrace {

// (subject, relation, object). `relation_template` holds one "{}" slot.
struct KnowledgeTriple {
  std::string case_id;
  std::string subject;
  std::string relation_template;
  std::string object;
  std::vector<TokenId> object_token_ids;

  std::string prompt() const;
};

struct PromptCase {
  KnowledgeTriple triple;
  std::string prompt_text;
  std::vector<TokenId> tokens;
  SubjectSpan subject_span;
  double clean_object_prob = 0.0;

  TokenId object_token() const { return triple.object_token_ids.front(); }
  std::size_t last_position() const { return tokens.size() - 1; }
};

struct NoiseScale {
  double sigma_sub = 0.0;
  double nu = 0.0;  // 3 * sigma_sub

  static NoiseScale from_sigma(double sigma) { return {sigma, 3.0 * sigma}; }
};

std::string fill_template(const std::string& relation_template, const std::string& subject);

// Parses CounterFact records (JSON array or one object per line).
std::vector<KnowledgeTriple> parse_counterfact(std::string_view text, const Tokenizer& tok);
std::vector<KnowledgeTriple> load_counterfact(const std::filesystem::path& path,
                                              const Tokenizer& tok);

// Tokenizes the prompt, locates the subject and records the clean
// probability of the object's first token at the final position.
PromptCase make_case(const ModelBundle& bundle, const KnowledgeTriple& triple);

// Seeded shuffle, then keep cases whose top-1 prediction is the object's
// first token, until n are found. Throws InsufficientCasesError otherwise.
std::vector<PromptCase> filter_correct(const ModelBundle& bundle,
                                       const std::vector<KnowledgeTriple>& triples, std::size_t n,
                                       std::uint64_t seed);

// Population std over all components of all subject-token embeddings.
NoiseScale estimate_sigma(const ModelBundle& bundle, const std::vector<KnowledgeTriple>& triples);

std::vector<PromptCase> filter_single_token_subjects(const Tokenizer& tok,
                                                     const std::vector<PromptCase>& cases);

// Deterministic Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

}  // namespace factrace
