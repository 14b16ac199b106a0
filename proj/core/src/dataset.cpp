#include "factrace/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "factrace/error.hpp"
#include "factrace/report.hpp"

namespace factrace {

namespace {

using nlohmann::json;

constexpr std::string_view kSlot = "{}";

[[noreturn]] void malformed(std::size_t index, const std::string& why) {
  throw Error(ErrorKind::MalformedRecord, "MalformedRecord(" + std::to_string(index) + "): " + why);
}

KnowledgeTriple triple_from_record(const json& rec, std::size_t index, const Tokenizer& tok) {
  if (!rec.is_object()) malformed(index, "record is not an object");
  const json& rw = rec.contains("requested_rewrite") ? rec.at("requested_rewrite") : rec;
  auto str_field = [&](const json& obj, const char* key) -> std::string {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_string()) malformed(index, std::string("missing string field '") + key + "'");
    return it->get<std::string>();
  };
  KnowledgeTriple t;
  if (auto it = rec.find("case_id"); it != rec.end()) {
    t.case_id = it->is_string() ? it->get<std::string>() : it->dump();
  } else {
    t.case_id = std::to_string(index);
  }
  t.subject = str_field(rw, "subject");
  t.relation_template = str_field(rw, "prompt");
  auto target = rw.find("target_true");
  if (target == rw.end() || !target->is_object()) malformed(index, "missing field 'target_true'");
  t.object = str_field(*target, "str");

  const auto first = t.relation_template.find(kSlot);
  if (first == std::string::npos || t.relation_template.find(kSlot, first + 1) != std::string::npos) {
    malformed(index, "template must contain exactly one '{}' subject slot");
  }
  if (t.subject.empty()) malformed(index, "empty subject");
  if (t.object.empty()) malformed(index, "empty object");
  t.object_token_ids = tok.encode(" " + t.object);
  return t;
}

}  // namespace

std::string fill_template(const std::string& relation_template, const std::string& subject) {
  std::string out = relation_template;
  const auto pos = out.find(kSlot);
  if (pos == std::string::npos) {
    throw Error(ErrorKind::MalformedRecord, "template '" + relation_template + "' has no subject slot");
  }
  out.replace(pos, kSlot.size(), subject);
  return out;
}

std::string KnowledgeTriple::prompt() const { return fill_template(relation_template, subject); }

std::vector<KnowledgeTriple> parse_counterfact(std::string_view text, const Tokenizer& tok) {
  std::vector<KnowledgeTriple> out;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return out;
  if (text[first] == '[') {
    json arr;
    try {
      arr = json::parse(text);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, std::string("CounterFact file is not valid JSON: ") + e.what());
    }
    for (std::size_t i = 0; i < arr.size(); ++i) out.push_back(triple_from_record(arr[i], i, tok));
    return out;
  }
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      malformed(index, e.what());
    }
    out.push_back(triple_from_record(rec, index, tok));
    ++index;
  }
  return out;
}

std::vector<KnowledgeTriple> load_counterfact(const std::filesystem::path& path, const Tokenizer& tok) {
  return parse_counterfact(read_text_file(path), tok);
}

PromptCase make_case(const ModelBundle& bundle, const KnowledgeTriple& triple) {
  const Tokenizer& tok = bundle.tok();
  PromptCase pc;
  pc.triple = triple;
  pc.prompt_text = triple.prompt();
  pc.tokens = tok.encode(pc.prompt_text);
  pc.subject_span = tok.locate_subject(pc.prompt_text, triple.subject);
  if (triple.object_token_ids.empty()) {
    throw Error(ErrorKind::MalformedRecord, "case '" + triple.case_id + "' has no object tokens");
  }
  ForwardOptions opts;
  opts.last_logits_only = true;
  const auto run = forward(bundle, pc.tokens, {}, {}, opts);
  pc.clean_object_prob = next_token_distribution(run, pc.last_position())[pc.object_token()];
  return pc;
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    // unbiased draw in [0, i)
    const std::uint64_t bound = i;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t r;
    do {
      r = rng();
    } while (r >= limit);
    std::swap(perm[i - 1], perm[r % bound]);
  }
  return perm;
}

std::vector<PromptCase> filter_correct(const ModelBundle& bundle, const std::vector<KnowledgeTriple>& triples,
                                       std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error(ErrorKind::InvalidArgument, "filter_correct requires n >= 1");
  const Tokenizer& tok = bundle.tok();
  std::vector<PromptCase> kept;
  for (auto idx : seeded_permutation(triples.size(), seed)) {
    const auto& t = triples[idx];
    const auto prompt = t.prompt();
    const auto tokens = tok.encode(prompt);
    if (tokens.empty() || tokens.size() > static_cast<std::size_t>(bundle.config.max_positions)) continue;
    if (t.object_token_ids.empty() || t.object_token_ids.front() >= bundle.config.vocab_size) continue;
    ForwardOptions opts;
    opts.last_logits_only = true;
    const auto run = forward(bundle, tokens, {}, {}, opts);
    const auto dist = next_token_distribution(run, tokens.size() - 1);
    if (top_k_tokens(dist, 1).front() != t.object_token_ids.front()) continue;
    PromptCase pc;
    pc.triple = t;
    pc.prompt_text = prompt;
    pc.tokens = tokens;
    pc.subject_span = tok.locate_subject(prompt, t.subject);
    pc.clean_object_prob = dist[t.object_token_ids.front()];
    kept.push_back(std::move(pc));
    if (kept.size() == n) return kept;
  }
  throw InsufficientCasesError(kept.size(), n);
}

NoiseScale estimate_sigma(const ModelBundle& bundle, const std::vector<KnowledgeTriple>& triples) {
  if (triples.empty()) throw Error(ErrorKind::EmptyDataset, "estimate_sigma needs at least one triple");
  const Tokenizer& tok = bundle.tok();
  const Tensor& emb = bundle.weights->token_embedding;
  double count = 0.0, sum = 0.0, sum_sq = 0.0;
  std::vector<const float*> rows;
  for (const auto& t : triples) {
    for (auto id : tok.encode(t.subject)) {
      const auto row = emb.row(static_cast<std::size_t>(id));
      rows.push_back(row.data());
    }
  }
  // Address order makes the sums independent of triple order.
  std::sort(rows.begin(), rows.end());
  const std::size_t d = emb.shape[1];
  for (const float* r : rows) {
    for (std::size_t i = 0; i < d; ++i) sum += r[i];
    count += static_cast<double>(d);
  }
  if (count == 0.0) throw Error(ErrorKind::EmptyDataset, "no subject tokens in dataset");
  const double mean = sum / count;
  for (const float* r : rows) {
    for (std::size_t i = 0; i < d; ++i) sum_sq += (r[i] - mean) * (r[i] - mean);
  }
  return NoiseScale::from_sigma(std::sqrt(sum_sq / count));
}

std::vector<PromptCase> filter_single_token_subjects(const Tokenizer&, const std::vector<PromptCase>& cases) {
  std::vector<PromptCase> out;
  std::copy_if(cases.begin(), cases.end(), std::back_inserter(out),
               [](const PromptCase& pc) { return pc.subject_span.first == pc.subject_span.last; });
  return out;
}

}  // namespace factrace
