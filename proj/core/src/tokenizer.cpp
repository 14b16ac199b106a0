#include "factrace/tokenizer.hpp"

#include <algorithm>
#include <climits>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "factrace/error.hpp"
#include "factrace/report.hpp"
#include "utf8.hpp"

namespace factrace {

namespace {

using utf8::CharClass;
using utf8::classify;
using utf8::CodePoint;

struct Table {
  std::vector<std::string> byte_to_str;
  std::unordered_map<std::string, unsigned char> str_to_byte;
};

const Table& table() {
  static const Table t = [] {
    Table tbl;
    tbl.byte_to_str.resize(256);
    std::vector<bool> direct(256, false);
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) {
      std::string s;
      utf8::append(s, direct[b] ? char32_t(b) : next++);
      tbl.str_to_byte.emplace(s, static_cast<unsigned char>(b));
      tbl.byte_to_str[b] = std::move(s);
    }
    return tbl;
  }();
  return t;
}

// Splits a byte-unicode string into its characters.
std::vector<std::string> split_chars(std::string_view s) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = utf8::decode(s, i);
    out.emplace_back(s.substr(i, c.len));
    i += c.len;
  }
  return out;
}

}  // namespace

const std::vector<std::string>& byte_to_unicode_table() { return table().byte_to_str; }

std::string bytes_to_unicode(std::string_view bytes) {
  std::string out;
  for (unsigned char b : bytes) out += table().byte_to_str[b];
  return out;
}

std::string unicode_to_bytes(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = utf8::decode(s, i);
    const std::string ch(s.substr(i, c.len));
    auto it = table().str_to_byte.find(ch);
    if (it == table().str_to_byte.end()) {
      throw Error(ErrorKind::MalformedRecord, "character outside the byte-unicode table: " + ch);
    }
    out.push_back(static_cast<char>(it->second));
    i += c.len;
  }
  return out;
}

std::vector<std::string_view> Tokenizer::pretokenize(std::string_view text) {
  std::vector<CodePoint> cps;
  std::vector<std::size_t> offs;
  for (std::size_t i = 0; i < text.size();) {
    cps.push_back(utf8::decode(text, i));
    offs.push_back(i);
    i += cps.back().len;
  }
  offs.push_back(text.size());
  const std::size_t n = cps.size();
  auto cls = [&](std::size_t i) { return classify(cps[i]); };
  auto is_ascii = [&](std::size_t i, char c) { return i < n && cps[i].valid && cps[i].cp == char32_t(c); };

  std::vector<std::string_view> pieces;
  auto emit = [&](std::size_t b, std::size_t e) { pieces.push_back(text.substr(offs[b], offs[e] - offs[b])); };

  std::size_t i = 0;
  while (i < n) {
    // 's|'t|'re|'ve|'m|'ll|'d
    if (is_ascii(i, '\'')) {
      if (is_ascii(i + 1, 's') || is_ascii(i + 1, 't') || is_ascii(i + 1, 'm') || is_ascii(i + 1, 'd')) {
        emit(i, i + 2);
        i += 2;
        continue;
      }
      if ((is_ascii(i + 1, 'r') && is_ascii(i + 2, 'e')) || (is_ascii(i + 1, 'v') && is_ascii(i + 2, 'e')) ||
          (is_ascii(i + 1, 'l') && is_ascii(i + 2, 'l'))) {
        emit(i, i + 3);
        i += 3;
        continue;
      }
    }
    // ` ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+`
    std::size_t start = i + (is_ascii(i, ' ') ? 1 : 0);
    if (start < n) {
      const CharClass c = cls(start);
      if (c != CharClass::space) {
        std::size_t j = start + 1;
        while (j < n && cls(j) == c) ++j;
        emit(i, j);
        i = j;
        continue;
      }
    }
    // `\s+(?!\S)|\s+`
    std::size_t j = i;
    while (j < n && cls(j) == CharClass::space) ++j;
    if (j == i) j = i + 1;  // not reachable: every non-space starts a run above
    if (j < n && j - i > 1) {
      emit(i, j - 1);
      i = j - 1;
    } else {
      emit(i, j);
      i = j;
    }
  }
  return pieces;
}

Tokenizer::Tokenizer(std::unordered_map<std::string, TokenId> vocab,
                     std::vector<std::pair<std::string, std::string>> merges)
    : vocab_(std::move(vocab)), merges_(std::move(merges)) {
  id_to_token_.assign(vocab_.size(), std::string());
  std::vector<bool> seen(vocab_.size(), false);
  for (const auto& [tok, id] : vocab_) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size() || seen[id]) {
      throw Error(ErrorKind::MalformedRecord, "vocabulary ids are not dense in 0..|V|-1 (token '" + tok + "')");
    }
    seen[id] = true;
    id_to_token_[id] = tok;
  }
  for (const auto& s : table().byte_to_str) {
    if (!vocab_.contains(s)) {
      throw Error(ErrorKind::MalformedRecord, "vocabulary lacks byte symbol '" + s + "'");
    }
  }
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto& [a, b] = merges_[r];
    if (!vocab_.contains(a) || !vocab_.contains(b) || !vocab_.contains(a + b)) {
      throw Error(ErrorKind::MalformedRecord,
                  "merge rule " + std::to_string(r) + " ('" + a + " " + b + "') references unknown symbols");
    }
    merge_rank_.emplace(a + " " + b, static_cast<int>(r));
  }
}

Tokenizer Tokenizer::from_strings(std::string_view vocab_json, std::string_view merges_txt) {
  std::unordered_map<std::string, TokenId> vocab;
  try {
    const auto j = nlohmann::json::parse(vocab_json);
    for (const auto& [k, v] : j.items()) vocab.emplace(k, v.get<TokenId>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, std::string("vocab JSON: ") + e.what());
  }
  std::vector<std::pair<std::string, std::string>> merges;
  std::istringstream in{std::string(merges_txt)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("#version", 0) == 0)) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || line.find(' ', sp + 1) != std::string::npos) {
      throw Error(ErrorKind::MalformedRecord, "merges line " + std::to_string(lineno) + " is not 'a b'");
    }
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return Tokenizer(std::move(vocab), std::move(merges));
}

Tokenizer Tokenizer::from_files(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
  return from_strings(read_text_file(vocab_json), read_text_file(merges_txt));
}

std::vector<TokenId> Tokenizer::bpe(std::string_view piece) const {
  std::vector<std::string> word = split_chars(bytes_to_unicode(piece));
  while (word.size() > 1) {
    int best = INT_MAX;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i + 1 < word.size(); ++i) {
      auto it = merge_rank_.find(word[i] + " " + word[i + 1]);
      if (it != merge_rank_.end() && it->second < best) {
        best = it->second;
        best_i = i;
      }
    }
    if (best == INT_MAX) break;
    const std::string a = word[best_i];
    const std::string b = word[best_i + 1];
    std::vector<std::string> merged;
    merged.reserve(word.size());
    for (std::size_t i = 0; i < word.size();) {
      if (i + 1 < word.size() && word[i] == a && word[i + 1] == b) {
        merged.push_back(a + b);
        i += 2;
      } else {
        merged.push_back(word[i]);
        ++i;
      }
    }
    word = std::move(merged);
  }
  std::vector<TokenId> ids;
  ids.reserve(word.size());
  for (const auto& sym : word) ids.push_back(vocab_.at(sym));
  return ids;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (auto piece : pretokenize(text)) {
    auto part = bpe(piece);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  return ids;
}

const std::string& Tokenizer::token_string(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw Error(ErrorKind::TokenOutOfRange, "token id " + std::to_string(id) + " out of range");
  }
  return id_to_token_[id];
}

std::string Tokenizer::token_bytes(TokenId id) const { return unicode_to_bytes(token_string(id)); }

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (auto id : ids) out += token_bytes(id);
  return out;
}

SubjectSpan Tokenizer::locate_subject(std::string_view prompt, std::string_view subject) const {
  const auto begin = subject.empty() ? std::string_view::npos : prompt.find(subject);
  if (begin == std::string_view::npos) {
    throw Error(ErrorKind::SubjectNotFound,
                "subject '" + std::string(subject) + "' not found in prompt '" + std::string(prompt) + "'");
  }
  const auto end = begin + subject.size();
  const auto ids = encode(prompt);
  std::optional<std::size_t> first;
  std::size_t last = 0;
  std::size_t offset = 0;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const std::size_t len = token_bytes(ids[t]).size();
    const bool overlaps = offset < end && offset + len > begin;
    if (overlaps) {
      if (!first) first = t;
      last = t;
    }
    offset += len;
  }
  return {*first, last};
}

bool Tokenizer::is_subword_fragment(TokenId id) const {
  const std::string bytes = token_bytes(id);
  if (bytes.empty()) return false;
  const auto c = classify(utf8::decode(bytes, 0));
  return c == CharClass::letter || c == CharClass::number;
}

}  // namespace factrace
