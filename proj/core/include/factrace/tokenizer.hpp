#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace factrace {

using TokenId = std::int32_t;

// Minimal token range [first, last] covering the subject; `last` is the
// last subject token, the usual intervention target.
struct SubjectSpan {
  std::size_t first = 0;
  std::size_t last = 0;

  std::size_t length() const { return last - first + 1; }
  bool contains(std::size_t pos) const { return pos >= first && pos <= last; }
  friend bool operator==(const SubjectSpan&, const SubjectSpan&) = default;
};

// Byte-level BPE (GPT-2 scheme). Immutable after construction.
class Tokenizer {
 public:
  // `vocab` maps byte-unicode token strings to dense ids 0..|V|-1; `merges`
  // is the ordered rule list (rank = index).
  Tokenizer(std::unordered_map<std::string, TokenId> vocab,
            std::vector<std::pair<std::string, std::string>> merges);

  static Tokenizer from_files(const std::filesystem::path& vocab_json,
                              const std::filesystem::path& merges_txt);
  static Tokenizer from_strings(std::string_view vocab_json, std::string_view merges_txt);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(const std::vector<TokenId>& ids) const;
  // Raw bytes of one token.
  std::string token_bytes(TokenId id) const;
  // Vocabulary string of one token (byte-unicode form, e.g. "ĠParis").
  const std::string& token_string(TokenId id) const;

  SubjectSpan locate_subject(std::string_view prompt, std::string_view subject) const;
  bool is_subword_fragment(TokenId id) const;

  std::size_t vocab_size() const { return id_to_token_.size(); }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  // Splits text into pretokenized pieces following the GPT-2 pattern
  //   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
  static std::vector<std::string_view> pretokenize(std::string_view text);

 private:
  std::vector<TokenId> bpe(std::string_view piece) const;

  std::unordered_map<std::string, TokenId> vocab_;
  std::vector<std::string> id_to_token_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, int> merge_rank_;
};

// GPT-2 byte <-> unicode table: printable bytes map to themselves, the rest
// to code points from U+0100 upward.
const std::vector<std::string>& byte_to_unicode_table();
// Inverse mapping from a byte-unicode string to raw bytes. Throws on
// characters outside the table.
std::string unicode_to_bytes(std::string_view s);
std::string bytes_to_unicode(std::string_view bytes);

}  // namespace factrace
