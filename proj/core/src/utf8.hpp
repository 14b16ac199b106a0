#pragma once

// Private UTF-8 helpers shared by the tokenizer and the BM25 term splitter.

#include <string>
#include <string_view>

#include <unicode/uchar.h>

namespace factrace::utf8 {

struct CodePoint {
  char32_t cp;
  std::size_t len;
  bool valid;
};

// Invalid sequences decode as a single byte so that every input splits into
// byte ranges that cover it exactly.
inline CodePoint decode(std::string_view s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) {
    return i + k < s.size() && (static_cast<unsigned char>(s[i + k]) & 0xC0) == 0x80;
  };
  auto at = [&](std::size_t k) { return static_cast<char32_t>(static_cast<unsigned char>(s[i + k]) & 0x3F); };
  if (c < 0x80) return {c, 1, true};
  if ((c & 0xE0) == 0xC0 && c >= 0xC2 && cont(1)) return {(char32_t(c & 0x1F) << 6) | at(1), 2, true};
  if ((c & 0xF0) == 0xE0 && cont(1) && cont(2)) {
    return {(char32_t(c & 0x0F) << 12) | (at(1) << 6) | at(2), 3, true};
  }
  if ((c & 0xF8) == 0xF0 && c <= 0xF4 && cont(1) && cont(2) && cont(3)) {
    return {(char32_t(c & 0x07) << 18) | (at(1) << 12) | (at(2) << 6) | at(3), 4, true};
  }
  return {c, 1, false};
}

inline void append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

enum class CharClass { letter, number, space, other };

inline CharClass classify(const CodePoint& c) {
  if (!c.valid) return CharClass::other;
  const auto mask = U_GET_GC_MASK(static_cast<UChar32>(c.cp));
  if (mask & U_GC_L_MASK) return CharClass::letter;
  if (mask & U_GC_N_MASK) return CharClass::number;
  if (u_isUWhiteSpace(static_cast<UChar32>(c.cp))) return CharClass::space;
  return CharClass::other;
}

inline bool is_alnum(const CodePoint& c) {
  const auto k = classify(c);
  return k == CharClass::letter || k == CharClass::number;
}

inline std::string lower(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = decode(s, i);
    if (c.valid) {
      append(out, static_cast<char32_t>(u_tolower(static_cast<UChar32>(c.cp))));
    } else {
      out.push_back(s[i]);
    }
    i += c.len;
  }
  return out;
}

}  // namespace factrace::utf8
