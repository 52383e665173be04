#include "kindepth/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <sstream>

#include "kindepth/error.hpp"

namespace kindepth {

namespace {

struct CodepointRange {
  char32_t first;
  char32_t last;
};

#include "unicode_ranges.inc"

constexpr char32_t kInvalid = 0xFFFFFFFF;

bool in_ranges(std::span<const CodepointRange> ranges, char32_t cp) {
  auto it = std::upper_bound(ranges.begin(), ranges.end(), cp,
                             [](char32_t v, const CodepointRange& r) { return v < r.first; });
  return it != ranges.begin() && cp <= std::prev(it)->last;
}

bool is_whitespace(char32_t c) {
  return (c >= 0x09 && c <= 0x0D) || c == 0x20 || c == 0x85 || c == 0xA0 || c == 0x1680 ||
         (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F || c == 0x205F ||
         c == 0x3000;
}

enum class CharClass { letter, number, space, other };

CharClass classify(char32_t c) {
  if (c == kInvalid) return CharClass::other;
  if (c < 0x80) {
    if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z')) return CharClass::letter;
    if (c >= '0' && c <= '9') return CharClass::number;
    if (is_whitespace(c)) return CharClass::space;
    return CharClass::other;
  }
  if (is_whitespace(c)) return CharClass::space;
  if (in_ranges(kLetterRanges, c)) return CharClass::letter;
  if (in_ranges(kNumberRanges, c)) return CharClass::number;
  return CharClass::other;
}

struct Codepoint {
  char32_t value;
  std::size_t offset;
};

// Lenient UTF-8 decoding: a malformed byte becomes one kInvalid code point.
std::vector<Codepoint> decode_utf8(std::string_view s) {
  std::vector<Codepoint> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) ok = false;
      cp = (cp << 6) | (b & 0x3F);
    }
    if (ok) {
      constexpr std::array<char32_t, 5> min_value = {0, 0, 0x80, 0x800, 0x10000};
      if (cp < min_value[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) ok = false;
    }
    if (!ok) {
      out.push_back({kInvalid, i});
      ++i;
    } else {
      out.push_back({cp, i});
      i += len;
    }
  }
  return out;
}

const std::array<char32_t, 256>& byte_table() {
  static const std::array<char32_t, 256> table = [] {
    std::array<char32_t, 256> t{};
    std::array<bool, 256> printable{};
    for (int b = '!'; b <= '~'; ++b) printable[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) t[b] = printable[b] ? static_cast<char32_t>(b) : next++;
    return t;
  }();
  return table;
}

// Inverse of byte_table for one surrogate-encoded vocabulary string.
std::optional<std::string> surrogate_to_bytes(std::string_view s) {
  static const std::unordered_map<char32_t, unsigned char> inverse = [] {
    std::unordered_map<char32_t, unsigned char> m;
    for (int b = 0; b < 256; ++b) m[byte_table()[b]] = static_cast<unsigned char>(b);
    return m;
  }();
  std::string out;
  for (const Codepoint& cp : decode_utf8(s)) {
    auto it = inverse.find(cp.value);
    if (it == inverse.end()) return std::nullopt;
    out += static_cast<char>(it->second);
  }
  return out;
}

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

}  // namespace

char32_t byte_to_unicode(unsigned char b) noexcept { return byte_table()[b]; }

std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view text) {
  const std::vector<Codepoint> cps = decode_utf8(text);
  const std::size_t n = cps.size();
  auto offset = [&](std::size_t i) { return i < n ? cps[i].offset : text.size(); };
  auto cls = [&](std::size_t i) { return classify(cps[i].value); };
  std::vector<std::pair<std::size_t, std::size_t>> out;

  std::size_t i = 0;
  while (i < n) {
    const char32_t c = cps[i].value;
    // 's 't 're 've 'm 'll 'd
    if (c == U'\'' && i + 1 < n) {
      const char32_t a = cps[i + 1].value;
      const char32_t b = i + 2 < n ? cps[i + 2].value : 0;
      std::size_t len = 0;
      if (a == U's' || a == U't' || a == U'm' || a == U'd')
        len = 2;
      else if ((a == U'r' && b == U'e') || (a == U'v' && b == U'e') || (a == U'l' && b == U'l'))
        len = 3;
      if (len) {
        out.emplace_back(offset(i), offset(i + len));
        i += len;
        continue;
      }
    }
    std::size_t j = i;
    if (c == U' ' && i + 1 < n && cls(i + 1) != CharClass::space) j = i + 1;
    const CharClass k = cls(j);
    if (k != CharClass::space) {
      std::size_t e = j + 1;
      while (e < n && cls(e) == k) ++e;
      out.emplace_back(offset(i), offset(e));
      i = e;
      continue;
    }
    std::size_t e = i + 1;
    while (e < n && cls(e) == CharClass::space) ++e;
    // \s+(?!\S) leaves the last whitespace character for the following token.
    if (e < n && e - i >= 2) --e;
    out.emplace_back(offset(i), offset(e));
    i = e;
  }
  return out;
}

Tokenizer Tokenizer::load(const std::filesystem::path& vocab_file, const std::filesystem::path& merges_file) {
  Tokenizer t;
  {
    std::ifstream in(vocab_file, std::ios::binary);
    if (!in) throw FormatError("cannot open vocab file " + vocab_file.string());
    nlohmann::json vocab;
    try {
      vocab = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("vocab file " + vocab_file.string() + " is not valid JSON: " + e.what());
    }
    if (!vocab.is_object() || vocab.empty()) throw FormatError("vocab file must be a non-empty JSON object");
    t.id_to_bytes_.assign(vocab.size(), {});
    std::vector<bool> seen(vocab.size(), false);
    for (const auto& [key, value] : vocab.items()) {
      if (!value.is_number_integer()) throw FormatError("vocab id for '" + key + "' is not an integer");
      const auto id = value.get<std::int64_t>();
      if (id < 0 || static_cast<std::size_t>(id) >= vocab.size())
        throw FormatError("vocab ids are not contiguous from 0 (id " + std::to_string(id) + ")");
      if (seen[id]) throw FormatError("duplicate vocab id " + std::to_string(id));
      seen[id] = true;
      auto bytes = surrogate_to_bytes(key);
      if (!bytes) throw FormatError("vocab entry '" + key + "' is not byte-level encoded");
      t.id_to_bytes_[id] = *bytes;
      t.bytes_to_id_.emplace(std::move(*bytes), static_cast<TokenId>(id));
    }
  }
  t.byte_ids_.assign(256, -1);
  for (int b = 0; b < 256; ++b) {
    auto it = t.bytes_to_id_.find(std::string(1, static_cast<char>(b)));
    if (it == t.bytes_to_id_.end()) throw FormatError("vocab lacks single-byte token " + std::to_string(b));
    t.byte_ids_[b] = it->second;
  }
  {
    std::ifstream in(merges_file, std::ios::binary);
    if (!in) throw FormatError("cannot open merges file " + merges_file.string());
    std::string line;
    std::uint32_t rank = 0;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.rfind("#version", 0) == 0) continue;
      const auto space = line.find(' ');
      if (space == std::string::npos || space == 0 || space + 1 == line.size() ||
          line.find(' ', space + 1) != std::string::npos)
        throw FormatError("merges line " + std::to_string(line_no) + " is not a token pair");
      auto left = surrogate_to_bytes(std::string_view(line).substr(0, space));
      auto right = surrogate_to_bytes(std::string_view(line).substr(space + 1));
      if (!left || !right) throw FormatError("merges line " + std::to_string(line_no) + " is not byte-level encoded");
      auto l = t.find(*left), r = t.find(*right), m = t.find(*left + *right);
      if (!l || !r || !m)
        throw FormatError("merges line " + std::to_string(line_no) + " references tokens missing from vocab");
      t.merge_ranks_.try_emplace(pair_key(*l, *r), rank++, *m);
    }
  }
  return t;
}

void Tokenizer::bpe(std::string_view word, std::size_t offset, std::vector<TokenPiece>& out) const {
  std::vector<TokenPiece> parts;
  parts.reserve(word.size());
  for (std::size_t i = 0; i < word.size(); ++i)
    parts.push_back({byte_ids_[static_cast<unsigned char>(word[i])], offset + i, offset + i + 1});
  while (parts.size() > 1) {
    std::uint32_t best_rank = std::numeric_limits<std::uint32_t>::max();
    TokenId best_left = -1, best_right = -1, merged = -1;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      auto it = merge_ranks_.find(pair_key(parts[i].id, parts[i + 1].id));
      if (it != merge_ranks_.end() && it->second.first < best_rank) {
        best_rank = it->second.first;
        best_left = parts[i].id;
        best_right = parts[i + 1].id;
        merged = it->second.second;
      }
    }
    if (merged < 0) break;
    std::vector<TokenPiece> next;
    next.reserve(parts.size());
    for (std::size_t i = 0; i < parts.size();) {
      if (i + 1 < parts.size() && parts[i].id == best_left && parts[i + 1].id == best_right) {
        next.push_back({merged, parts[i].begin, parts[i + 1].end});
        i += 2;
      } else {
        next.push_back(parts[i++]);
      }
    }
    parts = std::move(next);
  }
  out.insert(out.end(), parts.begin(), parts.end());
}

std::vector<TokenPiece> Tokenizer::encode_pieces(std::string_view text) const {
  std::vector<TokenPiece> out;
  for (auto [begin, end] : pretokenize(text)) bpe(text.substr(begin, end - begin), begin, out);
  return out;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const TokenPiece& p : encode_pieces(text)) ids.push_back(p.id);
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token_bytes(id);
  return out;
}

const std::string& Tokenizer::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_bytes_.size())
    throw DecodeError("token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(id_to_bytes_.size()));
  return id_to_bytes_[id];
}

std::optional<TokenId> Tokenizer::find(std::string_view bytes) const {
  auto it = bytes_to_id_.find(std::string(bytes));
  if (it == bytes_to_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<TokenId> Tokenizer::single_token_id(std::string_view word) const {
  if (word.empty()) throw std::invalid_argument("single_token_id: empty word");
  for (const Codepoint& cp : decode_utf8(word))
    if (cp.value != kInvalid && is_whitespace(cp.value))
      throw std::invalid_argument("single_token_id: word contains whitespace");
  auto ids = encode(" " + std::string(word));
  if (ids.size() != 1) return std::nullopt;
  return ids.front();
}

SpanLocation locate_spans(const Tokenizer& tokenizer, std::string_view text, std::span<const CharSpan> spans) {
  const std::vector<TokenPiece> pieces = tokenizer.encode_pieces(text);
  if (pieces.empty()) throw AlignmentError("text encodes to no tokens");
  SpanLocation loc;
  loc.final_index = pieces.size() - 1;
  for (const CharSpan& span : spans) {
    if (span.begin >= span.end || span.end > text.size())
      throw AlignmentError("span [" + std::to_string(span.begin) + ", " + std::to_string(span.end) +
                           ") outside text");
    auto it = std::upper_bound(pieces.begin(), pieces.end(), span.begin,
                               [](std::size_t v, const TokenPiece& p) { return v < p.begin; });
    const TokenPiece& piece = *std::prev(it);
    const bool starts_here = piece.begin == span.begin;
    const bool space_prefixed = piece.begin + 1 == span.begin && text[piece.begin] == ' ';
    if (!starts_here && !space_prefixed)
      throw AlignmentError("span starting at byte " + std::to_string(span.begin) + " falls inside a token");
    loc.token_indices.push_back(static_cast<std::size_t>(std::prev(it) - pieces.begin()));
  }
  return loc;
}

std::vector<TokenId> answer_token_ids(const Tokenizer& tokenizer) {
  std::vector<TokenId> ids;
  for (Relation r : kAnswerSet) {
    auto id = tokenizer.single_token_id(to_string(r));
    if (!id) throw LookupError("answer '" + std::string(to_string(r)) + "' is not a single token");
    ids.push_back(*id);
  }
  return ids;
}

}  // namespace kindepth
