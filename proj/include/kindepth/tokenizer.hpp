#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kindepth/kinship.hpp"

namespace kindepth {

using TokenId = std::int32_t;

/// A token together with the byte range of the input it covers.
struct TokenPiece {
  TokenId id;
  std::size_t begin;
  std::size_t end;
};

/// Byte-level BPE tokenizer for GPT-2-style vocab.json + merges.txt assets.
/// Immutable after loading; encode/decode are safe to call concurrently.
class Tokenizer {
 public:
  /// Throws FormatError on missing files, parse failures, duplicate or
  /// non-contiguous ids, and merges that reference unknown tokens.
  static Tokenizer load(const std::filesystem::path& vocab_file, const std::filesystem::path& merges_file);

  std::size_t vocab_size() const noexcept { return id_to_bytes_.size(); }
  std::size_t merge_count() const noexcept { return merge_ranks_.size(); }

  std::vector<TokenId> encode(std::string_view text) const;
  std::vector<TokenPiece> encode_pieces(std::string_view text) const;
  /// Throws DecodeError for ids outside the vocabulary.
  std::string decode(std::span<const TokenId> ids) const;

  /// Raw bytes of one token.
  const std::string& token_bytes(TokenId id) const;
  /// Id of an exact byte string, if it is a vocabulary entry.
  std::optional<TokenId> find(std::string_view bytes) const;

  /// Id of " " + word when that encodes to exactly one token. `word` must be
  /// non-empty and contain no whitespace (std::invalid_argument otherwise).
  std::optional<TokenId> single_token_id(std::string_view word) const;

  friend bool operator==(const Tokenizer&, const Tokenizer&) = default;

 private:
  void bpe(std::string_view word, std::size_t offset, std::vector<TokenPiece>& out) const;

  std::vector<std::string> id_to_bytes_;
  std::unordered_map<std::string, TokenId> bytes_to_id_;
  std::unordered_map<std::uint64_t, std::pair<std::uint32_t, TokenId>> merge_ranks_;  // (left,right) -> (rank, merged)
  std::vector<TokenId> byte_ids_;  // id of each single byte
};

/// Split text the way GPT-2's pre-tokenizer does (contractions, letter runs,
/// digit runs, punctuation runs, whitespace). Returns byte ranges.
std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view text);

/// GPT-2's reversible byte -> printable code point map.
char32_t byte_to_unicode(unsigned char b) noexcept;

struct SpanLocation {
  std::vector<std::size_t> token_indices;  // token containing each span's first character
  std::size_t final_index = 0;             // index of the last token
};

/// Map character spans onto token indices. A span maps cleanly when its
/// token begins at the span start or one byte earlier on a space; anything
/// else throws AlignmentError.
SpanLocation locate_spans(const Tokenizer& tokenizer, std::string_view text, std::span<const CharSpan> spans);

/// Ids of the answer-set relations (with a leading space), in kAnswerSet order.
/// Throws LookupError if any of them is not a single token.
std::vector<TokenId> answer_token_ids(const Tokenizer& tokenizer);

}  // namespace kindepth
