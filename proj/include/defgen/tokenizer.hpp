#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "defgen/graph.hpp"

namespace defgen {

// Reserved ids. Bytes follow the specials, merged pieces follow the bytes.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kBosId = 2;
inline constexpr TokenId kEosId = 3;
inline constexpr TokenId kSepId = 4;
inline constexpr TokenId kSpecialCount = 5;
inline constexpr TokenId kFirstByteId = kSpecialCount;
inline constexpr std::size_t kByteAlphabet = 256;
inline constexpr std::size_t kBaseVocabSize = kSpecialCount + kByteAlphabet;

struct Merge {
  TokenId left;
  TokenId right;
  TokenId result;
  bool operator==(const Merge&) const = default;
};

// Shared byte-level BPE vocabulary.
//
// A space byte is never merged across: text is cut into chunks right before
// every space, so a space ends up as a marker glued to the front of the word
// that follows it. Merges are applied within chunks in the order learned.
// Immutable once built; encode/decode are safe to call concurrently.
class Vocabulary {
 public:
  // Specials and the 256 byte pieces, no merges.
  Vocabulary();

  std::size_t size() const { return pieces_.size(); }
  std::span<const Merge> merges() const { return merges_; }
  // Raw bytes of a piece; specials return their bracketed name.
  const std::string& piece(TokenId id) const;
  static bool is_special(TokenId id) { return id >= 0 && id < kSpecialCount; }
  static std::string_view special_name(TokenId id);
  std::optional<TokenId> find(std::string_view bytes) const;

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  // Line-oriented text form: version/count header, merges, special table.
  std::string serialize() const;
  static Vocabulary parse(std::string_view content);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  // FNV-1a over serialize(); used to bind checkpoints to a vocabulary.
  std::uint64_t hash() const;

  // Records a merge of two existing pieces. Returns the id of the merged
  // piece, which is new unless those bytes already have an id.
  TokenId add_merge(TokenId left, TokenId right);

 private:
  std::vector<TokenId> encode_chunk(std::string_view chunk) const;

  std::vector<std::string> pieces_;
  std::vector<Merge> merges_;
  std::unordered_map<std::string, TokenId> index_;
  std::unordered_map<std::uint64_t, std::size_t> merge_rank_;
};

// Splits text before every space byte; concatenating the chunks restores it.
std::vector<std::string_view> pretokenize(std::string_view text);

// Greedy BPE: repeatedly merges the most frequent adjacent pair (ties go to
// the lexicographically smaller (left, right) byte pair) until the
// vocabulary holds target_size ids or no pair occurs twice.
Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t target_size);

// Escaping used by the vocabulary file, exposed for tests.
std::string escape_piece(std::string_view bytes);
std::string unescape_piece(std::string_view escaped);

}  // namespace defgen
