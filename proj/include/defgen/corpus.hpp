#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace defgen {

// One (headword, example sentence, definition, language) record.
struct DefinitionEntry {
  std::string word;
  std::string example;
  std::string definition;
  std::string lang;

  bool operator==(const DefinitionEntry&) const = default;
};

// Throws SchemaError unless all fields are non-empty and the example contains
// the word (ASCII case-folded).
void validate_entry(const DefinitionEntry& entry);

// One JSON object per line with string fields word/example/definition/lang.
// Blank lines are skipped; order is preserved.
std::vector<DefinitionEntry> parse_entries(std::string_view content);
std::vector<DefinitionEntry> load_entries(const std::filesystem::path& path);
std::string serialize_entries(std::span<const DefinitionEntry> entries);
void store_entries(const std::filesystem::path& path, std::span<const DefinitionEntry> entries);

struct DatasetSplit {
  std::vector<DefinitionEntry> train;
  std::vector<DefinitionEntry> valid;
  std::vector<DefinitionEntry> test;
};

// Word-disjoint split. Headwords are taken in first-appearance order, shuffled
// with Rng(seed), and cut into consecutive runs: valid and test get
// round(n * ratio) words each (at least one when n >= 3, and never so many
// that train is left empty), train gets the rest. Entries keep input order
// within each part.
DatasetSplit split_by_word(std::span<const DefinitionEntry> entries, std::array<double, 3> ratios,
                           std::uint64_t seed);

// Case-folded word set read from a one-word-per-line file ('#' starts a comment).
class WordList {
 public:
  WordList() = default;
  explicit WordList(std::string name) : name_(std::move(name)) {}
  WordList(std::string name, std::span<const std::string> words);

  static WordList parse(std::string_view content, std::string name);
  static WordList load(const std::filesystem::path& path);

  const std::string& name() const { return name_; }
  std::size_t size() const { return words_.size(); }
  bool empty() const { return words_.empty(); }
  void add(std::string_view word);
  // Expects an already folded token.
  bool contains(std::string_view folded) const { return words_.contains(std::string(folded)); }
  const std::set<std::string>& words() const { return words_; }

 private:
  std::string name_;
  std::set<std::string> words_;
};

struct DroppedEntry {
  DefinitionEntry entry;
  std::string witness;  // first definition token outside the allowed lists
};

struct FilterResult {
  std::vector<DefinitionEntry> kept;
  std::vector<DroppedEntry> dropped;
};

// Definition tokens for the vocabulary check: whitespace split, leading and
// trailing ASCII punctuation stripped, ASCII-folded. Tokens without a letter
// (numerals, bare punctuation) are omitted since they always pass.
std::vector<std::string> defining_tokens(std::string_view definition);

// First definition token found in neither list, if any.
std::optional<std::string> disallowed_token(std::string_view definition, const WordList& allow,
                                            const WordList& function_words);

// Keeps an entry iff every alphabetic definition token is in allow or
// function_words. Dropped entries carry their witness token.
FilterResult filter_by_defining_vocabulary(std::span<const DefinitionEntry> entries, const WordList& allow,
                                           const WordList& function_words);

struct DatasetStats {
  std::size_t words = 0;
  std::size_t entries = 0;
  double avg_example_len = 0.0;
  double avg_definition_len = 0.0;
};

// Lengths use text::length_units; averages are rounded to two decimals.
DatasetStats dataset_stats(std::span<const DefinitionEntry> entries);

std::string format_stats_table(std::span<const std::pair<std::string, DatasetStats>> rows);
std::string stats_to_json(std::span<const std::pair<std::string, DatasetStats>> rows);

}  // namespace defgen
