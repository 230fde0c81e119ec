#include "defgen/corpus.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "defgen/error.hpp"
#include "defgen/io.hpp"
#include "defgen/rng.hpp"
#include "defgen/text.hpp"

namespace defgen {

using json = nlohmann::ordered_json;

void validate_entry(const DefinitionEntry& entry) {
  if (entry.word.empty()) throw SchemaError("entry has an empty word");
  if (entry.example.empty()) throw SchemaError("entry for '" + entry.word + "' has an empty example");
  if (entry.definition.empty()) throw SchemaError("entry for '" + entry.word + "' has an empty definition");
  if (entry.lang.empty()) throw SchemaError("entry for '" + entry.word + "' has an empty lang tag");
  if (text::fold(entry.example).find(text::fold(entry.word)) == std::string::npos) {
    throw SchemaError("example for '" + entry.word + "' does not contain the word");
  }
}

std::vector<DefinitionEntry> parse_entries(std::string_view content) {
  std::vector<DefinitionEntry> entries;
  std::istringstream in{std::string(content)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    const std::string where = "line " + std::to_string(lineno);
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(where + ": malformed record (" + e.what() + ")");
    }
    if (!record.is_object()) throw ParseError(where + ": record is not an object");
    auto field = [&](const char* name) {
      auto it = record.find(name);
      if (it == record.end()) throw SchemaError(where + ": missing field \"" + name + "\"");
      if (!it->is_string()) throw SchemaError(where + ": field \"" + name + "\" is not a string");
      return it->get<std::string>();
    };
    DefinitionEntry e{field("word"), field("example"), field("definition"), field("lang")};
    try {
      validate_entry(e);
    } catch (const SchemaError& err) {
      throw SchemaError(where + ": " + err.what());
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<DefinitionEntry> load_entries(const std::filesystem::path& path) {
  return parse_entries(io::read_file(path));
}

std::string serialize_entries(std::span<const DefinitionEntry> entries) {
  std::string out;
  for (const DefinitionEntry& e : entries) {
    json record;
    record["word"] = e.word;
    record["example"] = e.example;
    record["definition"] = e.definition;
    record["lang"] = e.lang;
    out += record.dump();
    out += '\n';
  }
  return out;
}

void store_entries(const std::filesystem::path& path, std::span<const DefinitionEntry> entries) {
  io::write_file_atomic(path, serialize_entries(entries));
}

DatasetSplit split_by_word(std::span<const DefinitionEntry> entries, std::array<double, 3> ratios,
                           std::uint64_t seed) {
  double total = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw ContractError("split ratios must be positive");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("split ratios must sum to 1");

  std::vector<std::string> words;
  std::unordered_set<std::string> seen;
  for (const DefinitionEntry& e : entries) {
    if (seen.insert(e.word).second) words.push_back(e.word);
  }
  if (words.empty()) throw ContractError("cannot split a dataset with no headwords");

  Rng rng(seed);
  rng.shuffle(words);

  const std::size_t n = words.size();
  std::array<std::size_t, 3> counts{};
  for (std::size_t part = 1; part < 3; ++part) {
    counts[part] = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios[part]));
    if (n >= 3) counts[part] = std::max<std::size_t>(counts[part], 1);
  }
  while (counts[1] + counts[2] > n - 1) {
    if (counts[2] >= counts[1]) --counts[2];
    else --counts[1];
  }
  counts[0] = n - counts[1] - counts[2];

  std::unordered_map<std::string, int> part_of;
  std::size_t cursor = 0;
  for (int part = 0; part < 3; ++part) {
    for (std::size_t i = 0; i < counts[static_cast<std::size_t>(part)]; ++i) part_of[words[cursor++]] = part;
  }

  DatasetSplit split;
  for (const DefinitionEntry& e : entries) {
    switch (part_of.at(e.word)) {
      case 0: split.train.push_back(e); break;
      case 1: split.valid.push_back(e); break;
      default: split.test.push_back(e); break;
    }
  }
  return split;
}

WordList::WordList(std::string name, std::span<const std::string> words) : name_(std::move(name)) {
  for (const std::string& w : words) add(w);
}

void WordList::add(std::string_view word) {
  const std::string w = text::trim(word);
  if (!w.empty()) words_.insert(text::fold(w));
}

WordList WordList::parse(std::string_view content, std::string name) {
  WordList list(std::move(name));
  std::istringstream in{std::string(content)};
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    list.add(line);
  }
  return list;
}

WordList WordList::load(const std::filesystem::path& path) { return parse(io::read_file(path), path.stem().string()); }

std::vector<std::string> defining_tokens(std::string_view definition) {
  std::vector<std::string> out;
  for (const std::string& raw : text::split_whitespace(definition)) {
    std::size_t b = 0, e = raw.size();
    while (b < e && text::is_ascii_punct(static_cast<unsigned char>(raw[b]))) ++b;
    while (e > b && text::is_ascii_punct(static_cast<unsigned char>(raw[e - 1]))) --e;
    const std::string token = text::fold(std::string_view(raw).substr(b, e - b));
    bool has_letter = false;
    for (unsigned char c : token) has_letter = has_letter || text::is_ascii_alpha(c) || c >= 0x80;
    if (has_letter) out.push_back(token);
  }
  return out;
}

std::optional<std::string> disallowed_token(std::string_view definition, const WordList& allow,
                                            const WordList& function_words) {
  for (const std::string& token : defining_tokens(definition)) {
    if (!allow.contains(token) && !function_words.contains(token)) return token;
  }
  return std::nullopt;
}

FilterResult filter_by_defining_vocabulary(std::span<const DefinitionEntry> entries, const WordList& allow,
                                           const WordList& function_words) {
  if (allow.empty() || function_words.empty()) throw ContractError("defining-vocabulary lists must be non-empty");
  FilterResult result;
  for (const DefinitionEntry& e : entries) {
    if (auto witness = disallowed_token(e.definition, allow, function_words)) {
      result.dropped.push_back({e, *witness});
    } else {
      result.kept.push_back(e);
    }
  }
  return result;
}

DatasetStats dataset_stats(std::span<const DefinitionEntry> entries) {
  DatasetStats stats;
  if (entries.empty()) return stats;
  std::unordered_set<std::string> words;
  std::size_t example_units = 0, definition_units = 0;
  for (const DefinitionEntry& e : entries) {
    words.insert(e.word);
    example_units += text::length_units(e.example);
    definition_units += text::length_units(e.definition);
  }
  auto avg2 = [&](std::size_t units) {
    return std::round(static_cast<double>(units) / static_cast<double>(entries.size()) * 100.0) / 100.0;
  };
  stats.words = words.size();
  stats.entries = entries.size();
  stats.avg_example_len = avg2(example_units);
  stats.avg_definition_len = avg2(definition_units);
  return stats;
}

std::string format_stats_table(std::span<const std::pair<std::string, DatasetStats>> rows) {
  std::ostringstream out;
  out << std::left << std::setw(10) << "Dataset" << std::right << std::setw(10) << "Words" << std::setw(10)
      << "Entries" << std::setw(8) << "Exp." << std::setw(8) << "Def." << '\n';
  out << std::fixed << std::setprecision(2);
  for (const auto& [name, s] : rows) {
    out << std::left << std::setw(10) << name << std::right << std::setw(10) << s.words << std::setw(10) << s.entries
        << std::setw(8) << s.avg_example_len << std::setw(8) << s.avg_definition_len << '\n';
  }
  return out.str();
}

std::string stats_to_json(std::span<const std::pair<std::string, DatasetStats>> rows) {
  json out = json::array();
  for (const auto& [name, s] : rows) {
    out.push_back({{"dataset", name},
                   {"words", s.words},
                   {"entries", s.entries},
                   {"avg_example_len", s.avg_example_len},
                   {"avg_definition_len", s.avg_definition_len}});
  }
  return out.dump();
}

}  // namespace defgen
