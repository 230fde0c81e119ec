#include "defgen/synth.hpp"

#include <array>
#include <map>
#include <set>
#include <string_view>

#include "defgen/error.hpp"
#include "defgen/rng.hpp"
#include "defgen/text.hpp"

namespace defgen {

namespace {

using Slots = std::map<std::string, std::vector<std::string>>;

const Slots& slot_values() {
  static const Slots slots = {
      {"size", {"small", "large", "tiny", "huge", "young", "old"}},
      {"place", {"forest", "river", "desert", "mountain", "field", "cave", "sea", "garden"}},
      {"food", {"grass", "fish", "fruit", "insects", "seeds", "leaves"}},
      {"material", {"metal", "wooden", "glass", "stone", "plastic", "iron"}},
      {"action", {"cut", "lift", "clean", "open", "hold", "break"}},
      {"object", {"wood", "paper", "doors", "bread", "rope", "stones", "boxes"}},
      {"manner", {"quickly", "slowly", "quietly", "carefully", "happily"}},
      {"color", {"red", "blue", "green", "yellow", "white", "black"}},
      {"texture", {"soft", "hard", "smooth", "rough", "warm", "cold"}},
      {"emotion", {"happy", "sad", "angry", "afraid", "tired", "proud"}},
      {"event", {"work", "a storm", "a party", "the game", "a long trip", "dinner"}},
  };
  return slots;
}

struct WordClass {
  std::string suffix;
  std::string definition;
  std::string example_a;
  std::string example_b;
};

const std::vector<WordClass>& word_classes() {
  static const std::vector<WordClass> classes = {
      {"rak", "a {size} animal that lives in the {place} and eats {food}",
       "the {size} {word} hid in the {place} eating {food}", "το {size} {word} κρυφτηκε στο {place} με {food}"},
      {"ine", "a {material} tool used to {action} {object}", "she used the {material} {word} to {action} the {object}",
       "χρησιμοποιησε το {material} {word} για {action} {object}"},
      {"ify", "to move {manner} towards a {place}", "they {word} {manner} to the {place} every day",
       "αυτοι {word} {manner} στο {place} καθε μερα"},
      {"ous", "having a {color} color and a {texture} surface", "the {object} looked {word} , {color} and {texture}",
       "το {object} ηταν {word} , {color} και {texture}"},
      {"ment", "a feeling of being {emotion} after {event}", "his {word} came from being {emotion} after {event}",
       "η {word} του ηρθε {emotion} μετα {event}"},
  };
  return classes;
}

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";

// Latin letter to Greek letter, one code point each.
std::string to_greek(std::string_view latin) {
  static const std::map<char, std::string> table = {
      {'a', "α"}, {'b', "β"}, {'c', "κ"}, {'d', "δ"}, {'e', "ε"}, {'f', "φ"}, {'g', "γ"}, {'h', "χ"}, {'i', "ι"},
      {'j', "ι"}, {'k', "κ"}, {'l', "λ"}, {'m', "μ"}, {'n', "ν"}, {'o', "ο"}, {'p', "π"}, {'q', "κ"}, {'r', "ρ"},
      {'s', "σ"}, {'t', "τ"}, {'u', "υ"}, {'v', "β"}, {'w', "ω"}, {'x', "ξ"}, {'y', "υ"}, {'z', "ζ"}};
  std::string out;
  for (char c : latin) {
    auto it = table.find(c);
    out += it == table.end() ? std::string(1, c) : it->second;
  }
  return out;
}

std::string fill(const std::string& pattern, const std::map<std::string, std::string>& values) {
  std::string out;
  std::size_t i = 0;
  while (i < pattern.size()) {
    if (pattern[i] == '{') {
      const std::size_t close = pattern.find('}', i);
      out += values.at(pattern.substr(i + 1, close - i - 1));
      i = close + 1;
    } else {
      out += pattern[i++];
    }
  }
  return out;
}

std::vector<std::string> slot_names(const std::string& pattern) {
  std::vector<std::string> names;
  for (std::size_t i = pattern.find('{'); i != std::string::npos; i = pattern.find('{', i + 1)) {
    const std::string name = pattern.substr(i + 1, pattern.find('}', i) - i - 1);
    if (name != "word") names.push_back(name);
  }
  return names;
}

}  // namespace

std::vector<DefinitionEntry> synth_entries(const SynthOptions& options) {
  if (options.max_senses == 0) throw ContractError("synth: max_senses must be positive");
  Rng rng(options.seed);
  const bool greek = options.language == SynthLanguage::B;
  std::set<std::string> used;
  std::vector<DefinitionEntry> entries;
  while (entries.size() < options.entries) {
    const WordClass& cls = word_classes()[rng.below(word_classes().size())];
    std::string root;
    do {
      root.clear();
      const std::size_t syllables = 2 + rng.below(2);
      for (std::size_t s = 0; s < syllables; ++s) {
        root += kConsonants[rng.below(kConsonants.size())];
        root += kVowels[rng.below(kVowels.size())];
      }
    } while (used.contains(root));
    used.insert(root);
    const std::string latin_word = root + cls.suffix;
    const std::string word = greek ? to_greek(latin_word) : latin_word;

    const std::size_t senses = 1 + rng.below(options.max_senses);
    for (std::size_t s = 0; s < senses && entries.size() < options.entries; ++s) {
      std::map<std::string, std::string> values;
      for (const std::string& name : slot_names(cls.definition)) {
        const auto& choices = slot_values().at(name);
        values[name] = choices[rng.below(choices.size())];
      }
      const std::string& example_pattern = greek ? cls.example_b : cls.example_a;
      for (const std::string& name : slot_names(example_pattern)) {
        if (!values.contains(name)) {
          const auto& choices = slot_values().at(name);
          values[name] = choices[rng.below(choices.size())];
        }
      }
      std::map<std::string, std::string> example_values;
      for (const auto& [name, value] : values) example_values[name] = greek ? to_greek(value) : value;
      example_values["word"] = word;
      entries.push_back({word, fill(example_pattern, example_values), fill(cls.definition, values),
                         greek ? "synth-b" : "synth-a"});
    }
  }
  return entries;
}

std::vector<std::string> synth_defining_words() {
  std::set<std::string> words;
  for (const WordClass& cls : word_classes()) {
    std::map<std::string, std::string> blanks;
    for (const std::string& name : slot_names(cls.definition)) blanks[name] = "";
    for (const std::string& w : text::split_whitespace(fill(cls.definition, blanks))) words.insert(w);
  }
  for (const auto& [name, values] : slot_values()) {
    for (const std::string& v : values)
      for (const std::string& w : text::split_whitespace(v)) words.insert(w);
  }
  return {words.begin(), words.end()};
}

}  // namespace defgen
