#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "defgen/corpus.hpp"

namespace defgen {

// Synthetic dictionaries for tests, fixtures and the acceptance runs.
//
// Headwords are invented, built from syllables plus a suffix that fixes the
// word class. Each entry's definition fills a class template from small slot
// lists, and its example sentence carries a cue word for every slot, so a
// model can in principle infer a held-out definition from the word and the
// example. Language B spells headwords and examples in Greek letters with its
// own function words; definitions stay in the plain English-like target
// language, which is what cross-lingual generation needs.
enum class SynthLanguage { A, B };

struct SynthOptions {
  std::size_t entries = 100;
  std::uint64_t seed = 1;
  SynthLanguage language = SynthLanguage::A;
  // Entries per headword are drawn uniformly from 1..max_senses.
  std::size_t max_senses = 1;
};

std::vector<DefinitionEntry> synth_entries(const SynthOptions& options);

// Every word any synthetic definition can contain, for filter tests.
std::vector<std::string> synth_defining_words();

}  // namespace defgen
