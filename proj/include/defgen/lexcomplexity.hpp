#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "defgen/corpus.hpp"

namespace defgen {

// Whitespace split after ASCII case folding; ASCII punctuation is stripped
// from both ends of each token and tokens left empty are dropped.
std::vector<std::string> tokenize_for_metrics(std::string_view text);

// Share of tokens outside function_words. ContractError on no tokens.
double lexical_density(std::span<const std::string> tokens, const WordList& function_words);

// Share of lexical (non-function) tokens outside easy_words. ContractError
// when there are no lexical tokens.
double lexical_sophistication(std::span<const std::string> tokens, const WordList& function_words,
                              const WordList& easy_words);

double ttr(std::span<const std::string> tokens);

struct MsttrResult {
  double value = 0.0;
  std::size_t segments = 0;      // full segments used; the remainder is dropped
  std::size_t type_sum = 0;      // sum of per-segment type counts
  bool fallback = false;         // fewer tokens than one segment: plain TTR
};

MsttrResult msttr_detail(std::span<const std::string> tokens, std::size_t segment_len = 50);
double msttr(std::span<const std::string> tokens, std::size_t segment_len = 50);

struct ComplexityReport {
  double ld = 0.0;
  double ls = 0.0;
  double ttr = 0.0;
  double msttr = 0.0;
  std::size_t tokens = 0;
  std::size_t types = 0;
  std::size_t lexical = 0;
  std::size_t sophisticated = 0;
  std::size_t segment_len = 50;
  std::size_t segments = 0;
  std::size_t segment_type_sum = 0;
  bool msttr_fallback = false;
};

// All four measures over the pooled tokens of every definition.
ComplexityReport complexity_report(std::span<const std::string> definitions, const WordList& function_words,
                                   const WordList& easy_words, std::size_t segment_len = 50);

struct ComplexityRow {
  std::string name;
  ComplexityReport report;
};

// Columns LD, LS, TTR, MSTTR; a '*' after MSTTR marks the short-text fallback.
std::string format_complexity_table(std::span<const ComplexityRow> rows);
std::string complexity_to_json(std::span<const ComplexityRow> rows);

}  // namespace defgen
