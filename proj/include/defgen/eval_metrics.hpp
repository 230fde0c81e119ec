#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "defgen/model.hpp"

namespace defgen {

struct BleuReport {
  double bleu = 0.0;  // 0..100
  std::array<double, 4> precisions{};
  double brevity_penalty = 0.0;
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

// Corpus BLEU-4 against one reference per hypothesis, on ASCII-folded
// whitespace tokens. Clipped n-gram counts are pooled over the corpus; an
// n >= 2 precision with zero matches becomes 1 / (total + 1). Brevity penalty
// exp(1 - r/c) when c < r. No unigram match, or no hypothesis tokens, gives 0.
// ContractError if the lists differ in length.
BleuReport corpus_bleu(std::span<const std::string> hypotheses, std::span<const std::string> references);

// Summed negative log-likelihood over a token count.
struct NllTotal {
  double nll = 0.0;
  std::size_t tokens = 0;
};

// Teacher-forced NLL of the definition tokens plus EOS.
NllTotal teacher_forced_nll(const Model& model, const Seq2SeqExample& example);

// exp(sum nll / sum tokens); ContractError when there are no tokens.
double perplexity(std::span<const NllTotal> parts);
double perplexity(const Model& model, std::span<const Seq2SeqExample> examples);

struct EvalReport {
  double ppl = 0.0;
  BleuReport bleu;
};

struct EvalRow {
  std::string name;
  EvalReport report;
  std::optional<double> delta_bleu;  // against a baseline row
};

// Columns: Model, PPL, BLEU, and ΔBLEU when any row carries one.
std::string format_eval_table(std::span<const EvalRow> rows);
std::string eval_to_json(std::span<const EvalRow> rows);

}  // namespace defgen
