#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "defgen/config.hpp"
#include "defgen/model.hpp"
#include "defgen/tensor.hpp"
#include "defgen/tokenizer.hpp"

namespace defgen {

struct DecodeConfig {
  std::size_t max_len = 48;  // output tokens, EOS excluded
  std::size_t beam_size = 5;
  double length_penalty = 0.6;

  void validate() const;
  bool operator==(const DecodeConfig&) const = default;
};

bool apply_decode_setting(DecodeConfig& config, std::string_view key, std::string_view value);
ConfigMap to_config_map(const DecodeConfig& config);

// Next-token log-probabilities given a prefix that starts with BOS.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::vector<double> log_probs(std::span<const TokenId> prefix) = 0;
};

// Scores with a model and a fixed encoder input. The memory is computed once;
// each call reruns the decoder over the prefix.
class ModelStepScorer : public StepScorer {
 public:
  ModelStepScorer(const Model& model, const EncodedInput& input);
  std::size_t vocab_size() const override { return model_.config().vocab_size; }
  std::vector<double> log_probs(std::span<const TokenId> prefix) override;

 private:
  const Model& model_;
  Tensor memory_;
  std::vector<std::uint8_t> keep_;
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // without BOS/EOS
  double log_prob = 0.0;        // includes the EOS step when it ended on EOS
  double score = 0.0;           // length-normalized
  bool ended = false;           // true if EOS was produced

  bool operator==(const Hypothesis&) const = default;
};

// logp / ((5 + len) / 6)^alpha
double normalized_score(double log_prob, std::size_t length, double alpha);

// PAD, UNK, BOS and SEP are never produced. A hypothesis either ends with EOS
// before max_len tokens, or is cut at exactly max_len tokens with no EOS
// step scored.
Hypothesis greedy_decode(StepScorer& scorer, const DecodeConfig& config);

// Keeps beam_size live hypotheses. Each step ranks all one-token extensions
// by log-prob (ties: lexicographic tokens); EOS extensions ranked above the
// last kept live one become finished. Stops when beam_size hypotheses have
// finished or live ones reach max_len. Returns the n-best (at most
// beam_size) by normalized score, ties lexicographic.
std::vector<Hypothesis> beam_decode(StepScorer& scorer, const DecodeConfig& config);

struct Generation {
  std::string definition;
  std::vector<TokenId> tokens;
  double log_prob = 0.0;
};

// Builds the input, decodes with beam search (greedy when beam_size == 1),
// and detokenizes. max_len is capped so the prefix fits max_positions.
Generation generate_definition(const Model& model, const Vocabulary& vocab, std::string_view word,
                               std::string_view example, const DecodeConfig& config);

}  // namespace defgen
