#include "defgen/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "defgen/error.hpp"

namespace defgen {

void DecodeConfig::validate() const {
  if (max_len < 1) throw ContractError("decode config: max_len must be at least 1");
  if (beam_size < 1) throw ContractError("decode config: beam_size must be at least 1");
  if (!(length_penalty >= 0.0)) throw ContractError("decode config: length_penalty must be non-negative");
}

bool apply_decode_setting(DecodeConfig& c, std::string_view key, std::string_view value) {
  if (key == "max_len") c.max_len = config_size(key, value);
  else if (key == "beam_size") c.beam_size = config_size(key, value);
  else if (key == "length_penalty") c.length_penalty = config_double(key, value);
  else return false;
  return true;
}

ConfigMap to_config_map(const DecodeConfig& c) {
  return {{"max_len", std::to_string(c.max_len)},
          {"beam_size", std::to_string(c.beam_size)},
          {"length_penalty", format_double(c.length_penalty)}};
}

ModelStepScorer::ModelStepScorer(const Model& model, const EncodedInput& input)
    : model_(model), keep_(input.key_mask()) {
  Graph g;
  memory_ = g.value(model.memory(g, input));
}

std::vector<double> ModelStepScorer::log_probs(std::span<const TokenId> prefix) {
  Graph g;
  const Tensor& logits = g.value(model_.decode_logits(g, g.input(memory_), keep_, prefix));
  const auto last = logits.row(logits.rows() - 1);
  const double max = *std::max_element(last.begin(), last.end());
  double z = 0.0;
  for (double v : last) z += std::exp(v - max);
  const double log_z = max + std::log(z);
  std::vector<double> out(last.begin(), last.end());
  for (double& v : out) v -= log_z;
  return out;
}

double normalized_score(double log_prob, std::size_t length, double alpha) {
  if (alpha == 0.0) return log_prob;
  return log_prob / std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

namespace {

bool producible(TokenId id) { return id == kEosId || !Vocabulary::is_special(id); }

std::vector<double> checked_log_probs(StepScorer& scorer, std::span<const TokenId> prefix) {
  std::vector<double> lp = scorer.log_probs(prefix);
  if (lp.size() != scorer.vocab_size()) throw DimensionError("scorer returned a distribution of the wrong size");
  return lp;
}

std::vector<TokenId> with_bos(const std::vector<TokenId>& tokens) {
  std::vector<TokenId> prefix;
  prefix.reserve(tokens.size() + 1);
  prefix.push_back(kBosId);
  prefix.insert(prefix.end(), tokens.begin(), tokens.end());
  return prefix;
}

}  // namespace

Hypothesis greedy_decode(StepScorer& scorer, const DecodeConfig& config) {
  config.validate();
  Hypothesis h;
  while (h.tokens.size() < config.max_len) {
    const std::vector<double> lp = checked_log_probs(scorer, with_bos(h.tokens));
    TokenId best = -1;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      const auto id = static_cast<TokenId>(v);
      if (producible(id) && (best < 0 || lp[v] > lp[static_cast<std::size_t>(best)])) best = id;
    }
    h.log_prob += lp[static_cast<std::size_t>(best)];
    if (best == kEosId) {
      h.ended = true;
      break;
    }
    h.tokens.push_back(best);
  }
  h.score = normalized_score(h.log_prob, h.tokens.size(), config.length_penalty);
  return h;
}

std::vector<Hypothesis> beam_decode(StepScorer& scorer, const DecodeConfig& config) {
  config.validate();
  const std::size_t k = config.beam_size;
  std::vector<Hypothesis> live(1), finished;

  struct Candidate {
    std::size_t parent;
    TokenId token;
    double log_prob;
  };
  auto extended = [&](const Candidate& c) {
    std::vector<TokenId> t = live[c.parent].tokens;
    t.push_back(c.token);
    return t;
  };

  for (std::size_t step = 0; step < config.max_len && !live.empty() && finished.size() < k; ++step) {
    std::vector<Candidate> candidates;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const std::vector<double> lp = checked_log_probs(scorer, with_bos(live[i].tokens));
      for (std::size_t v = 0; v < lp.size(); ++v) {
        const auto id = static_cast<TokenId>(v);
        if (producible(id)) candidates.push_back({i, id, live[i].log_prob + lp[v]});
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      return extended(a) < extended(b);
    });
    std::vector<Hypothesis> next;
    for (const Candidate& c : candidates) {
      if (next.size() == k) break;
      Hypothesis h;
      h.tokens = live[c.parent].tokens;
      h.log_prob = c.log_prob;
      if (c.token == kEosId) {
        h.ended = true;
        h.score = normalized_score(h.log_prob, h.tokens.size(), config.length_penalty);
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(c.token);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  for (Hypothesis& h : live) {
    if (h.tokens.size() == config.max_len) {
      h.score = normalized_score(h.log_prob, h.tokens.size(), config.length_penalty);
      finished.push_back(std::move(h));
    }
  }
  std::stable_sort(finished.begin(), finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  });
  if (finished.size() > k) finished.resize(k);
  return finished;
}

Generation generate_definition(const Model& model, const Vocabulary& vocab, std::string_view word,
                               std::string_view example, const DecodeConfig& config) {
  const EncodedInput input = build_input(word, example, vocab, model.config().max_positions);
  ModelStepScorer scorer(model, input);
  DecodeConfig capped = config;
  capped.max_len = std::min(config.max_len, model.config().max_positions);
  const Hypothesis best = config.beam_size == 1 ? greedy_decode(scorer, capped) : beam_decode(scorer, capped).at(0);
  return {vocab.decode(best.tokens), best.tokens, best.log_prob};
}

}  // namespace defgen
