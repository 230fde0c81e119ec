#include "defgen/eval_metrics.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include <json.hpp>

#include "defgen/error.hpp"
#include "defgen/text.hpp"

namespace defgen {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts count_ngrams(const std::vector<std::string>& tokens, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

BleuReport corpus_bleu(std::span<const std::string> hypotheses, std::span<const std::string> references) {
  if (hypotheses.size() != references.size()) {
    throw ContractError("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                        std::to_string(references.size()) + " references");
  }
  BleuReport r;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto hyp = text::split_whitespace(text::fold(hypotheses[s]));
    const auto ref = text::split_whitespace(text::fold(references[s]));
    r.hypothesis_length += hyp.size();
    r.reference_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const NgramCounts ref_counts = count_ngrams(ref, n);
      for (const auto& [gram, count] : count_ngrams(hyp, n)) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) r.matches[n - 1] += std::min(count, it->second);
      }
      if (hyp.size() >= n) r.totals[n - 1] += hyp.size() - n + 1;
    }
  }
  if (r.hypothesis_length == 0) return r;

  const double c = static_cast<double>(r.hypothesis_length), ref_len = static_cast<double>(r.reference_length);
  r.brevity_penalty = c < ref_len ? std::exp(1.0 - ref_len / c) : 1.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    const double m = static_cast<double>(r.matches[n]), t = static_cast<double>(r.totals[n]);
    r.precisions[n] = (n > 0 && r.matches[n] == 0) ? 1.0 / (t + 1.0) : m / t;
  }
  if (r.matches[0] == 0) return r;
  for (double p : r.precisions) log_sum += std::log(p);
  r.bleu = 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

NllTotal teacher_forced_nll(const Model& model, const Seq2SeqExample& example) {
  Graph g;
  const Var logits = model.forward(g, example.input, example.decoder_input);
  const Var loss = g.cross_entropy(logits, example.targets, kPadId, Reduction::Sum);
  NllTotal out;
  out.nll = g.value(loss)[0];
  for (TokenId t : example.targets) out.tokens += t != kPadId;
  return out;
}

double perplexity(std::span<const NllTotal> parts) {
  NllTotal total;
  for (const NllTotal& p : parts) {
    total.nll += p.nll;
    total.tokens += p.tokens;
  }
  if (total.tokens == 0) throw ContractError("perplexity of an empty token stream");
  return std::exp(total.nll / static_cast<double>(total.tokens));
}

double perplexity(const Model& model, std::span<const Seq2SeqExample> examples) {
  if (examples.empty()) throw ContractError("perplexity: no entries");
  std::vector<NllTotal> parts;
  parts.reserve(examples.size());
  for (const Seq2SeqExample& ex : examples) parts.push_back(teacher_forced_nll(model, ex));
  return perplexity(parts);
}

std::string format_eval_table(std::span<const EvalRow> rows) {
  bool any_delta = false;
  std::size_t name_width = 5;
  for (const EvalRow& row : rows) {
    any_delta = any_delta || row.delta_bleu.has_value();
    name_width = std::max(name_width, row.name.size());
  }
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(name_width) + 2) << "Model" << std::right << std::setw(10) << "PPL"
      << std::setw(10) << "BLEU";
  if (any_delta) out << std::setw(10) << "dBLEU";
  out << '\n' << std::fixed << std::setprecision(2);
  for (const EvalRow& row : rows) {
    out << std::left << std::setw(static_cast<int>(name_width) + 2) << row.name << std::right << std::setw(10)
        << row.report.ppl << std::setw(10) << row.report.bleu.bleu;
    if (any_delta) {
      if (row.delta_bleu) {
        std::ostringstream delta;
        delta << std::fixed << std::setprecision(2) << std::showpos << *row.delta_bleu;
        out << std::setw(10) << delta.str();
      } else {
        out << std::setw(10) << "-";
      }
    }
    out << '\n';
  }
  return out.str();
}

std::string eval_to_json(std::span<const EvalRow> rows) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const EvalRow& row : rows) {
    const BleuReport& b = row.report.bleu;
    nlohmann::ordered_json j = {{"model", row.name},
                                {"ppl", row.report.ppl},
                                {"bleu", b.bleu},
                                {"precisions", b.precisions},
                                {"brevity_penalty", b.brevity_penalty},
                                {"hypothesis_length", b.hypothesis_length},
                                {"reference_length", b.reference_length}};
    if (row.delta_bleu) j["delta_bleu"] = *row.delta_bleu;
    out.push_back(std::move(j));
  }
  return out.dump();
}

}  // namespace defgen
