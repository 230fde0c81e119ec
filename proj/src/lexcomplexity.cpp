#include "defgen/lexcomplexity.hpp"

#include <algorithm>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "defgen/error.hpp"
#include "defgen/text.hpp"

namespace defgen {

std::vector<std::string> tokenize_for_metrics(std::string_view input) {
  std::vector<std::string> out;
  for (const std::string& raw : text::split_whitespace(text::fold(input))) {
    std::size_t b = 0, e = raw.size();
    while (b < e && text::is_ascii_punct(static_cast<unsigned char>(raw[b]))) ++b;
    while (e > b && text::is_ascii_punct(static_cast<unsigned char>(raw[e - 1]))) --e;
    if (b < e) out.push_back(raw.substr(b, e - b));
  }
  return out;
}

namespace {

std::size_t count_lexical(std::span<const std::string> tokens, const WordList& function_words) {
  std::size_t n = 0;
  for (const std::string& t : tokens) n += !function_words.contains(t);
  return n;
}

std::size_t count_sophisticated(std::span<const std::string> tokens, const WordList& function_words,
                                const WordList& easy_words) {
  std::size_t n = 0;
  for (const std::string& t : tokens) n += !function_words.contains(t) && !easy_words.contains(t);
  return n;
}

std::size_t count_types(std::span<const std::string> tokens) {
  return std::set<std::string_view>(tokens.begin(), tokens.end()).size();
}

}  // namespace

double lexical_density(std::span<const std::string> tokens, const WordList& function_words) {
  if (tokens.empty()) throw ContractError("lexical density of an empty text");
  return static_cast<double>(count_lexical(tokens, function_words)) / static_cast<double>(tokens.size());
}

double lexical_sophistication(std::span<const std::string> tokens, const WordList& function_words,
                              const WordList& easy_words) {
  const std::size_t lexical = count_lexical(tokens, function_words);
  if (lexical == 0) throw ContractError("lexical sophistication needs at least one lexical token");
  return static_cast<double>(count_sophisticated(tokens, function_words, easy_words)) / static_cast<double>(lexical);
}

double ttr(std::span<const std::string> tokens) {
  if (tokens.empty()) throw ContractError("type/token ratio of an empty text");
  return static_cast<double>(count_types(tokens)) / static_cast<double>(tokens.size());
}

MsttrResult msttr_detail(std::span<const std::string> tokens, std::size_t segment_len) {
  if (tokens.empty()) throw ContractError("msttr of an empty text");
  if (segment_len == 0) throw ContractError("msttr segment length must be positive");
  MsttrResult r;
  if (tokens.size() < segment_len) {
    r.fallback = true;
    r.value = ttr(tokens);
    return r;
  }
  r.segments = tokens.size() / segment_len;
  for (std::size_t s = 0; s < r.segments; ++s) r.type_sum += count_types(tokens.subspan(s * segment_len, segment_len));
  r.value = static_cast<double>(r.type_sum) / static_cast<double>(r.segments * segment_len);
  return r;
}

double msttr(std::span<const std::string> tokens, std::size_t segment_len) {
  return msttr_detail(tokens, segment_len).value;
}

ComplexityReport complexity_report(std::span<const std::string> definitions, const WordList& function_words,
                                   const WordList& easy_words, std::size_t segment_len) {
  if (definitions.empty()) throw ContractError("complexity report of an empty corpus");
  std::vector<std::string> tokens;
  for (const std::string& d : definitions) {
    auto part = tokenize_for_metrics(d);
    tokens.insert(tokens.end(), part.begin(), part.end());
  }
  ComplexityReport r;
  r.ld = lexical_density(tokens, function_words);
  r.ls = lexical_sophistication(tokens, function_words, easy_words);
  r.ttr = ttr(tokens);
  const MsttrResult m = msttr_detail(tokens, segment_len);
  r.msttr = m.value;
  r.tokens = tokens.size();
  r.types = count_types(tokens);
  r.lexical = count_lexical(tokens, function_words);
  r.sophisticated = count_sophisticated(tokens, function_words, easy_words);
  r.segment_len = segment_len;
  r.segments = m.segments;
  r.segment_type_sum = m.type_sum;
  r.msttr_fallback = m.fallback;
  return r;
}

std::string format_complexity_table(std::span<const ComplexityRow> rows) {
  std::size_t width = 6;
  for (const ComplexityRow& row : rows) width = std::max(width, row.name.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width) + 2) << "System" << std::right << std::setw(8) << "LD"
      << std::setw(8) << "LS" << std::setw(8) << "TTR" << std::setw(8) << "MSTTR" << '\n'
      << std::fixed << std::setprecision(2);
  for (const ComplexityRow& row : rows) {
    const ComplexityReport& r = row.report;
    out << std::left << std::setw(static_cast<int>(width) + 2) << row.name << std::right << std::setw(8) << r.ld
        << std::setw(8) << r.ls << std::setw(8) << r.ttr << std::setw(8) << r.msttr;
    if (r.msttr_fallback) out << '*';
    out << '\n';
  }
  return out.str();
}

std::string complexity_to_json(std::span<const ComplexityRow> rows) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const ComplexityRow& row : rows) {
    const ComplexityReport& r = row.report;
    out.push_back({{"system", row.name},
                   {"ld", r.ld},
                   {"ls", r.ls},
                   {"ttr", r.ttr},
                   {"msttr", r.msttr},
                   {"tokens", r.tokens},
                   {"types", r.types},
                   {"lexical", r.lexical},
                   {"sophisticated", r.sophisticated},
                   {"segment_len", r.segment_len},
                   {"segments", r.segments},
                   {"msttr_fallback", r.msttr_fallback}});
  }
  return out.dump(2) + "\n";
}

}  // namespace defgen
