#include "defgen/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "defgen/error.hpp"
#include "defgen/io.hpp"
#include "defgen/text.hpp"

namespace defgen {

namespace {

constexpr std::string_view kFormatTag = "defgen-vocab v1";
constexpr std::string_view kSpaceMarker = "\xE2\x96\x81";  // U+2581
constexpr std::array<std::string_view, kSpecialCount> kSpecialNames = {"[PAD]", "[UNK]", "[BOS]", "[EOS]", "[SEP]"};

std::uint64_t pair_key(TokenId left, TokenId right) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) | static_cast<std::uint32_t>(right);
}

void append_hex(std::string& out, unsigned char c) {
  static constexpr char kDigits[] = "0123456789ABCDEF";
  out += "\\x";
  out += kDigits[c >> 4];
  out += kDigits[c & 0xF];
}

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

std::string escape_piece(std::string_view bytes) {
  std::string out;
  for (std::size_t i = 0; i < bytes.size();) {
    const auto c = static_cast<unsigned char>(bytes[i]);
    if (c == ' ') {
      out += kSpaceMarker;
      ++i;
    } else if (c == '\\') {
      out += "\\\\";
      ++i;
    } else if (c == '#' || c < 0x21 || c == 0x7F) {
      append_hex(out, c);
      ++i;
    } else if (c < 0x80) {
      out += static_cast<char>(c);
      ++i;
    } else {
      const std::size_t len = text::utf8_sequence_length(bytes, i);
      if (len == 0) {
        append_hex(out, c);
        ++i;
        continue;
      }
      const std::string_view seq = bytes.substr(i, len);
      if (seq == kSpaceMarker) {
        for (char b : seq) append_hex(out, static_cast<unsigned char>(b));
      } else {
        out += seq;
      }
      i += len;
    }
  }
  return out;
}

std::string unescape_piece(std::string_view escaped) {
  std::string out;
  for (std::size_t i = 0; i < escaped.size();) {
    if (escaped.substr(i, kSpaceMarker.size()) == kSpaceMarker) {
      out += ' ';
      i += kSpaceMarker.size();
    } else if (escaped[i] == '\\') {
      if (i + 1 < escaped.size() && escaped[i + 1] == '\\') {
        out += '\\';
        i += 2;
      } else if (i + 3 < escaped.size() && escaped[i + 1] == 'x' && hex_value(escaped[i + 2]) >= 0 &&
                 hex_value(escaped[i + 3]) >= 0) {
        out += static_cast<char>(hex_value(escaped[i + 2]) * 16 + hex_value(escaped[i + 3]));
        i += 4;
      } else {
        throw ParseError("bad escape in vocabulary piece '" + std::string(escaped) + "'");
      }
    } else {
      out += escaped[i++];
    }
  }
  return out;
}

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t start = 0;
  for (std::size_t i = 1; i < text.size(); ++i) {
    if (text[i] == ' ') {
      chunks.push_back(text.substr(start, i - start));
      start = i;
    }
  }
  if (start < text.size()) chunks.push_back(text.substr(start));
  return chunks;
}

Vocabulary::Vocabulary() {
  pieces_.reserve(kBaseVocabSize);
  for (auto name : kSpecialNames) pieces_.emplace_back(name);
  for (std::size_t b = 0; b < kByteAlphabet; ++b) {
    pieces_.emplace_back(1, static_cast<char>(b));
    index_.emplace(pieces_.back(), static_cast<TokenId>(pieces_.size() - 1));
  }
}

const std::string& Vocabulary::piece(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
    throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                     std::to_string(pieces_.size()));
  }
  return pieces_[static_cast<std::size_t>(id)];
}

std::string_view Vocabulary::special_name(TokenId id) {
  if (!is_special(id)) throw IndexError("not a special id: " + std::to_string(id));
  return kSpecialNames[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view bytes) const {
  auto it = index_.find(std::string(bytes));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::add_merge(TokenId left, TokenId right) {
  if (is_special(left) || is_special(right)) throw ContractError("merges cannot involve special tokens");
  std::string merged = piece(left) + piece(right);
  TokenId result;
  if (auto it = index_.find(merged); it != index_.end()) {
    result = it->second;
  } else {
    result = static_cast<TokenId>(pieces_.size());
    pieces_.push_back(merged);
    index_.emplace(std::move(merged), result);
  }
  const std::uint64_t key = pair_key(left, right);
  if (merge_rank_.contains(key)) throw ContractError("duplicate merge");
  merge_rank_.emplace(key, merges_.size());
  merges_.push_back({left, right, result});
  return result;
}

std::vector<TokenId> Vocabulary::encode_chunk(std::string_view chunk) const {
  std::vector<TokenId> symbols;
  symbols.reserve(chunk.size());
  for (char c : chunk) symbols.push_back(kFirstByteId + static_cast<unsigned char>(c));
  while (symbols.size() > 1) {
    std::size_t best_rank = merges_.size();
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find(pair_key(symbols[i], symbols[i + 1]));
      if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == merges_.size()) break;
    const Merge& m = merges_[best_rank];
    std::vector<TokenId> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == m.left && symbols[i + 1] == m.right) {
        next.push_back(m.result);
        i += 2;
      } else {
        next.push_back(symbols[i++]);
      }
    }
    symbols.swap(next);
  }
  return symbols;
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (std::string_view chunk : pretokenize(text)) {
    auto part = encode_chunk(chunk);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    const std::string& p = piece(id);
    if (!is_special(id)) out += p;
  }
  return out;
}

std::string Vocabulary::serialize() const {
  std::ostringstream out;
  out << kFormatTag << " size=" << pieces_.size() << " merges=" << merges_.size() << " specials=" << kSpecialCount
      << '\n';
  out << "# whitespace: a space byte is written as U+2581 and is the first byte of the word after it\n";
  for (const Merge& m : merges_) out << escape_piece(piece(m.left)) << ' ' << escape_piece(piece(m.right)) << '\n';
  for (TokenId id = 0; id < kSpecialCount; ++id) out << "special " << id << ' ' << kSpecialNames[id] << '\n';
  return out.str();
}

namespace {

std::size_t header_count(std::string_view header, std::string_view key) {
  const std::string needle = std::string(key) + "=";
  const auto pos = header.find(needle);
  if (pos == std::string_view::npos) throw ParseError("vocabulary header lacks '" + std::string(key) + "'");
  std::size_t value = 0;
  const char* begin = header.data() + pos + needle.size();
  const auto [ptr, ec] = std::from_chars(begin, header.data() + header.size(), value);
  if (ec != std::errc() || ptr == begin) throw ParseError("bad '" + std::string(key) + "' in vocabulary header");
  return value;
}

}  // namespace

Vocabulary Vocabulary::parse(std::string_view content) {
  std::vector<std::string> lines;
  {
    std::string line;
    std::istringstream in{std::string(content)};
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
  }
  if (lines.empty() || lines[0].rfind(kFormatTag, 0) != 0) {
    throw ParseError("not a vocabulary file (line 1 must start with '" + std::string(kFormatTag) + "')");
  }
  const std::size_t size = header_count(lines[0], "size");
  const std::size_t merge_count = header_count(lines[0], "merges");
  if (header_count(lines[0], "specials") != static_cast<std::size_t>(kSpecialCount)) {
    throw ParseError("vocabulary header: unsupported special-token count");
  }

  Vocabulary vocab;
  std::size_t lineno = 1;
  std::size_t merges_read = 0;
  std::size_t specials_read = 0;
  for (; lineno < lines.size(); ++lineno) {
    const std::string& line = lines[lineno];
    if (line.empty() || line[0] == '#') continue;
    const std::string where = "vocabulary line " + std::to_string(lineno + 1);
    if (merges_read < merge_count) {
      const auto sp = line.find(' ');
      if (sp == std::string::npos || line.find(' ', sp + 1) != std::string::npos) {
        throw ParseError(where + ": expected two pieces");
      }
      const auto left = vocab.find(unescape_piece(line.substr(0, sp)));
      const auto right = vocab.find(unescape_piece(line.substr(sp + 1)));
      if (!left || !right) throw ParseError(where + ": merge uses an unknown piece");
      vocab.add_merge(*left, *right);
      ++merges_read;
      continue;
    }
    std::istringstream fields(line);
    std::string tag, name;
    TokenId id = -1;
    fields >> tag >> id >> name;
    if (tag != "special" || id < 0 || id >= kSpecialCount || name != kSpecialNames[static_cast<std::size_t>(id)]) {
      throw ParseError(where + ": bad special-token entry");
    }
    ++specials_read;
  }
  if (merges_read != merge_count) throw ParseError("vocabulary file truncated: missing merges");
  if (specials_read != static_cast<std::size_t>(kSpecialCount)) throw ParseError("vocabulary special table incomplete");
  if (vocab.size() != size) {
    throw ParseError("vocabulary header size " + std::to_string(size) + " disagrees with rebuilt size " +
                     std::to_string(vocab.size()));
  }
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const { io::write_file_atomic(path, serialize()); }

Vocabulary Vocabulary::load(const std::filesystem::path& path) { return parse(io::read_file(path)); }

std::uint64_t Vocabulary::hash() const { return io::fnv1a64(serialize()); }

Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t target_size) {
  if (target_size < kBaseVocabSize) {
    throw ContractError("target vocabulary size " + std::to_string(target_size) + " is below the " +
                        std::to_string(kBaseVocabSize) + " specials and bytes");
  }
  std::map<std::string, std::size_t> chunk_counts;
  for (const std::string& line : corpus) {
    for (std::string_view chunk : pretokenize(line)) ++chunk_counts[std::string(chunk)];
  }
  if (chunk_counts.empty()) throw ContractError("cannot train a vocabulary on an empty corpus");

  struct Word {
    std::vector<TokenId> symbols;
    std::size_t count;
  };
  std::vector<Word> words;
  words.reserve(chunk_counts.size());
  for (const auto& [chunk, count] : chunk_counts) {
    Word w{{}, count};
    for (char c : chunk) w.symbols.push_back(kFirstByteId + static_cast<unsigned char>(c));
    words.push_back(std::move(w));
  }

  Vocabulary vocab;
  while (vocab.size() < target_size) {
    std::unordered_map<std::uint64_t, std::size_t> pair_counts;
    for (const Word& w : words) {
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) pair_counts[pair_key(w.symbols[i], w.symbols[i + 1])] += w.count;
    }
    std::uint64_t best_key = 0;
    std::size_t best_count = 0;
    for (const auto& [key, count] : pair_counts) {
      if (count < best_count) continue;
      if (count == best_count) {
        const auto l = static_cast<TokenId>(key >> 32), r = static_cast<TokenId>(key & 0xFFFFFFFFu);
        const auto bl = static_cast<TokenId>(best_key >> 32), br = static_cast<TokenId>(best_key & 0xFFFFFFFFu);
        const auto cand = std::tie(vocab.piece(l), vocab.piece(r));
        const auto best = std::tie(vocab.piece(bl), vocab.piece(br));
        if (!(cand < best) && !(cand == best && key < best_key)) continue;
      }
      best_key = key;
      best_count = count;
    }
    if (best_count < 2) break;
    const auto left = static_cast<TokenId>(best_key >> 32);
    const auto right = static_cast<TokenId>(best_key & 0xFFFFFFFFu);
    const TokenId merged = vocab.add_merge(left, right);
    for (Word& w : words) {
      if (w.symbols.size() < 2) continue;
      std::vector<TokenId> next;
      next.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size();) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == left && w.symbols[i + 1] == right) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(w.symbols[i++]);
        }
      }
      w.symbols.swap(next);
    }
  }
  return vocab;
}

}  // namespace defgen
