#include "defgen/model.hpp"

#include <cmath>
#include <sstream>

#include "defgen/error.hpp"
#include "defgen/io.hpp"
#include "defgen/text.hpp"

namespace defgen {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ContractError(std::string("model config: ") + name + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_enc, "d_enc");
  positive(d_dec, "d_dec");
  positive(dec_layers, "dec_layers");
  positive(enc_heads, "enc_heads");
  positive(dec_heads, "dec_heads");
  positive(enc_ffn_units, "enc_ffn_units");
  positive(ffn_units, "ffn_units");
  positive(max_positions, "max_positions");
  if (vocab_size < static_cast<std::size_t>(kSpecialCount)) {
    throw ContractError("model config: vocab_size must cover the special tokens");
  }
  if (d_enc % enc_heads != 0) throw ContractError("model config: d_enc must be divisible by enc_heads");
  if (d_dec % dec_heads != 0) throw ContractError("model config: d_dec must be divisible by dec_heads");
  if (max_positions < 4) throw ContractError("model config: max_positions must be at least 4");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("model config: dropout must be in [0, 1)");
}

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.vocab_size = 119547;
  c.d_enc = 768;
  c.enc_layers = 12;
  c.enc_heads = 12;
  c.enc_ffn_units = 3072;
  c.d_dec = 300;
  c.dec_layers = 6;
  c.dec_heads = 5;
  c.ffn_units = 2048;
  c.max_positions = 512;
  c.dropout = 0.2;
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.vocab_size = 512;
  c.d_enc = 64;
  c.enc_layers = 2;
  c.enc_heads = 4;
  c.enc_ffn_units = 256;
  c.d_dec = 40;
  c.dec_layers = 6;
  c.dec_heads = 5;
  c.ffn_units = 160;
  c.max_positions = 64;
  c.dropout = 0.2;
  return c;
}

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.vocab_size = 24;
  c.d_enc = 8;
  c.enc_layers = 1;
  c.enc_heads = 2;
  c.enc_ffn_units = 12;
  c.d_dec = 10;
  c.dec_layers = 1;
  c.dec_heads = 5;
  c.ffn_units = 12;
  c.max_positions = 12;
  c.dropout = 0.0;
  return c;
}

bool apply_model_setting(ModelConfig& c, std::string_view key, std::string_view value) {
  if (key == "vocab_size") c.vocab_size = config_size(key, value);
  else if (key == "d_enc") c.d_enc = config_size(key, value);
  else if (key == "d_dec") c.d_dec = config_size(key, value);
  else if (key == "enc_layers") c.enc_layers = config_size(key, value);
  else if (key == "dec_layers") c.dec_layers = config_size(key, value);
  else if (key == "enc_heads") c.enc_heads = config_size(key, value);
  else if (key == "dec_heads") c.dec_heads = config_size(key, value);
  else if (key == "enc_ffn_units") c.enc_ffn_units = config_size(key, value);
  else if (key == "ffn_units") c.ffn_units = config_size(key, value);
  else if (key == "max_positions") c.max_positions = config_size(key, value);
  else if (key == "dropout") c.dropout = config_double(key, value);
  else if (key == "activation") {
    if (value == "gelu") c.activation = Activation::Gelu;
    else if (value == "relu") c.activation = Activation::Relu;
    else throw ContractError("config key 'activation': expected gelu or relu");
  } else if (key == "positions") {
    if (value == "learned") c.positions = PositionEncoding::Learned;
    else if (value == "sinusoidal") c.positions = PositionEncoding::Sinusoidal;
    else throw ContractError("config key 'positions': expected learned or sinusoidal");
  } else if (key == "tie_output") c.tie_output = config_bool(key, value);
  else return false;
  return true;
}

ConfigMap to_config_map(const ModelConfig& c) {
  return {{"vocab_size", std::to_string(c.vocab_size)},
          {"d_enc", std::to_string(c.d_enc)},
          {"d_dec", std::to_string(c.d_dec)},
          {"enc_layers", std::to_string(c.enc_layers)},
          {"dec_layers", std::to_string(c.dec_layers)},
          {"enc_heads", std::to_string(c.enc_heads)},
          {"dec_heads", std::to_string(c.dec_heads)},
          {"enc_ffn_units", std::to_string(c.enc_ffn_units)},
          {"ffn_units", std::to_string(c.ffn_units)},
          {"max_positions", std::to_string(c.max_positions)},
          {"dropout", format_double(c.dropout)},
          {"activation", c.activation == Activation::Gelu ? "gelu" : "relu"},
          {"positions", c.positions == PositionEncoding::Learned ? "learned" : "sinusoidal"},
          {"tie_output", c.tie_output ? "true" : "false"}};
}

ModelConfig model_config_from(const ConfigMap& map, ModelConfig base) {
  for (const auto& [key, value] : map) apply_model_setting(base, key, value);
  return base;
}

std::vector<std::uint8_t> EncodedInput::key_mask() const {
  std::vector<std::uint8_t> keep(token_ids.size());
  for (std::size_t i = 0; i < token_ids.size(); ++i) keep[i] = token_ids[i] != kPadId;
  return keep;
}

EncodedInput build_input(std::string_view word, std::string_view example, const Vocabulary& vocab,
                         std::size_t max_positions) {
  if (word.empty() || example.empty()) throw ContractError("build_input: word and example must be non-empty");
  const std::vector<TokenId> word_ids = vocab.encode(word);
  std::vector<TokenId> example_ids = vocab.encode(example);
  const std::size_t fixed = word_ids.size() + 3;
  if (fixed > max_positions) {
    throw ContractError("build_input: word needs " + std::to_string(fixed) + " positions, limit is " +
                        std::to_string(max_positions));
  }
  if (fixed + example_ids.size() > max_positions) example_ids.resize(max_positions - fixed);

  EncodedInput in;
  in.token_ids.push_back(kBosId);
  in.token_ids.insert(in.token_ids.end(), word_ids.begin(), word_ids.end());
  in.token_ids.push_back(kSepId);
  in.type_ids.assign(in.token_ids.size(), 0);
  in.token_ids.insert(in.token_ids.end(), example_ids.begin(), example_ids.end());
  in.token_ids.push_back(kEosId);
  in.type_ids.resize(in.token_ids.size(), 1);
  in.positions.resize(in.token_ids.size());
  for (std::size_t i = 0; i < in.positions.size(); ++i) in.positions[i] = i;
  return in;
}

void pad_input(EncodedInput& input, std::size_t length) {
  while (input.token_ids.size() < length) {
    input.positions.push_back(input.token_ids.size());
    input.token_ids.push_back(kPadId);
    input.type_ids.push_back(1);
  }
}

Seq2SeqExample make_example(const DefinitionEntry& entry, const Vocabulary& vocab, std::size_t max_positions) {
  Seq2SeqExample ex;
  ex.input = build_input(entry.word, entry.example, vocab, max_positions);
  std::vector<TokenId> def = vocab.encode(entry.definition);
  if (def.size() + 1 > max_positions) def.resize(max_positions - 1);
  ex.decoder_input.push_back(kBosId);
  ex.decoder_input.insert(ex.decoder_input.end(), def.begin(), def.end());
  ex.targets = def;
  ex.targets.push_back(kEosId);
  return ex;
}

std::size_t ParameterSet::add(std::string name, Shape shape) {
  if (contains(name)) throw ContractError("duplicate parameter name " + name);
  const std::size_t index = items_.size();
  index_.emplace(name, index);
  items_.push_back({std::move(name), Tensor(std::move(shape))});
  return index;
}

std::size_t ParameterSet::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractError("unknown parameter " + std::string(name));
  return it->second;
}

std::size_t ParameterSet::numel() const {
  std::size_t n = 0;
  for (const auto& item : items_) n += item.tensor.numel();
  return n;
}

Tensor sinusoidal_positions(std::size_t len, std::size_t width) {
  Tensor table({len, width});
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < width; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * freq;
      table.at(pos, i) = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t V = config_.vocab_size, P = config_.max_positions;
  const std::size_t de = config_.d_enc, dd = config_.d_dec;
  const bool learned = config_.positions == PositionEncoding::Learned;

  enc_tok_ = params_.add("enc.tok_emb", {V, de});
  enc_type_ = params_.add("enc.type_emb", {2, de});
  if (learned) enc_pos_ = params_.add("enc.pos_emb", {P, de});
  for (std::size_t i = 0; i < config_.enc_layers; ++i) {
    const std::string p = "enc.layer" + std::to_string(i) + ".";
    EncoderLayer layer;
    layer.ln1 = add_norm(p + "ln1", de);
    layer.attn = add_attention(p + "attn", de, de);
    layer.ln2 = add_norm(p + "ln2", de);
    layer.ffn = add_ffn(p + "ffn", de, config_.enc_ffn_units);
    enc_layers_.push_back(layer);
  }
  if (config_.enc_layers > 0) enc_final_ = add_norm("enc.ln_f", de);

  bridge_w_ = params_.add("bridge.weight", {de, dd});
  bridge_b_ = params_.add("bridge.bias", {dd});

  dec_tok_ = params_.add("dec.tok_emb", {V, dd});
  if (learned) dec_pos_ = params_.add("dec.pos_emb", {P, dd});
  for (std::size_t i = 0; i < config_.dec_layers; ++i) {
    const std::string p = "dec.layer" + std::to_string(i) + ".";
    DecoderLayer layer;
    layer.ln1 = add_norm(p + "ln1", dd);
    layer.self_attn = add_attention(p + "self_attn", dd, dd);
    layer.ln2 = add_norm(p + "ln2", dd);
    layer.cross_attn = add_attention(p + "cross_attn", dd, dd);
    layer.ln3 = add_norm(p + "ln3", dd);
    layer.ffn = add_ffn(p + "ffn", dd, config_.ffn_units);
    dec_layers_.push_back(layer);
  }
  dec_final_ = add_norm("dec.ln_f", dd);

  if (!config_.tie_output) out_w_ = params_.add("out.weight", {dd, V});
  out_b_ = params_.add("out.bias", {V});

  initialize(seed);
  set_encoder_trainable(true);
  set_decoder_trainable(true);
}

Model::Norm Model::add_norm(const std::string& prefix, std::size_t width) {
  Norm n;
  n.gain = params_.add(prefix + ".gain", {width});
  n.bias = params_.add(prefix + ".bias", {width});
  return n;
}

Model::Attention Model::add_attention(const std::string& prefix, std::size_t width, std::size_t kv_width) {
  Attention a;
  a.wq = params_.add(prefix + ".wq", {width, width});
  a.bq = params_.add(prefix + ".bq", {width});
  a.wk = params_.add(prefix + ".wk", {kv_width, width});
  a.bk = params_.add(prefix + ".bk", {width});
  a.wv = params_.add(prefix + ".wv", {kv_width, width});
  a.bv = params_.add(prefix + ".bv", {width});
  a.wo = params_.add(prefix + ".wo", {width, width});
  a.bo = params_.add(prefix + ".bo", {width});
  return a;
}

Model::Ffn Model::add_ffn(const std::string& prefix, std::size_t width, std::size_t hidden) {
  Ffn f;
  f.w1 = params_.add(prefix + ".w1", {width, hidden});
  f.b1 = params_.add(prefix + ".b1", {hidden});
  f.w2 = params_.add(prefix + ".w2", {hidden, width});
  f.b2 = params_.add(prefix + ".b2", {width});
  return f;
}

// Embedding tables ~ N(0, 0.1^2), matrices Glorot-uniform, biases zero, norm
// gains one, output projection zero so the first prediction is uniform.
// Values start float-representable, like everything the optimizer writes.
void Model::initialize(std::uint64_t seed) {
  Rng rng(seed);
  for (NamedTensor& p : params_) {
    const std::string& name = p.name;
    Tensor& t = p.tensor;
    const bool is_embedding = name.ends_with("_emb");
    if (name.ends_with(".gain")) {
      for (double& v : t.data()) v = 1.0;
    } else if (name.starts_with("out.")) {
      for (double& v : t.data()) v = 0.0;
    } else if (is_embedding) {
      for (double& v : t.data()) v = 0.1 * rng.normal();
    } else if (t.rank() == 2) {
      const double limit = std::sqrt(6.0 / static_cast<double>(t.dim(0) + t.dim(1)));
      for (double& v : t.data()) v = rng.uniform(-limit, limit);
    } else {
      for (double& v : t.data()) v = 0.0;
    }
  }
  round_to_float32();
}

void Model::round_to_float32() {
  for (NamedTensor& p : params_)
    for (double& v : p.tensor.values()) v = static_cast<double>(static_cast<float>(v));
}

bool Model::is_encoder_parameter(std::string_view name) { return name.starts_with("enc."); }

void Model::set_encoder_trainable(bool on) {
  for (NamedTensor& p : params_) {
    if (is_encoder_parameter(p.name)) p.tensor.set_requires_grad(on);
  }
}

void Model::set_decoder_trainable(bool on) {
  for (NamedTensor& p : params_) {
    if (!is_encoder_parameter(p.name)) p.tensor.set_requires_grad(on);
  }
}

// Per block, with d the width and f the FFN width:
//   layer norm 2d, attention 4(d^2 + d), FFN 2df + f + d.
// Encoder: V de + 2 de [+ P de] + Le (2*2de + 4(de^2+de) + 2 de fe + fe + de) [+ 2de if Le > 0]
// Bridge:  de dd + dd
// Decoder: V dd [+ P dd] + Ld (3*2dd + 8(dd^2+dd) + 2 dd f + f + dd) + 2dd
// Output:  [dd V if untied] + V
std::size_t Model::parameter_count(const ModelConfig& c) {
  const std::size_t V = c.vocab_size, P = c.max_positions, de = c.d_enc, dd = c.d_dec;
  const std::size_t fe = c.enc_ffn_units, f = c.ffn_units;
  const bool learned = c.positions == PositionEncoding::Learned;
  std::size_t n = V * de + 2 * de + (learned ? P * de : 0);
  n += c.enc_layers * (4 * de + 4 * (de * de + de) + 2 * de * fe + fe + de);
  if (c.enc_layers > 0) n += 2 * de;
  n += de * dd + dd;
  n += V * dd + (learned ? P * dd : 0);
  n += c.dec_layers * (6 * dd + 8 * (dd * dd + dd) + 2 * dd * f + f + dd);
  n += 2 * dd;
  n += (c.tie_output ? 0 : dd * V) + V;
  return n;
}

Var Model::bind(Graph& g, std::size_t index) const { return g.param(params_[index].tensor); }

Var Model::norm(Graph& g, Var x, const Norm& n) const {
  return g.layer_norm(x, bind(g, n.gain), bind(g, n.bias), 1e-5);
}

Var Model::attention(Graph& g, const Attention& a, Var query, Var kv, std::size_t heads,
                     std::span<const std::uint8_t> key_keep, bool causal) const {
  const Var q = g.add_bias(g.matmul(query, bind(g, a.wq)), bind(g, a.bq));
  const Var k = g.add_bias(g.matmul(kv, bind(g, a.wk)), bind(g, a.bk));
  const Var v = g.add_bias(g.matmul(kv, bind(g, a.wv)), bind(g, a.bv));
  const std::size_t width = g.value(q).cols(), dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> contexts;
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = heads == 1 ? q : g.slice_cols(q, h * dh, (h + 1) * dh);
    const Var kh = heads == 1 ? k : g.slice_cols(k, h * dh, (h + 1) * dh);
    const Var vh = heads == 1 ? v : g.slice_cols(v, h * dh, (h + 1) * dh);
    const Var scores = g.scale(g.matmul_nt(qh, kh), scale);
    contexts.push_back(g.matmul(g.masked_softmax(scores, key_keep, causal), vh));
  }
  const Var context = heads == 1 ? contexts[0] : g.concat_cols(contexts);
  return g.add_bias(g.matmul(context, bind(g, a.wo)), bind(g, a.bo));
}

Var Model::feed_forward(Graph& g, Var x, const Ffn& f) const {
  Var hidden = g.add_bias(g.matmul(x, bind(g, f.w1)), bind(g, f.b1));
  hidden = config_.activation == Activation::Gelu ? g.gelu(hidden) : g.relu(hidden);
  return g.add_bias(g.matmul(hidden, bind(g, f.w2)), bind(g, f.b2));
}

Var Model::positions(Graph& g, std::size_t table, std::size_t len, std::size_t width) const {
  if (len > config_.max_positions) {
    throw ContractError("sequence of length " + std::to_string(len) + " exceeds max_positions " +
                        std::to_string(config_.max_positions));
  }
  if (config_.positions == PositionEncoding::Sinusoidal) return g.input(sinusoidal_positions(len, width));
  std::vector<TokenId> ids(len);
  for (std::size_t i = 0; i < len; ++i) ids[i] = static_cast<TokenId>(i);
  return g.gather_rows(bind(g, table), ids);
}

namespace {

Var maybe_dropout(Graph& g, Var x, DropoutSpec dropout) {
  return dropout.active() ? g.dropout(x, dropout.rate, *dropout.rng) : x;
}

}  // namespace

Var Model::embed(Graph& g, const EncodedInput& input, DropoutSpec dropout) const {
  const std::size_t len = input.size();
  if (len == 0 || input.type_ids.size() != len || input.positions.size() != len) {
    throw DimensionError("embed: token, type and position sequences must be non-empty and equally long");
  }
  std::vector<TokenId> types(len);
  for (std::size_t i = 0; i < len; ++i) types[i] = input.type_ids[i];
  Var x = g.add(g.gather_rows(bind(g, enc_tok_), input.token_ids), g.gather_rows(bind(g, enc_type_), types));
  bool sequential = true;
  for (std::size_t i = 0; i < len; ++i) sequential = sequential && input.positions[i] == i;
  if (sequential) {
    x = g.add(x, positions(g, enc_pos_, len, config_.d_enc));
  } else {
    // Arbitrary position ids only make sense for the learned table.
    if (config_.positions != PositionEncoding::Learned) throw ContractError("embed: positions must be 0..len-1");
    std::vector<TokenId> ids(len);
    for (std::size_t i = 0; i < len; ++i) ids[i] = static_cast<TokenId>(input.positions[i]);
    x = g.add(x, g.gather_rows(bind(g, enc_pos_), ids));
  }
  return maybe_dropout(g, x, dropout);
}

Var Model::encode(Graph& g, Var x, std::span<const std::uint8_t> key_keep, DropoutSpec dropout) const {
  const Tensor& tx = g.value(x);
  if (tx.rank() != 2 || tx.dim(1) != config_.d_enc) {
    throw DimensionError("encode: expected [len," + std::to_string(config_.d_enc) + "], got " +
                         shape_to_string(tx.shape()));
  }
  Var h = x;
  for (const EncoderLayer& layer : enc_layers_) {
    const Var n1 = norm(g, h, layer.ln1);
    const Var a = attention(g, layer.attn, n1, n1, config_.enc_heads, key_keep, false);
    h = g.add(h, maybe_dropout(g, a, dropout));
    h = g.add(h, maybe_dropout(g, feed_forward(g, norm(g, h, layer.ln2), layer.ffn), dropout));
  }
  if (!enc_layers_.empty()) h = norm(g, h, enc_final_);
  return h;
}

Var Model::bridge(Graph& g, Var h) const {
  return g.add_bias(g.matmul(h, bind(g, bridge_w_)), bind(g, bridge_b_));
}

Var Model::decode_logits(Graph& g, Var memory, std::span<const std::uint8_t> memory_keep,
                         std::span<const TokenId> prefix, DropoutSpec dropout) const {
  if (prefix.empty()) throw ContractError("decode_logits: empty target prefix");
  const std::size_t len = prefix.size();
  Var y = g.add(g.gather_rows(bind(g, dec_tok_), prefix), positions(g, dec_pos_, len, config_.d_dec));
  y = maybe_dropout(g, y, dropout);
  for (const DecoderLayer& layer : dec_layers_) {
    const Var n1 = norm(g, y, layer.ln1);
    y = g.add(y, maybe_dropout(g, attention(g, layer.self_attn, n1, n1, config_.dec_heads, {}, true), dropout));
    const Var cross = attention(g, layer.cross_attn, norm(g, y, layer.ln2), memory, config_.dec_heads, memory_keep,
                                false);
    y = g.add(y, maybe_dropout(g, cross, dropout));
    y = g.add(y, maybe_dropout(g, feed_forward(g, norm(g, y, layer.ln3), layer.ffn), dropout));
  }
  y = norm(g, y, dec_final_);
  const Var logits = config_.tie_output ? g.matmul_nt(y, bind(g, dec_tok_)) : g.matmul(y, bind(g, out_w_));
  return g.add_bias(logits, bind(g, out_b_));
}

Var Model::memory(Graph& g, const EncodedInput& input, DropoutSpec dropout) const {
  const std::vector<std::uint8_t> keep = input.key_mask();
  return bridge(g, encode(g, embed(g, input, dropout), keep, dropout));
}

Var Model::forward(Graph& g, const EncodedInput& input, std::span<const TokenId> prefix,
                   DropoutSpec dropout) const {
  const std::vector<std::uint8_t> keep = input.key_mask();
  return decode_logits(g, memory(g, input, dropout), keep, prefix, dropout);
}

std::size_t import_decoder_embeddings(Model& model, const Vocabulary& vocab, std::string_view content) {
  std::istringstream in{std::string(content)};
  std::string line;
  if (!std::getline(in, line)) throw ParseError("embedding file: missing \"count dim\" header");
  std::size_t count = 0, dim = 0;
  {
    std::istringstream header(line);
    if (!(header >> count >> dim)) throw ParseError("embedding file: malformed header");
  }
  const std::size_t width = model.config().d_dec;
  if (dim != width) {
    throw ContractError("embedding file has dimension " + std::to_string(dim) + ", decoder width is " +
                        std::to_string(width));
  }
  Tensor& table = model.parameters().get("dec.tok_emb");
  std::size_t written = 0, lineno = 1;
  std::vector<double> vec(dim);
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    std::istringstream row(line);
    std::string word;
    row >> word;
    for (std::size_t i = 0; i < dim; ++i) {
      if (!(row >> vec[i])) throw ParseError("embedding file line " + std::to_string(lineno) + ": too few values");
    }
    for (const std::string& spelling : {word, " " + word}) {
      if (auto id = vocab.find(spelling); id && static_cast<std::size_t>(*id) < table.dim(0)) {
        std::copy(vec.begin(), vec.end(), table.row(static_cast<std::size_t>(*id)).begin());
        ++written;
      }
    }
  }
  return written;
}

std::size_t import_decoder_embeddings(Model& model, const Vocabulary& vocab, const std::filesystem::path& path) {
  return import_decoder_embeddings(model, vocab, std::string_view(io::read_file(path)));
}

std::uint64_t parameter_hash(const Model& model, bool encoder_side) {
  std::uint64_t h = io::fnv1a64("");
  for (const NamedTensor& p : model.parameters()) {
    if (Model::is_encoder_parameter(p.name) != encoder_side) continue;
    h = io::fnv1a64(p.name, h);
    const auto values = p.tensor.data();
    h = io::fnv1a64(std::string_view(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double)),
                    h);
  }
  return h;
}

}  // namespace defgen
