#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "defgen/config.hpp"
#include "defgen/corpus.hpp"
#include "defgen/graph.hpp"
#include "defgen/rng.hpp"
#include "defgen/tensor.hpp"
#include "defgen/tokenizer.hpp"

namespace defgen {

enum class Activation : std::uint8_t { Gelu, Relu };
enum class PositionEncoding : std::uint8_t { Learned, Sinusoidal };

struct ModelConfig {
  std::size_t vocab_size = 512;
  std::size_t d_enc = 64;
  std::size_t d_dec = 40;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 6;
  std::size_t enc_heads = 4;
  std::size_t dec_heads = 5;
  std::size_t enc_ffn_units = 256;
  std::size_t ffn_units = 2048;
  std::size_t max_positions = 128;
  double dropout = 0.2;
  Activation activation = Activation::Gelu;
  PositionEncoding positions = PositionEncoding::Learned;
  bool tie_output = false;

  // Throws ContractError on zero counts or widths not divisible by heads.
  void validate() const;

  // mBERT-base sized encoder, 5-head 6-layer decoder at the width of
  // 300-dimensional word vectors.
  static ModelConfig paper();
  // Small enough to train on one core in minutes.
  static ModelConfig toy();
  // A few thousand parameters; used for finite-difference checks.
  static ModelConfig micro();

  bool operator==(const ModelConfig&) const = default;
};

// Applies one key=value setting; false if the key is not a model field.
bool apply_model_setting(ModelConfig& config, std::string_view key, std::string_view value);
ConfigMap to_config_map(const ModelConfig& config);
// Unknown keys are ignored so a shared file may hold other sections.
ModelConfig model_config_from(const ConfigMap& map, ModelConfig base);

// Encoder input: [BOS] word [SEP] example [EOS]. Type id 0 covers BOS, the
// word and SEP; 1 covers the example and EOS.
struct EncodedInput {
  std::vector<TokenId> token_ids;
  std::vector<std::uint8_t> type_ids;
  std::vector<std::size_t> positions;

  std::size_t size() const { return token_ids.size(); }
  // 1 for real tokens, 0 for PAD.
  std::vector<std::uint8_t> key_mask() const;
};

// Truncates the example to fit max_positions; throws ContractError if the
// word alone (with BOS, SEP and EOS) does not fit, or either string is empty.
EncodedInput build_input(std::string_view word, std::string_view example, const Vocabulary& vocab,
                         std::size_t max_positions);
// Appends PAD (type 1) up to length.
void pad_input(EncodedInput& input, std::size_t length);

// Teacher-forced training pair for one entry.
struct Seq2SeqExample {
  EncodedInput input;
  std::vector<TokenId> decoder_input;  // BOS d1 .. dn
  std::vector<TokenId> targets;        // d1 .. dn EOS
};

// Definitions longer than max_positions - 1 tokens are truncated (EOS kept).
Seq2SeqExample make_example(const DefinitionEntry& entry, const Vocabulary& vocab, std::size_t max_positions);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Ordered, name-addressable parameters. Element addresses are stable.
class ParameterSet {
 public:
  std::size_t add(std::string name, Shape shape);
  std::size_t size() const { return items_.size(); }
  std::size_t index_of(std::string_view name) const;
  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  NamedTensor& operator[](std::size_t i) { return items_[i]; }
  const NamedTensor& operator[](std::size_t i) const { return items_[i]; }
  Tensor& get(std::string_view name) { return items_[index_of(name)].tensor; }
  const Tensor& get(std::string_view name) const { return items_[index_of(name)].tensor; }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  // Total scalar count.
  std::size_t numel() const;

 private:
  std::deque<NamedTensor> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Rate 0 or a null rng means evaluation mode.
struct DropoutSpec {
  double rate = 0.0;
  Rng* rng = nullptr;
  bool active() const { return rate > 0.0 && rng != nullptr; }
};

// Encoder, affine bridge and decoder.
//
// Parameter names: "enc.*" is the encoder side (token, type and position
// tables plus the stack), "bridge.*" the affine map, "dec.*" the decoder and
// "out.*" the vocabulary projection. Weights are stored [in, out] and applied
// as x W + b. Blocks are pre-norm; both stacks end with a layer norm (the
// encoder's only when it has layers). The output projection starts at zero.
class Model {
 public:
  explicit Model(const ModelConfig& config, std::uint64_t seed = 1);

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  // Encoder side is every parameter whose name starts with "enc.".
  static bool is_encoder_parameter(std::string_view name);
  void set_encoder_trainable(bool on);
  void set_decoder_trainable(bool on);

  // Snaps every value to the nearest float, the checkpoint precision, so a
  // saved and reloaded model computes exactly what this one does.
  void round_to_float32();

  // Closed form of the parameter total for config.
  static std::size_t parameter_count(const ModelConfig& config);

  Var embed(Graph& g, const EncodedInput& input, DropoutSpec dropout = {}) const;
  // key_keep marks non-pad positions (empty means all).
  Var encode(Graph& g, Var x, std::span<const std::uint8_t> key_keep, DropoutSpec dropout = {}) const;
  Var bridge(Graph& g, Var h) const;
  Var decode_logits(Graph& g, Var memory, std::span<const std::uint8_t> memory_keep,
                    std::span<const TokenId> prefix, DropoutSpec dropout = {}) const;

  // embed -> encode -> bridge.
  Var memory(Graph& g, const EncodedInput& input, DropoutSpec dropout = {}) const;
  Var forward(Graph& g, const EncodedInput& input, std::span<const TokenId> prefix, DropoutSpec dropout = {}) const;

 private:
  struct Norm {
    std::size_t gain, bias;
  };
  struct Attention {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct Ffn {
    std::size_t w1, b1, w2, b2;
  };
  struct EncoderLayer {
    Norm ln1;
    Attention attn;
    Norm ln2;
    Ffn ffn;
  };
  struct DecoderLayer {
    Norm ln1;
    Attention self_attn;
    Norm ln2;
    Attention cross_attn;
    Norm ln3;
    Ffn ffn;
  };

  Var bind(Graph& g, std::size_t index) const;
  Var norm(Graph& g, Var x, const Norm& n) const;
  Var attention(Graph& g, const Attention& a, Var query, Var kv, std::size_t heads,
                std::span<const std::uint8_t> key_keep, bool causal) const;
  Var feed_forward(Graph& g, Var x, const Ffn& f) const;
  Var positions(Graph& g, std::size_t table, std::size_t len, std::size_t width) const;

  Norm add_norm(const std::string& prefix, std::size_t width);
  Attention add_attention(const std::string& prefix, std::size_t width, std::size_t kv_width);
  Ffn add_ffn(const std::string& prefix, std::size_t width, std::size_t hidden);
  void initialize(std::uint64_t seed);

  ModelConfig config_;
  ParameterSet params_;
  std::size_t enc_tok_ = 0, enc_type_ = 0, enc_pos_ = 0, dec_tok_ = 0, dec_pos_ = 0;
  std::size_t bridge_w_ = 0, bridge_b_ = 0, out_w_ = 0, out_b_ = 0;
  std::vector<EncoderLayer> enc_layers_;
  std::vector<DecoderLayer> dec_layers_;
  Norm enc_final_{}, dec_final_{};
};

// Standard sin/cos table [len, width].
Tensor sinusoidal_positions(std::size_t len, std::size_t width);

// Reads "count dim" then "word v1 .. vdim" lines and copies each vector into
// the decoder embedding rows of the vocabulary pieces spelling the word
// (bare or with a leading space). Returns the number of rows written.
std::size_t import_decoder_embeddings(Model& model, const Vocabulary& vocab, const std::filesystem::path& path);
std::size_t import_decoder_embeddings(Model& model, const Vocabulary& vocab, std::string_view content);

// FNV-1a over names and values of the selected parameters.
std::uint64_t parameter_hash(const Model& model, bool encoder_side);

}  // namespace defgen
