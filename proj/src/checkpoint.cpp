#include "defgen/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <set>

#include "defgen/error.hpp"
#include "defgen/io.hpp"

namespace defgen {

namespace {

constexpr std::string_view kMagic = "DEFGENCK";

class Writer {
 public:
  void bytes(std::string_view s) { out_ += s; }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void blob(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  std::string take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_ += static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::string_view bytes(std::size_t n) {
    if (data_.size() - pos_ < n) throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
    const std::string_view s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::string blob() { return std::string(bytes(u32())); }
  float f32() { return std::bit_cast<float>(u32()); }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::uint64_t le(int n) {
    const std::string_view s = bytes(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = n - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Model& model, const Vocabulary& vocab, const ConfigMap& metadata) {
  Writer w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  w.blob(format_config(to_config_map(model.config())));
  w.blob(format_config(metadata));
  w.u64(vocab.hash());
  w.blob(vocab.serialize());
  w.u32(static_cast<std::uint32_t>(model.parameters().size()));
  for (const NamedTensor& p : model.parameters()) {
    w.blob(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : p.tensor.values()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

Checkpoint parse_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < kMagic.size() || r.bytes(kMagic.size()) != kMagic) throw ParseError("not a checkpoint file");
  if (const std::uint32_t version = r.u32(); version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  const ConfigMap config_map = parse_config(r.blob());
  ModelConfig config;
  for (const auto& [key, value] : config_map) {
    if (!apply_model_setting(config, key, value)) throw SchemaError("checkpoint config: unknown key " + key);
  }
  ConfigMap metadata = parse_config(r.blob());
  const std::uint64_t vocab_hash = r.u64();
  std::string vocab_text = r.blob();

  Checkpoint ck{config, std::move(metadata), vocab_hash, std::move(vocab_text), Model(config)};
  ParameterSet& params = ck.model.parameters();
  const std::uint32_t count = r.u32();
  std::set<std::string> seen;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = r.blob();
    if (!params.contains(name)) throw SchemaError("checkpoint tensor " + name + " is not part of the architecture");
    if (!seen.insert(name).second) throw SchemaError("checkpoint tensor " + name + " appears twice");
    Tensor& tensor = params.get(name);
    Shape shape(r.u32());
    for (std::size_t& d : shape) d = r.u32();
    if (shape != tensor.shape()) {
      throw SchemaError("checkpoint tensor " + name + " has shape " + shape_to_string(shape) + ", expected " +
                        shape_to_string(tensor.shape()));
    }
    for (double& v : tensor.values()) v = static_cast<double>(r.f32());
  }
  if (seen.size() != params.size()) {
    for (const NamedTensor& p : params) {
      if (!seen.contains(p.name)) throw SchemaError("checkpoint is missing tensor " + p.name);
    }
  }
  if (!r.done()) throw ParseError("trailing bytes after checkpoint tensors");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocabulary& vocab,
                     const ConfigMap& metadata) {
  io::write_file_atomic(path, serialize_checkpoint(model, vocab, metadata));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(io::read_file(path)); }

Vocabulary Checkpoint::vocabulary() const {
  if (vocab_text.empty()) throw ContractError("checkpoint does not embed its vocabulary");
  Vocabulary vocab = Vocabulary::parse(vocab_text);
  if (vocab.hash() != vocab_hash) throw SchemaError("embedded vocabulary does not match the recorded hash");
  return vocab;
}

void require_vocabulary(const Checkpoint& checkpoint, const Vocabulary& vocab) {
  if (vocab.hash() != checkpoint.vocab_hash) {
    throw ContractError("vocabulary does not match the one this checkpoint was trained with");
  }
}

}  // namespace defgen
