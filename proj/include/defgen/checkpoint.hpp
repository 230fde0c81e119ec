#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "defgen/config.hpp"
#include "defgen/model.hpp"
#include "defgen/tokenizer.hpp"

namespace defgen {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout, all integers little-endian:
//   "DEFGENCK"  u32 version
//   u32 n + n bytes   model config as key=value text
//   u32 n + n bytes   metadata as key=value text (stage, step, scores)
//   u64               vocabulary hash
//   u32 n + n bytes   vocabulary file text (may be empty)
//   u32 count, then per tensor:
//     u32 n + name, u32 rank, u32 dims[rank], float32 payload[numel]
struct Checkpoint {
  ModelConfig config;
  ConfigMap metadata;
  std::uint64_t vocab_hash = 0;
  std::string vocab_text;
  Model model;

  // Rebuilds the embedded vocabulary and checks it against vocab_hash.
  Vocabulary vocabulary() const;
};

std::string serialize_checkpoint(const Model& model, const Vocabulary& vocab, const ConfigMap& metadata = {});
// ParseError on a bad header or truncated data; SchemaError when the tensor
// names or shapes do not match the architecture the config implies.
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocabulary& vocab,
                     const ConfigMap& metadata = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ContractError if vocab is not the vocabulary the checkpoint was trained with.
void require_vocabulary(const Checkpoint& checkpoint, const Vocabulary& vocab);

}  // namespace defgen
