#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "defgen/checkpoint.hpp"
#include "defgen/error.hpp"

using namespace defgen;

namespace {

ModelConfig small() {
  ModelConfig c = ModelConfig::micro();
  c.vocab_size = kBaseVocabSize + 4;
  return c;
}

Vocabulary small_vocab() {
  std::vector<std::string> corpus = {"the cat the cat sat sat"};
  return train_bpe(corpus, kBaseVocabSize + 4);
}

void randomize(Model& m, std::uint64_t seed) {
  Rng rng(seed);
  for (NamedTensor& p : m.parameters())
    for (double& v : p.tensor.values()) v = rng.normal() * 0.3;
}

Tensor logits(const Model& m, const Vocabulary& v) {
  const auto ex = make_example({"cat", "the cat sat", "a pet", "en"}, v, m.config().max_positions);
  Graph g;
  return g.value(m.forward(g, ex.input, ex.decoder_input));
}

std::string replace_once(std::string s, std::string_view from, std::string_view to) {
  const auto at = s.find(from);
  EXPECT_NE(at, std::string::npos);
  return s.replace(at, from.size(), to);
}

}  // namespace

TEST(CheckpointTest, RoundTripWithinFloatPrecision) {
  const Vocabulary vocab = small_vocab();
  Model m(small());
  randomize(m, 1);
  const Tensor before = logits(m, vocab);
  const Checkpoint ck = parse_checkpoint(serialize_checkpoint(m, vocab, {{"stage", "2"}, {"step", "40"}}));
  EXPECT_EQ(ck.config, m.config());
  EXPECT_EQ(ck.metadata.at("stage"), "2");
  EXPECT_EQ(ck.vocab_hash, vocab.hash());
  EXPECT_EQ(ck.vocabulary().serialize(), vocab.serialize());
  const Tensor after = logits(ck.model, vocab);
  for (std::size_t i = 0; i < before.numel(); ++i) EXPECT_NEAR(after[i], before[i], 1e-6);
}

TEST(CheckpointTest, FloatRoundedModelReloadsBitIdentical) {
  const Vocabulary vocab = small_vocab();
  Model m(small());
  randomize(m, 2);
  m.round_to_float32();
  const Checkpoint ck = parse_checkpoint(serialize_checkpoint(m, vocab));
  EXPECT_EQ(logits(ck.model, vocab).values(), logits(m, vocab).values());
  for (std::size_t i = 0; i < m.parameters().size(); ++i)
    EXPECT_EQ(ck.model.parameters()[i].tensor.values(), m.parameters()[i].tensor.values());
}

TEST(CheckpointTest, PayloadIsLittleEndianFloat32) {
  const Vocabulary vocab = small_vocab();
  Model m(small());
  m.parameters().get("enc.tok_emb")[0] = 1.5;  // 0x3FC00000
  const std::string bytes = serialize_checkpoint(m, vocab);
  EXPECT_EQ(bytes.substr(0, 8), "DEFGENCK");
  EXPECT_EQ(bytes.substr(8, 4), std::string("\x01\x00\x00\x00", 4));
  const std::string name = "enc.tok_emb";
  const auto at = bytes.find(name);
  ASSERT_NE(at, std::string::npos);
  // name, rank 2, two dims, then the first value
  const std::size_t payload = at + name.size() + 4 + 8;
  EXPECT_EQ(bytes.substr(payload, 4), std::string("\x00\x00\xC0\x3F", 4));
  std::uint32_t rows = 0;
  std::memcpy(&rows, bytes.data() + at + name.size() + 4, 4);
  EXPECT_EQ(rows, m.config().vocab_size);
}

TEST(CheckpointTest, CorruptInputsAreRejected) {
  const Vocabulary vocab = small_vocab();
  Model m(small());
  const std::string good = serialize_checkpoint(m, vocab);
  EXPECT_THROW(parse_checkpoint("NOTACKPT"), ParseError);
  EXPECT_THROW(parse_checkpoint(good.substr(0, good.size() - 3)), ParseError);
  EXPECT_THROW(parse_checkpoint(good + "x"), ParseError);
  std::string bad_version = good;
  bad_version[8] = 9;
  EXPECT_THROW(parse_checkpoint(bad_version), ParseError);
  EXPECT_THROW(parse_checkpoint(replace_once(good, "out.bias", "out.biaz")), SchemaError);
  EXPECT_THROW(parse_checkpoint(replace_once(good, "d_enc=8", "d_enc=4")), SchemaError);
  EXPECT_THROW(parse_checkpoint(replace_once(good, "d_enc=8", "d_exc=8")), SchemaError);
}

TEST(CheckpointTest, FileRoundTripAndVocabularyBinding) {
  const Vocabulary vocab = small_vocab();
  Model m(small());
  randomize(m, 3);
  const auto path = std::filesystem::temp_directory_path() / "defgen_checkpoint_test.bin";
  save_checkpoint(path, m, vocab);
  const Checkpoint ck = load_checkpoint(path);
  EXPECT_NO_THROW(require_vocabulary(ck, vocab));
  EXPECT_THROW(require_vocabulary(ck, Vocabulary()), ContractError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}
