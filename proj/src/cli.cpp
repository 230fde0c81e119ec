#include "defgen/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "defgen/checkpoint.hpp"
#include "defgen/config.hpp"
#include "defgen/corpus.hpp"
#include "defgen/decoding.hpp"
#include "defgen/error.hpp"
#include "defgen/eval_metrics.hpp"
#include "defgen/io.hpp"
#include "defgen/lexcomplexity.hpp"
#include "defgen/model.hpp"
#include "defgen/text.hpp"
#include "defgen/tokenizer.hpp"
#include "defgen/training.hpp"

namespace defgen::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Settings {
  std::string profile = "toy";
  ModelConfig model = ModelConfig::toy();
  TrainConfig train = TrainConfig::toy();
  DecodeConfig decode;
  ConfigMap merged;
};

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw IoError(std::string(what) + " not found: " + path);
}

void require_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) throw IoError("output directory does not exist: " + parent.string());
}

// Profile defaults < config file < --set flags < --seed.
Settings resolve(const Common& common) {
  ConfigMap merged;
  std::string path = common.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv(kConfigEnv); env && *env) path = env;
  }
  if (!path.empty()) {
    require_file(path, "config file");
    merged = load_config(path);
  }
  for (const std::string& s : common.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ContractError("--set expects key=value, got '" + s + "'");
    merged[text::trim(s.substr(0, eq))] = text::trim(s.substr(eq + 1));
  }
  if (common.seed) merged["seed"] = std::to_string(*common.seed);

  Settings st;
  if (auto it = merged.find("profile"); it != merged.end()) st.profile = it->second;
  if (st.profile == "toy") {
    st.model = ModelConfig::toy();
    st.train = TrainConfig::toy();
  } else if (st.profile == "paper") {
    st.model = ModelConfig::paper();
    st.train = TrainConfig::paper();
  } else if (st.profile == "micro") {
    st.model = ModelConfig::micro();
    st.train = TrainConfig::toy();
  } else {
    throw ContractError("config key 'profile': expected toy, paper or micro");
  }
  for (const auto& [key, value] : merged) {
    if (key == "profile") continue;
    bool known = apply_model_setting(st.model, key, value);
    known = apply_train_setting(st.train, key, value) || known;
    known = apply_decode_setting(st.decode, key, value) || known;
    if (!known) throw ContractError("unknown config key '" + key + "'");
  }
  st.merged = merged;
  return st;
}

class Logger {
 public:
  explicit Logger(std::ostream& err) : err_(err) {}
  void line(const std::string& record) { err_ << record << '\n' << std::flush; }
  void event(const std::string& name, json fields = json::object()) {
    json j = {{"event", name}};
    for (auto& [k, v] : fields.items()) j[k] = v;
    line(j.dump());
  }

 private:
  std::ostream& err_;
};

std::vector<std::string> entry_corpus(std::span<const DefinitionEntry> entries) {
  std::vector<std::string> corpus;
  for (const DefinitionEntry& e : entries) {
    corpus.push_back(e.word);
    corpus.push_back(e.example);
    corpus.push_back(e.definition);
  }
  return corpus;
}

WordList load_function_words(const std::string& path) {
  if (!path.empty()) {
    require_file(path, "function word list");
    return WordList::load(path);
  }
  return WordList::load(fs::path(DEFGEN_DATA_DIR) / "function_words.txt");
}

// ---- tokenizer-train

struct TokenizerArgs {
  std::vector<std::string> inputs;
  std::string out;
  std::size_t vocab_size = 0;
};

int cmd_tokenizer_train(const TokenizerArgs& a, const Settings& st, std::ostream& out, Logger& log) {
  for (const auto& p : a.inputs) require_file(p, "entry file");
  require_parent(a.out);
  std::vector<std::string> corpus;
  for (const auto& p : a.inputs) {
    const auto entries = load_entries(p);
    const auto part = entry_corpus(entries);
    corpus.insert(corpus.end(), part.begin(), part.end());
  }
  const std::size_t target = a.vocab_size ? a.vocab_size : st.model.vocab_size;
  const Vocabulary vocab = train_bpe(corpus, target);
  vocab.save(a.out);
  log.event("tokenizer", {{"target_size", target}, {"size", vocab.size()}, {"merges", vocab.merges().size()}});
  out << "vocabulary: " << vocab.size() << " pieces -> " << a.out << '\n';
  return kExitOk;
}

// ---- data-prep

struct DataPrepArgs {
  std::string input;
  std::string out_dir;
  std::string allow;
  std::string function_words;
  std::vector<double> ratios = {0.8, 0.1, 0.1};
};

int cmd_data_prep(const DataPrepArgs& a, const Settings& st, std::ostream& out, Logger& log) {
  require_file(a.input, "entry file");
  if (!a.allow.empty()) require_file(a.allow, "allow list");
  if (a.ratios.size() != 3) throw ContractError("--ratios expects three values");
  if (!fs::is_directory(a.out_dir)) throw IoError("output directory does not exist: " + a.out_dir);

  const auto entries = load_entries(a.input);
  std::vector<DefinitionEntry> kept = entries;
  std::string dropped_text;
  if (!a.allow.empty()) {
    const FilterResult filtered =
        filter_by_defining_vocabulary(entries, WordList::load(a.allow), load_function_words(a.function_words));
    kept = filtered.kept;
    for (const DroppedEntry& d : filtered.dropped) {
      dropped_text += json{{"word", d.entry.word}, {"definition", d.entry.definition}, {"witness", d.witness}}.dump();
      dropped_text += '\n';
    }
    log.event("filter", {{"entries", entries.size()}, {"kept", kept.size()}, {"dropped", filtered.dropped.size()}});
  }
  const DatasetSplit split = split_by_word(kept, {a.ratios[0], a.ratios[1], a.ratios[2]}, st.train.seed);
  const fs::path dir(a.out_dir);
  store_entries(dir / "train.jsonl", split.train);
  store_entries(dir / "valid.jsonl", split.valid);
  store_entries(dir / "test.jsonl", split.test);
  io::write_file_atomic(dir / "dropped.jsonl", dropped_text);

  const std::vector<std::pair<std::string, DatasetStats>> rows = {{"train", dataset_stats(split.train)},
                                                                   {"valid", dataset_stats(split.valid)},
                                                                   {"test", dataset_stats(split.test)}};
  io::write_file_atomic(dir / "stats.json", stats_to_json(rows));
  out << format_stats_table(rows);
  return kExitOk;
}

// ---- train

struct TrainArgs {
  std::string vocab;
  std::string train;
  std::string valid;
  std::string out;
  std::string stage1_out;
  std::string init;
  std::string embeddings;
  std::string stages = "both";
};

ConfigMap stage_metadata(const TrainState& s, const Settings& st) {
  const Evaluation& e = s.best_evaluation();
  ConfigMap m = to_config_map(st.train);
  m["stage"] = std::to_string(s.stage);
  m["selected_step"] = std::to_string(e.step);
  m["valid_ppl"] = format_double(e.ppl);
  m["valid_bleu"] = format_double(e.bleu);
  return m;
}

int cmd_train(const TrainArgs& a, Settings st, std::ostream& out, Logger& log) {
  if (a.stages != "1" && a.stages != "2" && a.stages != "both") throw ContractError("--stages expects 1, 2 or both");
  require_file(a.vocab, "vocabulary");
  require_file(a.train, "training file");
  if (!a.valid.empty()) require_file(a.valid, "validation file");
  if (!a.embeddings.empty()) require_file(a.embeddings, "embedding file");
  if (a.stages == "2") {
    if (a.init.empty()) throw ContractError("--stages 2 needs --init with a stage-1 checkpoint");
    require_file(a.init, "checkpoint");
  }
  require_parent(a.out);
  if (!a.stage1_out.empty()) require_parent(a.stage1_out);

  const Vocabulary vocab = Vocabulary::load(a.vocab);
  if (st.merged.contains("vocab_size") && st.model.vocab_size != vocab.size()) {
    throw ContractError("config vocab_size " + std::to_string(st.model.vocab_size) + " differs from the vocabulary (" +
                        std::to_string(vocab.size()) + ")");
  }
  st.model.vocab_size = vocab.size();
  st.model.dropout = st.train.dropout;
  st.train.validate();

  const auto train_entries = load_entries(a.train);
  const auto valid_entries = a.valid.empty() ? std::vector<DefinitionEntry>{} : load_entries(a.valid);

  std::optional<Model> model;
  TrainState stage1;
  if (a.stages == "2") {
    Checkpoint ck = load_checkpoint(a.init);
    require_vocabulary(ck, vocab);
    if (ck.metadata["stage"] != "1") throw ContractError("--init checkpoint is not a stage-1 checkpoint");
    model.emplace(std::move(ck.model));
    stage1.stage = 1;
    stage1.history.push_back({config_size("selected_step", ck.metadata.at("selected_step")),
                              config_double("valid_ppl", ck.metadata.at("valid_ppl")),
                              config_double("valid_bleu", ck.metadata.at("valid_bleu"))});
  } else {
    model.emplace(st.model, st.train.seed);
    if (!a.embeddings.empty()) {
      const std::size_t rows = import_decoder_embeddings(*model, vocab, fs::path(a.embeddings));
      log.event("embeddings", {{"rows", rows}});
    }
  }
  const TrainingData data = prepare_training_data(train_entries, valid_entries, vocab, model->config().max_positions);
  log.event("train_start", {{"train", data.train.size()},
                            {"valid", valid_entries.empty() ? 0 : data.valid.size()},
                            {"parameters", model->parameters().numel()}});
  const TrainLog sink = [&](const std::string& line) { log.line(line); };

  if (a.stages != "2") {
    stage1 = train_stage1(*model, data, vocab, st.train, sink);
    const ConfigMap meta = stage_metadata(stage1, st);
    if (!a.stage1_out.empty()) save_checkpoint(a.stage1_out, *model, vocab, meta);
    if (a.stages == "1") {
      save_checkpoint(a.out, *model, vocab, meta);
      out << "stage 1 selected step " << stage1.best_evaluation().step << ": ppl "
          << format_double(stage1.best_evaluation().ppl) << " bleu " << format_double(stage1.best_evaluation().bleu)
          << '\n';
      return kExitOk;
    }
  }
  const TrainState stage2 = train_stage2(*model, data, vocab, st.train, stage1, sink);
  save_checkpoint(a.out, *model, vocab, stage_metadata(stage2, st));
  out << "stage 2 selected step " << stage2.best_evaluation().step << ": ppl "
      << format_double(stage2.best_evaluation().ppl) << " bleu " << format_double(stage2.best_evaluation().bleu)
      << '\n';
  return kExitOk;
}

// ---- generate

struct GenerateArgs {
  std::string checkpoint;
  std::string input;
  std::string word;
  std::string example;
  std::string out;
};

json generation_record(const DefinitionEntry& e, const Generation& g, bool with_reference) {
  json j = {{"word", e.word}, {"example", e.example}, {"generated", g.definition}, {"log_prob", g.log_prob}};
  if (with_reference) j["reference"] = e.definition;
  return j;
}

int cmd_generate(const GenerateArgs& a, const Settings& st, std::ostream& out, Logger& log) {
  require_file(a.checkpoint, "checkpoint");
  const bool single = !a.word.empty() || !a.example.empty();
  if (single == !a.input.empty()) throw ContractError("generate needs either --input or --word with --example");
  if (single && (a.word.empty() || a.example.empty())) throw ContractError("--word and --example go together");
  if (!a.input.empty()) require_file(a.input, "entry file");
  if (!a.out.empty()) require_parent(a.out);
  st.decode.validate();

  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Vocabulary vocab = ck.vocabulary();
  if (single) {
    const Generation g = generate_definition(ck.model, vocab, a.word, a.example, st.decode);
    const std::string line = generation_record({a.word, a.example, "", ""}, g, false).dump() + "\n";
    if (a.out.empty()) out << line;
    else io::write_file_atomic(a.out, line);
    return kExitOk;
  }
  const auto entries = load_entries(a.input);
  std::string text;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Generation g = generate_definition(ck.model, vocab, entries[i].word, entries[i].example, st.decode);
    text += generation_record(entries[i], g, true).dump() + "\n";
  }
  log.event("generate", {{"entries", entries.size()}, {"beam_size", st.decode.beam_size}});
  if (a.out.empty()) out << text;
  else io::write_file_atomic(a.out, text);
  return kExitOk;
}

// ---- evaluate

struct EvaluateArgs {
  std::vector<std::string> checkpoints;
  std::vector<std::string> names;
  std::string input;
  std::string out;
};

int cmd_evaluate(const EvaluateArgs& a, const Settings& st, std::ostream& out, Logger& log) {
  for (const auto& c : a.checkpoints) require_file(c, "checkpoint");
  require_file(a.input, "entry file");
  if (!a.names.empty() && a.names.size() != a.checkpoints.size()) {
    throw ContractError("--name must be given once per --checkpoint");
  }
  if (!a.out.empty()) require_parent(a.out);
  st.decode.validate();

  const auto entries = load_entries(a.input);
  if (entries.empty()) throw ContractError("evaluation file has no entries");
  std::vector<std::string> references;
  for (const auto& e : entries) references.push_back(e.definition);

  std::vector<EvalRow> rows;
  for (std::size_t c = 0; c < a.checkpoints.size(); ++c) {
    const Checkpoint ck = load_checkpoint(a.checkpoints[c]);
    const Vocabulary vocab = ck.vocabulary();
    std::vector<Seq2SeqExample> examples;
    std::vector<std::string> hypotheses;
    for (const auto& e : entries) {
      examples.push_back(make_example(e, vocab, ck.config.max_positions));
      hypotheses.push_back(generate_definition(ck.model, vocab, e.word, e.example, st.decode).definition);
    }
    EvalRow row;
    row.name = a.names.empty() ? fs::path(a.checkpoints[c]).stem().string() : a.names[c];
    row.report.ppl = perplexity(ck.model, examples);
    row.report.bleu = corpus_bleu(hypotheses, references);
    if (c > 0) row.delta_bleu = row.report.bleu.bleu - rows.front().report.bleu.bleu;
    log.event("evaluate", {{"model", row.name}, {"ppl", row.report.ppl}, {"bleu", row.report.bleu.bleu}});
    rows.push_back(std::move(row));
  }
  out << format_eval_table(rows);
  if (!a.out.empty()) io::write_file_atomic(a.out, eval_to_json(rows));
  return kExitOk;
}

// ---- complexity

struct ComplexityArgs {
  std::vector<std::string> inputs;
  std::vector<std::string> names;
  std::string easy_words;
  std::string function_words;
  std::string out;
  std::size_t segment_len = 50;
};

// JSON lines use "generated", then "definition"; any other file is one
// definition per line.
std::vector<std::string> read_definitions(const std::string& path) {
  std::istringstream in(io::read_file(path));
  std::vector<std::string> defs;
  std::size_t number = 0;
  for (std::string line; std::getline(in, line);) {
    ++number;
    const std::string t = text::trim(line);
    if (t.empty()) continue;
    if (t.front() != '{') {
      defs.push_back(t);
      continue;
    }
    json j;
    try {
      j = json::parse(t);
    } catch (const json::exception& e) {
      throw ParseError(path + " line " + std::to_string(number) + ": " + e.what());
    }
    if (j.contains("generated") && j["generated"].is_string()) defs.push_back(j["generated"]);
    else if (j.contains("definition") && j["definition"].is_string()) defs.push_back(j["definition"]);
    else throw SchemaError(path + " line " + std::to_string(number) + ": no generated or definition field");
  }
  return defs;
}

int cmd_complexity(const ComplexityArgs& a, std::ostream& out, Logger& log) {
  for (const auto& p : a.inputs) require_file(p, "definition file");
  require_file(a.easy_words, "easy word list");
  if (!a.names.empty() && a.names.size() != a.inputs.size()) throw ContractError("--name must be given once per --input");
  if (!a.out.empty()) require_parent(a.out);
  const WordList fn = load_function_words(a.function_words);
  const WordList easy = WordList::load(a.easy_words);
  std::vector<ComplexityRow> rows;
  for (std::size_t i = 0; i < a.inputs.size(); ++i) {
    ComplexityRow row;
    row.name = a.names.empty() ? fs::path(a.inputs[i]).stem().string() : a.names[i];
    row.report = complexity_report(read_definitions(a.inputs[i]), fn, easy, a.segment_len);
    log.event("complexity", {{"system", row.name}, {"tokens", row.report.tokens}});
    rows.push_back(std::move(row));
  }
  out << format_complexity_table(rows);
  if (!a.out.empty()) io::write_file_atomic(a.out, complexity_to_json(rows));
  return kExitOk;
}

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--config", common.config_path, "key=value config file (default: $DEFGEN_CONFIG)");
  cmd->add_option("--set", common.sets, "override one config key, as key=value (repeatable)");
  cmd->add_option("--seed", common.seed, "random seed (config key 'seed')");
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Definition generation: tokenizer, data preparation, two-stage training, decoding, metrics."};
  app.name(argv.empty() ? "defgen" : fs::path(argv[0]).filename().string());
  app.require_subcommand(1);
  app.fallthrough(false);

  Common common;

  TokenizerArgs tok;
  auto* c_tok = app.add_subcommand("tokenizer-train", "train the shared byte-level BPE vocabulary");
  c_tok->add_option("--input", tok.inputs, "entry file(s), JSON lines")->required();
  c_tok->add_option("--out", tok.out, "vocabulary file to write")->required();
  c_tok->add_option("--vocab-size", tok.vocab_size, "target size (default: config vocab_size)");
  add_common(c_tok, common);

  DataPrepArgs prep;
  auto* c_prep = app.add_subcommand("data-prep", "filter by defining vocabulary and split by headword");
  c_prep->add_option("--input", prep.input, "entry file, JSON lines")->required();
  c_prep->add_option("--out-dir", prep.out_dir, "directory for train/valid/test/dropped/stats files")->required();
  c_prep->add_option("--allow", prep.allow, "defining vocabulary; no filtering when omitted");
  c_prep->add_option("--function-words", prep.function_words, "function word list (default: bundled)");
  c_prep->add_option("--ratios", prep.ratios, "train valid test ratios")->expected(3)->delimiter(',');
  add_common(c_prep, common);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "two-stage training; writes checkpoints");
  c_train->add_option("--vocab", train.vocab, "vocabulary file")->required();
  c_train->add_option("--train", train.train, "training entries")->required();
  c_train->add_option("--valid", train.valid, "validation entries (default: the training entries)");
  c_train->add_option("--out", train.out, "final checkpoint")->required();
  c_train->add_option("--stage1-out", train.stage1_out, "also write the selected stage-1 checkpoint here");
  c_train->add_option("--stages", train.stages, "1, 2 or both")->check(CLI::IsMember({"1", "2", "both"}));
  c_train->add_option("--init", train.init, "stage-1 checkpoint to continue from (with --stages 2)");
  c_train->add_option("--embeddings", train.embeddings, "word vectors for the decoder embedding table");
  add_common(c_train, common);

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "decode definitions for entries or one word/example pair");
  c_gen->add_option("--checkpoint", gen.checkpoint, "checkpoint file")->required();
  c_gen->add_option("--input", gen.input, "entry file, JSON lines");
  c_gen->add_option("--word", gen.word, "headword");
  c_gen->add_option("--example", gen.example, "example sentence containing the headword");
  c_gen->add_option("--out", gen.out, "output file (default: stdout)");
  add_common(c_gen, common);

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "PPL and BLEU of one or more checkpoints");
  c_ev->add_option("--checkpoint", ev.checkpoints, "checkpoint file (repeatable)")->required();
  c_ev->add_option("--name", ev.names, "row label per checkpoint");
  c_ev->add_option("--input", ev.input, "entries with reference definitions")->required();
  c_ev->add_option("--out", ev.out, "JSON report file");
  add_common(c_ev, common);

  ComplexityArgs cx;
  auto* c_cx = app.add_subcommand("complexity", "LD, LS, TTR and MSTTR of definition sets");
  c_cx->add_option("--input", cx.inputs, "generation file, entry file or plain text (repeatable)")->required();
  c_cx->add_option("--name", cx.names, "row label per input");
  c_cx->add_option("--easy-words", cx.easy_words, "easy word list for LS")->required();
  c_cx->add_option("--function-words", cx.function_words, "function word list (default: bundled)");
  c_cx->add_option("--segment-len", cx.segment_len, "MSTTR segment length")->check(CLI::PositiveNumber);
  c_cx->add_option("--out", cx.out, "JSON report file");
  add_common(c_cx, common);

  if (argv.size() > 1 && !argv[1].empty() && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
    err << "unknown subcommand '" << argv[1] << "'\n" << app.help();
    return kExitUsage;
  }

  std::vector<const char*> raw;
  for (const std::string& a : argv) raw.push_back(a.c_str());
  if (raw.empty()) raw.push_back("defgen");
  try {
    app.parse(static_cast<int>(raw.size()), raw.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kExitOk;
    err << app.help();
    return kExitUsage;
  }

  Logger log(err);
  try {
    const Settings st = resolve(common);
    if (c_tok->parsed()) return cmd_tokenizer_train(tok, st, out, log);
    if (c_prep->parsed()) return cmd_data_prep(prep, st, out, log);
    if (c_train->parsed()) return cmd_train(train, st, out, log);
    if (c_gen->parsed()) return cmd_generate(gen, st, out, log);
    if (c_ev->parsed()) return cmd_evaluate(ev, st, out, log);
    if (c_cx->parsed()) return cmd_complexity(cx, out, log);
  } catch (const IoError& e) {
    log.event("error", {{"kind", "io"}, {"message", e.what()}});
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    log.event("error", {{"kind", "io"}, {"message", e.what()}});
    return kExitIo;
  } catch (const Error& e) {
    log.event("error", {{"kind", "contract"}, {"message", e.what()}});
    return kExitError;
  }
  return kExitUsage;
}

}  // namespace defgen::cli
