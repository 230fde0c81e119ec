// Acceptance gate: one PASS/FAIL line per criterion. Exit status is the
// number of failures (0 = all passed). Pass criterion names as arguments to
// run a subset, e.g. `acceptance decoding metrics`.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../support/gradcheck.hpp"
#include "defgen/corpus.hpp"
#include "defgen/decoding.hpp"
#include "defgen/eval_metrics.hpp"
#include "defgen/io.hpp"
#include "defgen/lexcomplexity.hpp"
#include "defgen/model.hpp"
#include "defgen/rng.hpp"
#include "defgen/synth.hpp"
#include "defgen/text.hpp"
#include "defgen/training.hpp"

using namespace defgen;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

std::vector<std::string> corpus_of(std::initializer_list<const std::vector<DefinitionEntry>*> sets) {
  std::vector<std::string> corpus;
  for (const auto* set : sets) {
    for (const auto& e : *set) {
      corpus.push_back(e.word);
      corpus.push_back(e.example);
      corpus.push_back(e.definition);
    }
  }
  return corpus;
}

// ---------------------------------------------------------------- gradients

Outcome gradient_integrity() {
  const ModelConfig c = ModelConfig::micro();
  Model m(c, 3);
  Rng rng(37);
  for (NamedTensor& p : m.parameters())
    for (double& v : p.tensor.values()) v = 0.4 * rng.normal();
  EncodedInput in;
  in.token_ids = {kBosId, 8, 4, kSepId, 9, 10, kEosId};
  in.type_ids = {0, 0, 0, 0, 1, 1, 1};
  in.positions = {0, 1, 2, 3, 4, 5, 6};
  pad_input(in, 9);
  const std::vector<TokenId> prefix = {kBosId, 6, 7, 11};
  const std::vector<TokenId> targets = {6, 7, 11, kEosId};
  std::vector<std::pair<std::string, Tensor*>> tensors;
  for (NamedTensor& p : m.parameters()) tensors.emplace_back(p.name, &p.tensor);
  const auto r = testing::gradient_check(tensors, [&](bool with_backward) {
    Graph g;
    const Var loss = g.cross_entropy(m.forward(g, in, prefix), targets, kPadId);
    if (with_backward) g.backward(loss);
    return g.value(loss)[0];
  });
  const std::size_t params = Model::parameter_count(c);
  return {r.max_relative_error < 1e-4 && params <= 5000 && r.checked == params,
          std::to_string(params) + " params, max rel err " + fmt(r.max_relative_error, 3) + " at " + r.worst_tensor};
}

// ---------------------------------------------------------------- overfit

Outcome overfit_witness() {
  const auto train = synth_entries({32, 7, SynthLanguage::A, 1});
  const auto more_a = synth_entries({400, 8, SynthLanguage::A, 2});
  const auto more_b = synth_entries({100, 9, SynthLanguage::B, 2});
  const Vocabulary vocab = train_bpe(corpus_of({&train, &more_a, &more_b}), 512);

  ModelConfig mc = ModelConfig::toy();
  mc.vocab_size = vocab.size();
  mc.dropout = 0.0;
  Model model(mc, 1);
  TrainConfig tc = TrainConfig::toy();
  tc.dropout = 0.0;
  tc.eval_every = 250;
  tc.max_steps = 1500;
  const TrainingData data = prepare_training_data(train, {}, vocab, mc.max_positions);  // evaluates on train
  const TrainState s1 = train_stage1(model, data, vocab, tc);
  tc.max_steps = 500;
  const TrainState s2 = train_stage2(model, data, vocab, tc, s1);

  bool reached = false;
  std::string where = "never";
  for (const TrainState* s : {&s1, &s2}) {
    for (const Evaluation& e : s->history) {
      if (!reached && e.ppl < 1.1 && e.bleu >= 100.0 - 1e-9) {
        reached = true;
        where = "stage " + std::to_string(s->stage) + " step " + std::to_string(e.step) + " (ppl " + fmt(e.ppl) +
                ", bleu " + fmt(e.bleu) + ")";
      }
    }
  }
  const Evaluation& sel = s2.best_evaluation();
  return {reached, "32 entries, 1500+500 steps; first reached at " + where + "; selected checkpoint ppl " +
                       fmt(sel.ppl) + " bleu " + fmt(sel.bleu)};
}

// ---------------------------------------------------------------- fine-tune + zero-shot

struct FineTuneRun {
  Vocabulary vocab;
  std::optional<Model> model;
  Evaluation stage1, stage2;
  bool done = false;
};

FineTuneRun& fine_tune_run() {
  static FineTuneRun run;
  if (run.done) return run;
  const auto entries = synth_entries({500, 11, SynthLanguage::A, 2});
  const auto b_text = synth_entries({60, 13, SynthLanguage::B, 1});
  const DatasetSplit split = split_by_word(entries, {0.8, 0.1, 0.1}, 11);
  // shared vocabulary over both languages' text; training data is language A only
  run.vocab = train_bpe(corpus_of({&split.train, &b_text}), 512);
  ModelConfig mc = ModelConfig::toy();
  mc.vocab_size = run.vocab.size();
  run.model.emplace(mc, 1);
  TrainConfig tc = TrainConfig::toy();
  tc.eval_every = 250;
  tc.max_steps = 2000;
  const TrainingData data = prepare_training_data(split.train, split.valid, run.vocab, mc.max_positions);
  const TrainState s1 = train_stage1(*run.model, data, run.vocab, tc);
  tc.max_steps = 1000;
  const TrainState s2 = train_stage2(*run.model, data, run.vocab, tc, s1);
  run.stage1 = s1.best_evaluation();
  run.stage2 = s2.best_evaluation();
  run.done = true;
  return run;
}

Outcome fine_tune_direction() {
  const FineTuneRun& run = fine_tune_run();
  const double delta = run.stage2.bleu - run.stage1.bleu;
  return {run.stage2.ppl <= run.stage1.ppl && delta >= 0.0,
          "valid ppl " + fmt(run.stage1.ppl) + " -> " + fmt(run.stage2.ppl) + ", bleu " + fmt(run.stage1.bleu) +
              " -> " + fmt(run.stage2.bleu) + " (dBLEU " + fmt(delta) + ")"};
}

Outcome zero_shot_plumbing() {
  const FineTuneRun& run = fine_tune_run();
  const auto b_entries = synth_entries({24, 3, SynthLanguage::B, 1});
  DecodeConfig dc;
  std::size_t ok = 0, ascii = 0, nonempty = 0;
  std::string problem;
  for (const auto& e : b_entries) {
    const Generation g = generate_definition(*run.model, run.vocab, e.word, e.example, dc);
    bool good = std::isfinite(g.log_prob) && g.log_prob <= 0.0;
    for (TokenId t : g.tokens) good = good && !Vocabulary::is_special(t) && t < static_cast<TokenId>(run.vocab.size());
    good = good && text::is_valid_utf8(g.definition) && g.definition == run.vocab.decode(g.tokens);
    good = good && g.definition.find("<") == std::string::npos;
    if (good) ++ok;
    else if (problem.empty()) problem = "; first failure: " + e.word;
    bool plain = true;
    for (unsigned char ch : g.definition) plain = plain && ch < 0x80;
    ascii += plain;
    nonempty += !g.definition.empty();
  }
  return {ok == b_entries.size(), std::to_string(ok) + "/" + std::to_string(b_entries.size()) +
                                      " language-B outputs valid (finite log-prob, no specials, UTF-8); " +
                                      std::to_string(nonempty) + " non-empty, " + std::to_string(ascii) +
                                      " in the Latin target script" + problem};
}

// ---------------------------------------------------------------- freeze

Outcome freeze_contract() {
  const auto entries = synth_entries({24, 5, SynthLanguage::A, 1});
  const Vocabulary vocab = train_bpe(corpus_of({&entries}), 400);
  ModelConfig mc = ModelConfig::toy();
  mc.vocab_size = vocab.size();
  mc.dec_layers = 2;
  Model model(mc, 9);
  TrainConfig tc = TrainConfig::toy();
  // long enough that stage 1 selects a trained snapshot: from the zero output
  // head of step 0 no gradient reaches the encoder
  tc.max_steps = 150;
  tc.eval_every = 50;
  tc.stage1_lr = 3e-3;
  tc.stage1_warmup = 20;
  tc.stage2_warmup = 20;
  tc.batch_size = 8;
  const TrainingData data = prepare_training_data(entries, {}, vocab, mc.max_positions);

  const std::uint64_t enc0 = parameter_hash(model, true);
  const std::uint64_t dec0 = parameter_hash(model, false);
  std::size_t checks = 0, changed_during_stage1 = 0;
  const TrainState s1 = train_stage1(model, data, vocab, tc, [&](const std::string&) {
    ++checks;
    changed_during_stage1 += parameter_hash(model, true) != enc0;
  });
  const bool frozen = changed_during_stage1 == 0 && parameter_hash(model, true) == enc0;
  const bool decoder_moved = parameter_hash(model, false) != dec0;

  TrainConfig one = tc;
  one.max_steps = 2;
  one.stage1_warmup = 1;
  one.stage2_warmup = 1;
  std::uint64_t after_one = enc0;
  train_stage2(model, data, vocab, one, s1, [&](const std::string& line) {
    if (line.find("\"step\":1,\"lr\"") != std::string::npos) after_one = parameter_hash(model, true);
  });
  const bool unfrozen = after_one != enc0;
  return {frozen && decoder_moved && unfrozen && s1.best_evaluation().step > 0,
          "encoder hash checked " + std::to_string(checks) + " times in stage 1, unchanged: " +
              (frozen ? "yes" : "no") + "; stage 1 selected step " + std::to_string(s1.best_evaluation().step) +
                                                   "; changed after one stage-2 step: " + (unfrozen ? "yes" : "no")};
}

// ---------------------------------------------------------------- decoding

class RandomStub : public StepScorer {
 public:
  RandomStub(std::size_t vocab, std::uint64_t seed) : vocab_(vocab), seed_(seed) {}
  std::size_t vocab_size() const override { return vocab_; }
  std::vector<double> log_probs(std::span<const TokenId> prefix) override {
    std::uint64_t h = seed_;
    for (TokenId t : prefix) h = h * 1000003ULL + static_cast<std::uint64_t>(t) + 1;
    Rng rng(h);
    std::vector<double> v(vocab_);
    double z = 0;
    for (double& x : v) {
      x = 1.5 * rng.normal();
      z += std::exp(x);
    }
    for (double& x : v) x -= std::log(z);
    return v;
  }

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
};

struct Best {
  std::vector<TokenId> tokens;
  double score = -INFINITY;
  bool have = false;
};

void enumerate(StepScorer& s, const DecodeConfig& cfg, std::vector<TokenId>& tokens, double lp, Best& best) {
  auto consider = [&](double total) {
    const double n = static_cast<double>(tokens.size());
    const double score = total / std::pow((5.0 + n) / 6.0, cfg.length_penalty);
    if (!best.have || score > best.score || (score == best.score && tokens < best.tokens)) {
      best = {tokens, score, true};
    }
  };
  if (tokens.size() == cfg.max_len) {
    consider(lp);
    return;
  }
  std::vector<TokenId> prefix = {kBosId};
  prefix.insert(prefix.end(), tokens.begin(), tokens.end());
  const auto dist = s.log_probs(prefix);
  consider(lp + dist[kEosId]);
  for (std::size_t v = kSpecialCount; v < dist.size(); ++v) {
    tokens.push_back(static_cast<TokenId>(v));
    enumerate(s, cfg, tokens, lp + dist[v], best);
    tokens.pop_back();
  }
}

Outcome decoding_oracle() {
  std::size_t instances = 0, agree = 0;
  for (std::size_t vocab = 6; vocab <= 8; ++vocab) {
    for (std::size_t max_len = 1; max_len <= 4; ++max_len) {
      for (double alpha : {0.0, 0.6, 1.0}) {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
          RandomStub stub(vocab, 1000 * vocab + 10 * max_len + seed);
          std::size_t width = 1;
          for (std::size_t i = 0; i < max_len; ++i) width *= vocab;
          const DecodeConfig cfg{max_len, width, alpha};
          Best best;
          std::vector<TokenId> tokens;
          enumerate(stub, cfg, tokens, 0.0, best);
          const auto nbest = beam_decode(stub, cfg);
          ++instances;
          agree += !nbest.empty() && nbest[0].tokens == best.tokens && std::abs(nbest[0].score - best.score) < 1e-12;
        }
      }
    }
  }
  std::size_t same = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    RandomStub stub(6 + seed % 20, 77 + seed);
    const DecodeConfig cfg{1 + seed % 9, 1, 0.0};
    const Hypothesis g = greedy_decode(stub, cfg);
    const auto b = beam_decode(stub, cfg);
    const bool eq = b.size() == 1 && b[0].tokens == g.tokens && b[0].log_prob == g.log_prob;
    same += eq;
  }
  return {agree == instances && same == 100, "beam = enumeration on " + std::to_string(agree) + "/" +
                                                  std::to_string(instances) + " stubs; beam(1) = greedy on " +
                                                  std::to_string(same) + "/100"};
}

// ---------------------------------------------------------------- metrics

Outcome metric_oracles() {
  std::vector<std::string> notes;
  bool pass = true;
  auto check = [&](bool ok, const std::string& what) {
    pass = pass && ok;
    if (!ok) notes.push_back(what);
  };

  // uniform model: zero output head over V = 100
  ModelConfig mc = ModelConfig::micro();
  mc.vocab_size = 100;
  Model uniform(mc, 1);
  std::vector<Seq2SeqExample> examples;
  for (int i = 0; i < 3; ++i) {
    Seq2SeqExample ex;
    ex.input.token_ids = {kBosId, 10 + i, kSepId, 40, 41, kEosId};
    ex.input.type_ids = {0, 0, 0, 1, 1, 1};
    ex.input.positions = {0, 1, 2, 3, 4, 5};
    ex.decoder_input = {kBosId, 50, 51 + i};
    ex.targets = {50, 51 + i, kEosId};
    examples.push_back(ex);
  }
  const double ppl = perplexity(uniform, examples);
  check(std::abs(ppl - 100.0) <= 1e-9, "uniform ppl " + fmt(ppl, 17));

  const std::vector<std::string> same = {"a small animal that lives in water"};
  check(corpus_bleu(same, same).bleu == 100.0, "identity");
  const std::vector<std::string> hyp_d = {"red green blue yellow"}, ref_d = {"one two three four"};
  check(corpus_bleu(hyp_d, ref_d).bleu == 0.0, "disjoint");
  // "the the cat" vs "the cat sat": clipped p1 2/3, p2 1/2, p3 (0+1)/(1+1), p4 (0+1)/(0+1), BP 1
  const double hand = 100.0 * std::pow((2.0 / 3.0) * 0.5 * 0.5 * 1.0, 0.25);
  const std::vector<std::string> hyp_m = {"the the cat"}, ref_m = {"the cat sat"};
  const double mixed = corpus_bleu(hyp_m, ref_m).bleu;
  check(std::abs(mixed - hand) < 1e-6, "mixed bleu " + fmt(mixed, 10) + " vs " + fmt(hand, 10));

  // hand-audited 20-definition fixture (counts in the lexcomplexity unit test)
  const std::string fx = DEFGEN_FIXTURE_DIR;
  std::vector<std::string> defs;
  std::istringstream in(io::read_file(fx + "/complexity_definitions.txt"));
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) defs.push_back(line);
  const ComplexityReport r = complexity_report(defs, WordList::load(fx + "/complexity_function_words.txt"),
                                               WordList::load(fx + "/complexity_easy_words.txt"));
  check(r.ld == 66.0 / 107.0, "LD " + fmt(r.ld, 17));
  check(r.ls == 28.0 / 66.0, "LS " + fmt(r.ls, 17));
  check(r.ttr == 53.0 / 107.0, "TTR " + fmt(r.ttr, 17));
  check(r.msttr == (39.0 + 41.0) / 100.0 && r.segments == 2 && !r.msttr_fallback, "MSTTR " + fmt(r.msttr, 17));
  std::vector<std::string> seg = {"a", "a", "b", "b", "b", "b", "c"};
  check(msttr(seg, 3) == 0.5, "msttr segment example");

  std::string detail = "ppl " + fmt(ppl, 12) + ", bleu mixed " + fmt(mixed, 10) + ", fixture LD/LS/TTR/MSTTR " +
                       fmt(r.ld) + "/" + fmt(r.ls) + "/" + fmt(r.ttr) + "/" + fmt(r.msttr);
  for (const auto& n : notes) detail += "; mismatch: " + n;
  return {pass, detail};
}

// ---------------------------------------------------------------- filter

std::vector<std::string> oracle_tokens(const std::string& definition) {
  std::vector<std::string> out;
  std::istringstream in(definition);
  for (std::string w; in >> w;) {
    while (!w.empty() && std::ispunct(static_cast<unsigned char>(w.front()))) w.erase(w.begin());
    while (!w.empty() && std::ispunct(static_cast<unsigned char>(w.back()))) w.pop_back();
    bool letter = false;
    for (char& c : w) {
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
      letter = letter || std::isalpha(static_cast<unsigned char>(c));
    }
    if (letter) out.push_back(w);
  }
  return out;
}

Outcome filter_soundness() {
  const auto entries = synth_entries({1000, 21, SynthLanguage::A, 3});
  std::set<std::string> allowed_words;
  for (const std::string& w : synth_defining_words())
    if (w != "huge" && w != "quietly" && w != "rope" && w != "tired") allowed_words.insert(w);
  const std::vector<std::string> allow_list(allowed_words.begin(), allowed_words.end());
  const WordList allow("allow", allow_list);
  const WordList fn = WordList::load(std::string(DEFGEN_DATA_DIR) + "/function_words.txt");
  const FilterResult r = filter_by_defining_vocabulary(entries, allow, fn);

  auto permitted = [&](const std::string& t) { return allowed_words.contains(t) || fn.words().contains(t); };
  std::size_t kept_ok = 0, dropped_ok = 0;
  for (const auto& e : r.kept) {
    bool ok = true;
    for (const auto& t : oracle_tokens(e.definition)) ok = ok && permitted(t);
    kept_ok += ok;
  }
  for (const auto& d : r.dropped) {
    const auto toks = oracle_tokens(d.entry.definition);
    const bool in_def = std::find(toks.begin(), toks.end(), d.witness) != toks.end();
    dropped_ok += in_def && !permitted(d.witness);
  }
  const bool pass = r.kept.size() + r.dropped.size() == entries.size() && kept_ok == r.kept.size() &&
                    dropped_ok == r.dropped.size() && !r.dropped.empty() && !r.kept.empty();
  return {pass, std::to_string(entries.size()) + " entries: " + std::to_string(kept_ok) + "/" +
                    std::to_string(r.kept.size()) + " kept pass the check, " + std::to_string(dropped_ok) + "/" +
                    std::to_string(r.dropped.size()) + " dropped carry a valid witness"};
}

// ---------------------------------------------------------------- reproducibility

bool run_pipeline(const fs::path& dir, std::string& failed_step) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cli = DEFGEN_CLI_PATH;
  const std::string toy = std::string(DEFGEN_DATA_DIR) + "/toy";
  const std::string d = dir.string();
  const std::string cfg = " --config " + toy + "/smoke.cfg";
  const std::vector<std::pair<std::string, std::string>> steps = {
      {"tokenizer", "tokenizer-train" + cfg + " --input " + toy + "/entries.jsonl --input " + toy +
                        "/entries_b.jsonl --out " + d + "/vocab.txt"},
      {"prep", "data-prep" + cfg + " --input " + toy + "/entries.jsonl --allow " + toy + "/defining_words.txt" +
                   " --out-dir " + d},
      {"train", "train" + cfg + " --vocab " + d + "/vocab.txt --train " + d + "/train.jsonl --valid " + d +
                    "/valid.jsonl --stage1-out " + d + "/stage1.ckpt --out " + d + "/final.ckpt"},
      {"generate", "generate" + cfg + " --checkpoint " + d + "/final.ckpt --input " + d + "/test.jsonl --out " + d +
                       "/generations.jsonl"},
      {"evaluate", "evaluate" + cfg + " --checkpoint " + d + "/stage1.ckpt --checkpoint " + d +
                       "/final.ckpt --input " + d + "/test.jsonl --out " + d + "/eval.json"},
      {"complexity", "complexity --input " + d + "/generations.jsonl --input " + d + "/test.jsonl --easy-words " +
                         toy + "/defining_words.txt --out " + d + "/complexity.json"},
  };
  for (const auto& [name, args] : steps) {
    const std::string command = cli + " " + args + " > " + d + "/" + name + ".out 2> " + d + "/" + name + ".log";
    if (std::system(command.c_str()) != 0) {
      failed_step = name;
      return false;
    }
  }
  return true;
}

// console output and logs echo their own paths; artifacts are compared raw
std::string normalized(const fs::path& file, const fs::path& run_dir) {
  std::string content = io::read_file(file);
  const std::string ext = file.extension().string();
  if (ext != ".out" && ext != ".log") return content;
  const std::string dir = run_dir.string();
  for (std::size_t at = content.find(dir); at != std::string::npos; at = content.find(dir, at))
    content.replace(at, dir.size(), "<run>");
  return content;
}

Outcome reproducibility() {
  const fs::path base = fs::temp_directory_path() / "defgen_acceptance_repro";
  std::string failed;
  if (!run_pipeline(base / "a", failed) || !run_pipeline(base / "b", failed)) {
    return {false, "pipeline step failed: " + failed};
  }
  std::size_t compared = 0;
  std::vector<std::string> differ;
  for (const auto& entry : fs::directory_iterator(base / "a")) {
    const std::string name = entry.path().filename().string();
    ++compared;
    const fs::path other = base / "b" / name;
    if (!fs::exists(other) || normalized(entry.path(), base / "a") != normalized(other, base / "b")) {
      differ.push_back(name);
    }
  }
  const bool artifacts = fs::exists(base / "a/final.ckpt") && fs::exists(base / "a/generations.jsonl") &&
                         fs::exists(base / "a/eval.json") && fs::exists(base / "a/complexity.json");
  std::string detail = std::to_string(compared) + " files compared (checkpoints, generations, reports, logs)";
  for (const auto& f : differ) detail += "; differs: " + f;
  return {artifacts && differ.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient-integrity", gradient_integrity},
      {"overfit-witness", overfit_witness},
      {"fine-tune-direction", fine_tune_direction},
      {"freeze-contract", freeze_contract},
      {"zero-shot-plumbing", zero_shot_plumbing},
      {"decoding-oracle", decoding_oracle},
      {"metric-oracles", metric_oracles},
      {"filter-soundness", filter_soundness},
      {"reproducibility", reproducibility},
  };
  const std::map<std::string, double> budget_seconds = {
      {"gradient-integrity", 60}, {"overfit-witness", 600}, {"fine-tune-direction", 1200}};

  std::set<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && !only.contains(name)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (auto it = budget_seconds.find(name); it != budget_seconds.end() && secs > it->second) {
      o.pass = false;
      o.detail += "; over the " + fmt(it->second) + "s budget";
    }
    failures += !o.pass;
    std::printf("%s %-20s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures;
}
