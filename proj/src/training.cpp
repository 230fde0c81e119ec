#include "defgen/training.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "defgen/decoding.hpp"
#include "defgen/error.hpp"
#include "defgen/eval_metrics.hpp"
#include "defgen/rng.hpp"

namespace defgen {

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw ContractError(std::string("train config: ") + name + " must be positive");
  };
  positive(stage1_lr, "stage1_lr");
  positive(stage2_lr, "stage2_lr");
  positive(static_cast<double>(stage1_warmup), "stage1_warmup");
  positive(static_cast<double>(stage2_warmup), "stage2_warmup");
  positive(clip_norm, "clip_norm");
  positive(static_cast<double>(batch_size), "batch_size");
  positive(static_cast<double>(max_steps), "max_steps");
  positive(static_cast<double>(eval_every), "eval_every");
  positive(static_cast<double>(patience), "patience");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("train config: dropout must be in [0, 1)");
  if (stage1_warmup >= max_steps || stage2_warmup >= max_steps) {
    throw ContractError("train config: warmup must be shorter than max_steps");
  }
}

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::toy() {
  TrainConfig c;
  c.stage1_lr = 1e-3;
  c.stage2_lr = 4e-5;
  c.stage1_warmup = 100;
  c.stage2_warmup = 100;
  c.batch_size = 16;
  c.max_steps = 1000;
  c.eval_every = 100;
  return c;
}

bool apply_train_setting(TrainConfig& c, std::string_view key, std::string_view value) {
  if (key == "stage1_lr") c.stage1_lr = config_double(key, value);
  else if (key == "stage1_warmup") c.stage1_warmup = config_size(key, value);
  else if (key == "stage2_lr") c.stage2_lr = config_double(key, value);
  else if (key == "stage2_warmup") c.stage2_warmup = config_size(key, value);
  else if (key == "dropout") c.dropout = config_double(key, value);
  else if (key == "clip_norm") c.clip_norm = config_double(key, value);
  else if (key == "batch_size") c.batch_size = config_size(key, value);
  else if (key == "max_steps") c.max_steps = config_size(key, value);
  else if (key == "eval_every") c.eval_every = config_size(key, value);
  else if (key == "patience") c.patience = config_size(key, value);
  else if (key == "seed") c.seed = config_u64(key, value);
  else return false;
  return true;
}

ConfigMap to_config_map(const TrainConfig& c) {
  return {{"stage1_lr", format_double(c.stage1_lr)},
          {"stage1_warmup", std::to_string(c.stage1_warmup)},
          {"stage2_lr", format_double(c.stage2_lr)},
          {"stage2_warmup", std::to_string(c.stage2_warmup)},
          {"dropout", format_double(c.dropout)},
          {"clip_norm", format_double(c.clip_norm)},
          {"batch_size", std::to_string(c.batch_size)},
          {"max_steps", std::to_string(c.max_steps)},
          {"eval_every", std::to_string(c.eval_every)},
          {"patience", std::to_string(c.patience)},
          {"seed", std::to_string(c.seed)}};
}

double lr_at(std::size_t step, double peak_lr, std::size_t warmup) {
  if (step == 0) throw ContractError("lr_at: steps count from 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return peak_lr * std::min(s / w, std::sqrt(w / s));
}

ClipResult clip_gradients(ParameterSet& params, double max_norm) {
  double sq = 0.0;
  for (NamedTensor& p : params) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + p.name);
      sq += g * g;
    }
  }
  ClipResult r;
  r.norm = std::sqrt(sq);
  if (r.norm > max_norm) {
    r.factor = max_norm / r.norm;
    for (NamedTensor& p : params) {
      if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
      for (double& g : p.tensor.grad()) g *= r.factor;
    }
  }
  return r;
}

Adam::Adam(ParameterSet& params) {
  for (NamedTensor& p : params) {
    if (p.tensor.requires_grad()) {
      slots_.push_back({&p.tensor, std::vector<double>(p.tensor.numel()), std::vector<double>(p.tensor.numel())});
    }
  }
}

void Adam::step(double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++t_;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (Slot& s : slots_) {
    if (!s.param->has_grad()) continue;
    auto values = s.param->data();
    const auto grad = s.param->grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * grad[i];
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * grad[i] * grad[i];
      const double update = lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps);
      values[i] = static_cast<double>(static_cast<float>(values[i] - update));
    }
  }
}

std::size_t select_checkpoint(std::span<const Evaluation> history, std::size_t patience) {
  if (history.empty()) throw ContractError("select_checkpoint: no evaluations");
  CheckpointSelector selector(patience);
  for (const Evaluation& e : history) selector.observe(e);
  return selector.selected();
}

bool CheckpointSelector::observe(const Evaluation& e) {
  const std::size_t index = count_++;
  bool picked = false;
  if (index == 0) {
    best_ppl_ = e.ppl;
    selected_ = 0;
    selected_bleu_ = e.bleu;
    return true;
  }
  if (e.ppl < best_ppl_) {
    best_ppl_ = e.ppl;
    stale_ = 0;
  } else {
    ++stale_;
  }
  if (!plateau_ && stale_ >= patience_) {
    plateau_ = index;
    selected_ = index;
    selected_bleu_ = e.bleu;
    return true;
  }
  if (e.bleu > selected_bleu_) {
    selected_ = index;
    selected_bleu_ = e.bleu;
    picked = true;
  }
  return picked;
}

TrainingData prepare_training_data(std::span<const DefinitionEntry> train, std::span<const DefinitionEntry> valid,
                                   const Vocabulary& vocab, std::size_t max_positions) {
  TrainingData data;
  for (const DefinitionEntry& e : train) data.train.push_back(make_example(e, vocab, max_positions));
  std::span<const DefinitionEntry> eval_entries = valid.empty() ? train : valid;
  for (const DefinitionEntry& e : eval_entries) {
    data.valid.push_back(make_example(e, vocab, max_positions));
    data.valid_references.push_back(e.definition);
  }
  return data;
}

Evaluation evaluate(const Model& model, const TrainingData& data, const Vocabulary& vocab, std::size_t step) {
  Evaluation e;
  e.step = step;
  e.ppl = perplexity(model, data.valid);
  std::vector<std::string> hypotheses;
  hypotheses.reserve(data.valid.size());
  for (const Seq2SeqExample& ex : data.valid) {
    ModelStepScorer scorer(model, ex.input);
    DecodeConfig cfg;
    cfg.beam_size = 1;
    cfg.length_penalty = 0.0;
    cfg.max_len = std::min(ex.targets.size() + 8, model.config().max_positions);
    hypotheses.push_back(vocab.decode(greedy_decode(scorer, cfg).tokens));
  }
  e.bleu = corpus_bleu(hypotheses, data.valid_references).bleu;
  return e;
}

namespace {

using json = nlohmann::ordered_json;

struct Snapshot {
  std::vector<std::vector<double>> values;

  void capture(const Model& model) {
    values.clear();
    for (const NamedTensor& p : model.parameters()) values.push_back(p.tensor.values());
  }
  void restore(Model& model) const {
    std::size_t i = 0;
    for (NamedTensor& p : model.parameters()) p.tensor.values() = values[i++];
  }
};

// Fixed-seed permutation of the training set, reshuffled at each pass.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t batch_size) {
    std::vector<std::size_t> batch;
    const std::size_t take = std::min(batch_size, order_.size());
    while (batch.size() < take) {
      if (cursor_ == order_.size()) reshuffle();
      batch.push_back(order_[cursor_++]);
    }
    return batch;
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_);
    cursor_ = 0;
  }
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

TrainState run_stage(Model& model, const TrainingData& data, const Vocabulary& vocab, const TrainConfig& config,
                     int stage, const TrainLog& log) {
  config.validate();
  if (data.train.empty()) throw ContractError("training set is empty");
  if (data.valid.empty()) throw ContractError("evaluation set is empty");

  const double peak = stage == 1 ? config.stage1_lr : config.stage2_lr;
  const std::size_t warmup = stage == 1 ? config.stage1_warmup : config.stage2_warmup;
  model.set_decoder_trainable(true);
  model.set_encoder_trainable(stage == 2);
  for (NamedTensor& p : model.parameters()) p.tensor.drop_grad();

  const std::uint64_t stage_seed = config.seed * 2 + static_cast<std::uint64_t>(stage - 1);
  Rng dropout_rng(stage_seed ^ 0x5DEECE66DULL);
  BatchStream batches(data.train.size(), stage_seed);
  Adam adam(model.parameters());

  TrainState state;
  state.stage = stage;
  CheckpointSelector selector(config.patience);
  Snapshot best;

  auto run_eval = [&](std::size_t step) {
    const Evaluation e = evaluate(model, data, vocab, step);
    state.history.push_back(e);
    if (selector.observe(e)) best.capture(model);
    if (log) {
      log(json{{"stage", stage}, {"step", step}, {"event", "eval"}, {"ppl", e.ppl}, {"bleu", e.bleu}}.dump());
    }
  };

  run_eval(0);
  for (std::size_t step = 1; step <= config.max_steps; ++step) {
    const std::vector<std::size_t> batch = batches.next(config.batch_size);
    std::size_t tokens = 0;
    for (std::size_t i : batch) {
      for (TokenId t : data.train[i].targets) tokens += t != kPadId;
    }
    for (NamedTensor& p : model.parameters()) {
      if (p.tensor.has_grad()) p.tensor.zero_grad();
    }
    double loss_sum = 0.0;
    for (std::size_t i : batch) {
      const Seq2SeqExample& ex = data.train[i];
      Graph g;
      const Var logits = model.forward(g, ex.input, ex.decoder_input, {config.dropout, &dropout_rng});
      const Var nll = g.cross_entropy(logits, ex.targets, kPadId, Reduction::Sum);
      loss_sum += g.value(nll)[0];
      g.backward(g.scale(nll, 1.0 / static_cast<double>(tokens)));
    }
    const double loss = loss_sum / static_cast<double>(tokens);
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at stage " + std::to_string(stage) + " step " +
                                                 std::to_string(step));
    const ClipResult clip = clip_gradients(model.parameters(), config.clip_norm);
    const double lr = lr_at(step, peak, warmup);
    adam.step(lr);

    state.step = step;
    state.losses.push_back(loss);
    state.learning_rates.push_back(lr);
    state.grad_norms.push_back(clip.norm);
    if (log) {
      log(json{{"stage", stage}, {"step", step}, {"lr", lr}, {"loss", loss}, {"grad_norm", clip.norm}}.dump());
    }
    if (step % config.eval_every == 0 || step == config.max_steps) run_eval(step);
  }

  state.best = selector.selected();
  best.restore(model);
  for (NamedTensor& p : model.parameters()) p.tensor.drop_grad();
  if (log) {
    const Evaluation& e = state.best_evaluation();
    log(json{{"stage", stage}, {"step", e.step}, {"event", "selected"}, {"ppl", e.ppl}, {"bleu", e.bleu}}.dump());
  }
  return state;
}

}  // namespace

TrainState train_stage1(Model& model, const TrainingData& data, const Vocabulary& vocab, const TrainConfig& config,
                        const TrainLog& log) {
  return run_stage(model, data, vocab, config, 1, log);
}

TrainState train_stage2(Model& model, const TrainingData& data, const Vocabulary& vocab, const TrainConfig& config,
                        const TrainState& stage1, const TrainLog& log) {
  if (stage1.stage != 1 || stage1.history.empty()) throw ContractError("stage 2 needs a completed stage-1 state");
  return run_stage(model, data, vocab, config, 2, log);
}

}  // namespace defgen
