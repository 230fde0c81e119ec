#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "defgen/config.hpp"
#include "defgen/corpus.hpp"
#include "defgen/model.hpp"
#include "defgen/tokenizer.hpp"

namespace defgen {

struct TrainConfig {
  double stage1_lr = 5e-4;
  std::size_t stage1_warmup = 4000;
  double stage2_lr = 2e-5;
  std::size_t stage2_warmup = 2000;
  double dropout = 0.2;
  double clip_norm = 0.1;
  std::size_t batch_size = 256;
  std::size_t max_steps = 20000;  // per stage
  std::size_t eval_every = 1000;
  std::size_t patience = 3;
  std::uint64_t seed = 1;

  // ContractError unless every field is positive and warmups < max_steps.
  void validate() const;
  static TrainConfig paper();
  static TrainConfig toy();
  bool operator==(const TrainConfig&) const = default;
};

bool apply_train_setting(TrainConfig& config, std::string_view key, std::string_view value);
ConfigMap to_config_map(const TrainConfig& config);

// peak * min(step / warmup, sqrt(warmup / step)); step >= 1.
double lr_at(std::size_t step, double peak_lr, std::size_t warmup);

struct ClipResult {
  double norm = 0.0;    // global L2 norm before clipping
  double factor = 1.0;  // multiplier applied to every gradient
};

// Global-norm clipping over the gradients of trainable parameters. Throws
// NumericError naming the first parameter with a non-finite gradient.
ClipResult clip_gradients(ParameterSet& params, double max_norm);

// Adam with beta1 0.9, beta2 0.999, eps 1e-8 and bias correction, over the
// parameters that require gradients when the optimizer is created. Updated
// values are rounded to float so they survive a checkpoint unchanged.
class Adam {
 public:
  explicit Adam(ParameterSet& params);
  void step(double lr);
  std::size_t steps() const { return t_; }

 private:
  struct Slot {
    Tensor* param;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

struct Evaluation {
  std::size_t step = 0;
  double ppl = 0.0;
  double bleu = 0.0;
};

// Index of the selected evaluation. The plateau point is the first index at
// which PPL has failed to improve on its running best for `patience`
// consecutive evaluations; the pick is the highest BLEU from that index on
// (over everything if PPL never plateaus), earliest on ties.
std::size_t select_checkpoint(std::span<const Evaluation> history, std::size_t patience = 3);

// The same rule applied online, so only the current pick needs a snapshot.
class CheckpointSelector {
 public:
  explicit CheckpointSelector(std::size_t patience) : patience_(patience) {}
  // Returns true when the new evaluation becomes the pick.
  bool observe(const Evaluation& e);
  std::size_t selected() const { return selected_; }
  std::optional<std::size_t> plateau() const { return plateau_; }

 private:
  std::size_t patience_;
  std::size_t count_ = 0;
  double best_ppl_ = 0.0;
  std::size_t stale_ = 0;
  std::optional<std::size_t> plateau_;
  std::size_t selected_ = 0;
  double selected_bleu_ = 0.0;
};

struct TrainingData {
  std::vector<Seq2SeqExample> train;
  std::vector<Seq2SeqExample> valid;
  std::vector<std::string> valid_references;
};

// Encodes entries. An empty validation list means evaluation runs on the
// training entries.
TrainingData prepare_training_data(std::span<const DefinitionEntry> train, std::span<const DefinitionEntry> valid,
                                   const Vocabulary& vocab, std::size_t max_positions);

struct TrainState {
  int stage = 1;
  std::size_t step = 0;
  std::vector<Evaluation> history;
  std::size_t best = 0;  // index into history
  std::vector<double> losses;
  std::vector<double> learning_rates;
  std::vector<double> grad_norms;

  const Evaluation& best_evaluation() const { return history.at(best); }
};

// Receives one JSON object per line: every step carries stage, step, lr,
// loss and grad_norm; evaluation records add ppl and bleu.
using TrainLog = std::function<void(const std::string& line)>;

// PPL (teacher forced) and greedy-decoded corpus BLEU on the validation part.
Evaluation evaluate(const Model& model, const TrainingData& data, const Vocabulary& vocab, std::size_t step);

// Stage 1: encoder side frozen, everything else trained at stage1_lr.
// Evaluates at step 0 and every eval_every steps (and at the last step);
// leaves the model at the selected evaluation. ContractError on an empty
// training set.
TrainState train_stage1(Model& model, const TrainingData& data, const Vocabulary& vocab, const TrainConfig& config,
                        const TrainLog& log = {});

// Stage 2: all parameters trained at stage2_lr with a fresh warmup and fresh
// optimizer moments.
TrainState train_stage2(Model& model, const TrainingData& data, const Vocabulary& vocab, const TrainConfig& config,
                        const TrainState& stage1, const TrainLog& log = {});

}  // namespace defgen
