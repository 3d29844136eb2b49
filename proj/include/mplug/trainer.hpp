#pragma once

// Adapter training against a frozen base model.
//
// Each step draws one memory-dropout mask, runs the decoder twice (full and
// dropped memory) over a shared encoder pass, and minimizes
//   L = NLL(M) + α NLL(M̂) + β · ½(KL(P_M ‖ P_M̂) + KL(P_M̂ ‖ P_M)).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mplug/mem_adapter.hpp"
#include "mplug/memory_bank.hpp"
#include "mplug/tensor.hpp"
#include "mplug/transformer.hpp"
#include "mplug/vocab.hpp"

namespace mplug {

enum class DropoutLevel { Item, Layer };

DropoutLevel parse_dropout_level(const std::string& name);
std::string to_string(DropoutLevel level);

struct LossConfig {
  double alpha = 5.0;
  double beta = 5.0;
  double p = 0.1;
  DropoutLevel level = DropoutLevel::Item;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainConfig {
  int steps = 1000;
  int batch_tokens = 512;
  int warmup = 100;
  double max_lr = 2e-4;
  double label_smoothing = 0.0;
  std::uint64_t seed = 0;
  int log_every = 1;
  // Validation loss is recorded every eval_every steps and at the last step (0 disables).
  int eval_every = 0;

  void validate() const;
};

// Linear warmup to max_lr, then inverse square root decay. `step` is 1-based.
double learning_rate(const TrainConfig& cfg, int step);

// Uniform draw in [0,1) from the top 53 bits of one engine output.
double uniform01(std::mt19937_64& rng);

// Training-time view of the memory. Item level draws once per item index
// (source and target rows share the draw); layer level draws once per layer.
// An item or layer is removed when its draw is below p.
MemoryView memory_dropout(const MemoryView& full, const LossConfig& cfg, std::mt19937_64& rng);

// ½(KL(p‖q) + KL(q‖p)) averaged over the given rows.
double agreement_loss(const std::vector<std::vector<double>>& p, const std::vector<std::vector<double>>& q);

// Token ids of one sentence pair; the target carries neither BOS nor EOS.
struct Example {
  std::vector<int> source;
  std::vector<int> target;
};

std::vector<Example> to_examples(const std::vector<SentencePair>& pairs, const Vocab& src_vocab,
                                 const Vocab& tgt_vocab);

struct Batch {
  std::vector<std::vector<int>> source;
  std::vector<std::vector<int>> decoder_in;  // BOS + target
  std::vector<int> gold;                     // target + EOS, padded per row to the decoder length
};

Batch make_batch(const std::vector<Example>& data, std::span<const std::size_t> indices);

// Shuffles once per epoch and packs consecutive examples until the next one
// would exceed `batch_tokens` target tokens (every batch holds at least one).
class BatchStream {
 public:
  BatchStream(const std::vector<Example>& data, int batch_tokens, std::uint64_t seed);
  Batch next();

 private:
  const std::vector<Example>& data_;
  int batch_tokens_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct LossComponents {
  double loss = 0.0;
  double nll_full = 0.0;
  double nll_drop = 0.0;
  double dist = 0.0;
};

// The three-term objective for a given dropped view. With α = β = 0 the
// dropped pass is skipped.
Tensor total_loss(const Batch& batch, const TransformerParams& base, const AdapterParams& adapters,
                  const MemoryView& full, const MemoryView& dropped, const LossConfig& cfg,
                  double label_smoothing = 0.0, LossComponents* components = nullptr);

struct LogRow {
  int step = 0;
  LossComponents c;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<LogRow> rows;
  std::vector<std::pair<int, double>> validation;  // (step, validation NLL)

  std::string csv() const;
  std::string validation_csv() const;
};

// Computes the loss of one batch; `rng` is the trainer's per-run stream.
using StepLoss = std::function<Tensor(const Batch&, std::mt19937_64& rng, LossComponents& components)>;
using Validator = std::function<double()>;

// Shared optimizer loop. Throws DivergenceError on a non-finite loss.
TrainLog train_loop(std::span<Tensor> trainable, const std::vector<Example>& data, const TrainConfig& cfg,
                    const StepLoss& step_loss, const Validator& validate = {});

// Trains `adapters` in place; the base stays frozen.
TrainLog train_adapters(const TransformerParams& base, AdapterParams& adapters, const MemoryBank& bank,
                        const std::vector<Example>& data, const TrainConfig& cfg, const LossConfig& loss_cfg,
                        const std::vector<Example>& validation = {});

// Same, over an explicit memory view (used by the ablations).
TrainLog train_adapters(const TransformerParams& base, AdapterParams& adapters, const MemoryView& view,
                        const std::vector<Example>& data, const TrainConfig& cfg, const LossConfig& loss_cfg,
                        const std::vector<Example>& validation = {});

// Full-parameter training of a base or reverse model with dropout.
TrainLog train_base(TransformerParams& model, const std::vector<Example>& data, const TrainConfig& cfg,
                    double dropout = 0.1);

// Mean per-token NLL of gold targets (EOS included), no smoothing.
double evaluate_nll(const TransformerParams& base, const DecoderPlugin* plugin, const std::vector<Example>& data,
                    int batch_tokens = 512);

}  // namespace mplug
