#pragma once

// Post-norm encoder-decoder Transformer used as the frozen base model.
//
// Batches are laid out as [batch*len × d] row blocks (row b*len + t). Target
// inputs start with BOS; the decoder can hand its self- and cross-attention
// outputs to a DecoderPlugin before each residual layernorm, which is where
// the memory-augmented and bottleneck adapters hook in.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mplug/tensor.hpp"

namespace mplug {

struct ModelConfig {
  int d = 32;
  int layers = 2;
  int heads = 2;
  int ffn = 64;
  int src_vocab = 0;
  int tgt_vocab = 0;

  bool operator==(const ModelConfig&) const = default;
};

struct AttentionWeights {
  Tensor wq, wk, wv, wo;
};

struct EncoderLayerParams {
  AttentionWeights self;
  Tensor ln1_gain, ln1_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  Tensor ln2_gain, ln2_bias;
};

struct DecoderLayerParams {
  AttentionWeights self;
  Tensor ln1_gain, ln1_bias;
  AttentionWeights cross;
  Tensor ln2_gain, ln2_bias;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  Tensor ln3_gain, ln3_bias;
};

class TransformerParams {
 public:
  ModelConfig config;
  Tensor src_embedding;  // [src_vocab × d]
  Tensor tgt_embedding;  // [tgt_vocab × d]
  Tensor output_proj;    // [d × tgt_vocab]
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;

  static TransformerParams init(const ModelConfig& config, std::uint64_t seed);

  // Parameters in checkpoint manifest order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  // Frozen parameters do not track gradients.
  void set_frozen(bool frozen);
  bool frozen() const;

  // MPLG1 checkpoint: f32 payload in manifest order.
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static TransformerParams deserialize(const std::string& bytes);
  static TransformerParams load(const std::filesystem::path& path);

  // Rounds every value to f32, matching what a save/load cycle produces.
  void round_to_storage_precision();
};

// Replaces attention outputs inside decoder layers. Both hooks must return a
// tensor with the anchor's shape.
class DecoderPlugin {
 public:
  virtual ~DecoderPlugin() = default;
  // Self-attention site; `s` is both anchor and query.
  virtual Tensor adapt_self(std::size_t layer, const Tensor& s) const = 0;
  // Cross-attention site; anchor `c`, query `l1`.
  virtual Tensor adapt_cross(std::size_t layer, const Tensor& c, const Tensor& l1) const = 0;
};

struct CapturedReps {
  Tensor E;                  // [batch*src_len × d]
  std::vector<Tensor> S;     // per decoder layer, [batch*tgt_len × d]
  std::vector<Tensor> C;
  std::vector<Tensor> L1;
  std::vector<Tensor> L2;
  std::vector<Tensor> D;     // layers+1 entries; D[0] is the embedded target input
};

struct EncoderState {
  Tensor states;  // [batch*len × d]
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> lengths;
};

struct ForwardOptions {
  const DecoderPlugin* plugin = nullptr;
  CapturedReps* capture = nullptr;
  // Base-model dropout is active only when both are set.
  std::mt19937_64* dropout_rng = nullptr;
  double dropout = 0.0;
};

// Pads `seqs` with PAD to a common length; returns flattened ids and lengths.
std::pair<std::vector<int>, std::vector<int>> pad_batch(const std::vector<std::vector<int>>& seqs,
                                                         std::size_t& max_len);

Tensor sinusoidal_positions(std::size_t len, std::size_t d);

EncoderState encode_batch(const TransformerParams& params, const std::vector<std::vector<int>>& src,
                          const ForwardOptions& options = {});

// Final decoder states [batch*tgt_len × d] for BOS-prefixed target inputs.
Tensor decode_batch(const TransformerParams& params, const EncoderState& enc,
                    const std::vector<std::vector<int>>& tgt_in, const ForwardOptions& options = {});

// One decoder layer (self-attention, adapter hooks, cross-attention, FFN).
Tensor decoder_layer(const DecoderLayerParams& layer, std::size_t layer_index, const Tensor& d_prev,
                     const EncoderState& enc, std::size_t tgt_len, std::span<const int> tgt_lengths,
                     int heads, const ForwardOptions& options);

Tensor output_logits(const TransformerParams& params, const Tensor& states);

// Single-sentence encoder pass. Throws ContractError on empty input.
Tensor encode(std::span<const int> x, const TransformerParams& params);

struct TeacherForcedResult {
  Tensor logits;  // [|y| × tgt_vocab]
  std::optional<CapturedReps> reps;
};

// `y` is the decoder input and must begin with BOS.
TeacherForcedResult forward_teacher_forced(std::span<const int> x, std::span<const int> y,
                                           const TransformerParams& params, bool capture,
                                           const DecoderPlugin* plugin = nullptr);

// Mean NLL of gold next tokens over non-PAD positions.
Tensor nll_loss(const Tensor& logits, std::span<const int> gold);

}  // namespace mplug
