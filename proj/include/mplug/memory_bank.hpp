#pragma once

// Multi-granular continuous memory: phrase pairs partitioned across decoder
// layers, each encoded into one averaged source item (from the encoder
// output) and one averaged target item (from that layer's self-attention
// output) by a teacher-forced pass of the frozen base model.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mplug/phrases.hpp"
#include "mplug/tensor.hpp"
#include "mplug/transformer.hpp"
#include "mplug/vocab.hpp"

namespace mplug {

struct PhrasePair {
  std::vector<int> source_tokens;
  std::vector<int> target_tokens;
  std::string target_text;  // partition tie-break key
  int layer = -1;

  int target_len() const { return static_cast<int>(target_tokens.size()); }
  bool operator==(const PhrasePair&) const = default;
};

// Back-translates every target phrase with `reverse_model` (target→source)
// and pairs it with the result; empty back-translations are dropped.
std::vector<PhrasePair> pair_phrases(const std::vector<Phrase>& target_phrases, const Vocab& target_vocab,
                                     const TransformerParams& reverse_model, int beam_size = 4);

enum class PartitionStrategy { ShortToLong, LongToShort, Random };

PartitionStrategy parse_partition_strategy(const std::string& name);
std::string to_string(PartitionStrategy strategy);

// Sorts by (target_len, target_text), cuts into as many contiguous groups as
// there are active layers (sizes differ by at most one, larger groups
// first) and returns the layer of each input pair. `active_layers` defaults
// to 0..layers-1. Random shuffles with `seed` before cutting.
std::vector<int> partition_phrases(const std::vector<PhrasePair>& pairs, int layers, PartitionStrategy strategy,
                                   std::uint64_t seed = 0, std::span<const int> active_layers = {});

// Copies `pairs` with their layer fields set by partition_phrases.
std::vector<PhrasePair> assign_layers(std::vector<PhrasePair> pairs, const std::vector<int>& layers);

struct LayerMemory {
  Tensor source;  // M_s [N × d]
  Tensor target;  // M_t [N × d]
  std::vector<PhrasePair> pairs;

  std::size_t size() const { return pairs.size(); }
};

// Per-layer item matrices as seen by the adapters. Training-time memory
// dropout and the ablation variants operate on views; the bank itself is
// never mutated. Source and target item counts may differ in a view.
struct MemoryView {
  std::vector<Tensor> source;  // per layer, [N_s × d]
  std::vector<Tensor> target;  // per layer, [N_t × d]

  std::size_t layers() const { return source.size(); }
};

MemoryView without_source(MemoryView view);
MemoryView without_target(MemoryView view);

class MemoryBank {
 public:
  MemoryBank() = default;
  // Every layer empty.
  MemoryBank(int layers, int d);
  // Validates shapes and row alignment of every layer.
  MemoryBank(int d, std::vector<LayerMemory> layers);

  int layers() const { return static_cast<int>(layers_.size()); }
  int d() const { return d_; }
  const LayerMemory& layer(std::size_t i) const { return layers_.at(i); }
  std::size_t total_items() const;

  // Throws DimensionError when the bank cannot be used with `config`.
  void validate_for(const ModelConfig& config) const;

  // Read-only item matrices for the adapters.
  MemoryView view() const;

  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static MemoryBank deserialize(const std::string& bytes);
  static MemoryBank load(const std::filesystem::path& path);

  bool operator==(const MemoryBank& other) const;

 private:
  int d_ = 0;
  std::vector<LayerMemory> layers_;
};

struct BuildStats {
  std::size_t built = 0;
  std::size_t skipped = 0;
};

// Encodes assigned pairs into a bank. Items within a layer keep the input
// order of their pairs regardless of `threads`.
MemoryBank build_memory(const std::vector<PhrasePair>& assigned, const TransformerParams& base,
                        BuildStats* stats = nullptr, int threads = 1);

// Mean of the given rows of `states`, skipping rows whose id is PAD/BOS/EOS.
// Returns an empty vector when no row qualifies.
std::vector<double> average_rows(const Tensor& states, std::span<const int> ids, std::size_t row_offset);

}  // namespace mplug
