#pragma once

// Token-level datastore and interpolated next-token distributions.
//
// Keys are final decoder states (the input of the output projection) under
// teacher forcing; values are the gold next tokens. Search is exact
// brute-force squared Euclidean distance, ties broken by entry index.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mplug/beam.hpp"
#include "mplug/trainer.hpp"
#include "mplug/transformer.hpp"

namespace mplug {

struct KnnConfig {
  int k = 8;
  double temperature = 30.0;
  double lambda = 0.7;

  void validate() const;
};

class Datastore {
 public:
  Datastore() = default;
  // `keys` is row-major [N × d]; values are rounded to f32 on entry.
  Datastore(std::size_t d, std::vector<double> keys, std::vector<int> values);

  std::size_t size() const { return values_.size(); }
  std::size_t d() const { return d_; }
  std::span<const double> key(std::size_t i) const { return {keys_.data() + i * d_, d_}; }
  int value(std::size_t i) const { return values_.at(i); }

  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static Datastore deserialize(const std::string& bytes);
  static Datastore load(const std::filesystem::path& path);

  bool operator==(const Datastore&) const = default;

 private:
  std::size_t d_ = 0;
  std::vector<double> keys_;
  std::vector<int> values_;
};

// One entry per target position, EOS included.
Datastore build_datastore(const TransformerParams& base, const DecoderPlugin* plugin,
                          const std::vector<Example>& corpus, int batch_tokens = 512);

struct Neighbor {
  std::size_t index;
  double distance;
};

// The min(k, N) nearest entries in ascending (distance, index) order.
std::vector<Neighbor> nearest(std::span<const double> query, const Datastore& ds, int k);

// softmax(-distance / T) over the neighbors, summed per token id.
std::vector<double> knn_probability(std::span<const double> query, const Datastore& ds, const KnnConfig& cfg,
                                    std::size_t vocab_size);

// λ p_knn + (1 - λ) p_model.
std::vector<double> interpolate(std::span<const double> p_model, std::span<const double> p_knn, double lambda);

// Step scorer over interpolated distributions; λ = 0 returns the model
// log-probabilities untouched.
StepScorer knn_step_scorer(const ModelScorer& model, const Datastore& ds, const KnnConfig& cfg);

std::vector<int> decode_with_knn(std::span<const int> x, const TransformerParams& base, const DecoderPlugin* plugin,
                                 const Datastore& ds, const KnnConfig& cfg, int beam_size, int max_len);

}  // namespace mplug
