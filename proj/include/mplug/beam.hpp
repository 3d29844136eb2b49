#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mplug/transformer.hpp"

namespace mplug {

// Given BOS-prefixed prefixes of equal length, returns next-token
// log-probabilities per prefix. Entries equal to -inf are never expanded.
using StepScorer = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<int>>&)>;

struct BeamOptions {
  int beam_size = 4;
  int max_len = 32;
};

// Returns the generated tokens without BOS/EOS. Completed hypotheses are
// ranked by cumulative log-probability divided by their length (EOS
// included); ties go to the lexicographically smaller token sequence, then to
// the earlier completion. Hypotheses still open at max_len are completed as-is.
std::vector<int> beam_search(const StepScorer& scorer, const BeamOptions& options);
std::vector<int> greedy_decode(const StepScorer& scorer, int max_len);

// Next-token distributions and final decoder states for a fixed source.
class ModelScorer {
 public:
  ModelScorer(const TransformerParams& params, std::span<const int> src, const DecoderPlugin* plugin = nullptr);

  struct Output {
    std::vector<std::vector<double>> log_probs;
    std::vector<std::vector<double>> states;  // final decoder state of the last position
  };
  Output score(const std::vector<std::vector<int>>& prefixes) const;
  StepScorer as_step_scorer() const;

 private:
  const TransformerParams& params_;
  const DecoderPlugin* plugin_;
  EncoderState enc_;
};

int default_max_len(std::size_t src_len);

std::vector<int> beam_search(std::span<const int> x, const TransformerParams& params, int beam_size, int max_len,
                             const DecoderPlugin* plugin = nullptr);

}  // namespace mplug
