#include "mplug/beam.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

#include "mplug/errors.hpp"
#include "mplug/ops.hpp"
#include "mplug/vocab.hpp"

namespace mplug {

namespace {

struct Candidate {
  double score;
  std::size_t parent;
  int token;
};

struct Finished {
  std::vector<int> tokens;
  double normalized;
  int step;
};

bool better(const Finished& a, const Finished& b) {
  if (a.normalized != b.normalized) return a.normalized > b.normalized;
  if (a.tokens != b.tokens) return a.tokens < b.tokens;
  return a.step < b.step;
}

}  // namespace

std::vector<int> beam_search(const StepScorer& scorer, const BeamOptions& options) {
  if (options.beam_size < 1) throw ContractError("beam_search: beam_size must be >= 1");
  if (options.max_len < 1) throw ContractError("beam_search: max_len must be >= 1");
  const auto beam = static_cast<std::size_t>(options.beam_size);

  std::vector<std::vector<int>> live{{}};
  std::vector<double> live_scores{0.0};
  std::vector<Finished> finished;
  for (int step = 1; step <= options.max_len && !live.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    prefixes.reserve(live.size());
    for (const auto& h : live) {
      std::vector<int> p{kBos};
      p.insert(p.end(), h.begin(), h.end());
      prefixes.push_back(std::move(p));
    }
    const auto log_probs = scorer(prefixes);
    if (log_probs.size() != live.size()) throw DimensionError("beam_search: scorer returned wrong batch size");

    std::vector<Candidate> candidates;
    for (std::size_t i = 0; i < live.size(); ++i) {
      for (std::size_t tok = 0; tok < log_probs[i].size(); ++tok) {
        const double lp = log_probs[i][tok];
        if (std::isinf(lp) && lp < 0) continue;
        candidates.push_back({live_scores[i] + lp, i, static_cast<int>(tok)});
      }
    }
    const std::size_t keep = std::min(beam, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [](const Candidate& a, const Candidate& b) {
                        return std::tie(b.score, a.token, a.parent) < std::tie(a.score, b.token, b.parent);
                      });
    candidates.resize(keep);

    std::vector<std::vector<int>> next_live;
    std::vector<double> next_scores;
    for (const auto& c : candidates) {
      std::vector<int> tokens = live[c.parent];
      if (c.token == kEos) {
        finished.push_back({std::move(tokens), c.score / static_cast<double>(step), step});
        continue;
      }
      tokens.push_back(c.token);
      if (step == options.max_len) {
        finished.push_back({std::move(tokens), c.score / static_cast<double>(step), step});
        continue;
      }
      next_live.push_back(std::move(tokens));
      next_scores.push_back(c.score);
    }
    live = std::move(next_live);
    live_scores = std::move(next_scores);
  }
  if (finished.empty()) return {};
  return std::min_element(finished.begin(), finished.end(), better)->tokens;
}

std::vector<int> greedy_decode(const StepScorer& scorer, int max_len) {
  std::vector<int> out;
  for (int step = 0; step < max_len; ++step) {
    std::vector<int> prefix{kBos};
    prefix.insert(prefix.end(), out.begin(), out.end());
    const auto lp = scorer({prefix}).at(0);
    std::size_t best = lp.size();
    for (std::size_t t = 0; t < lp.size(); ++t) {
      if (std::isinf(lp[t]) && lp[t] < 0) continue;
      if (best == lp.size() || lp[t] > lp[best]) best = t;
    }
    if (best == lp.size() || static_cast<int>(best) == kEos) break;
    out.push_back(static_cast<int>(best));
  }
  return out;
}

ModelScorer::ModelScorer(const TransformerParams& params, std::span<const int> src, const DecoderPlugin* plugin)
    : params_(params), plugin_(plugin) {
  NoGradGuard no_grad;
  enc_ = encode_batch(params, {std::vector<int>(src.begin(), src.end())});
}

ModelScorer::Output ModelScorer::score(const std::vector<std::vector<int>>& prefixes) const {
  NoGradGuard no_grad;
  const std::size_t n = prefixes.size();
  const std::size_t len = prefixes.front().size();
  for (const auto& p : prefixes) {
    if (p.size() != len) throw ContractError("ModelScorer: prefixes must share a length");
  }
  // Replicate the single encoded source across the prefix batch.
  EncoderState enc;
  enc.batch = n;
  enc.len = enc_.len;
  enc.lengths.assign(n, enc_.lengths.front());
  std::vector<double> tiled;
  tiled.reserve(n * enc_.states.numel());
  for (std::size_t i = 0; i < n; ++i) tiled.insert(tiled.end(), enc_.states.data().begin(), enc_.states.data().end());
  enc.states = Tensor::from({n * enc_.len, static_cast<std::size_t>(params_.config.d)}, std::move(tiled));

  ForwardOptions options;
  options.plugin = plugin_;
  const Tensor states = decode_batch(params_, enc, prefixes, options);
  const auto d = static_cast<std::size_t>(params_.config.d);
  std::vector<std::size_t> last_rows(n);
  for (std::size_t i = 0; i < n; ++i) last_rows[i] = i * len + len - 1;
  const Tensor last = select_rows(states, last_rows);
  const Tensor lp = log_softmax(output_logits(params_, last));
  const std::size_t v = lp.cols();
  Output out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(lp.data().begin() + static_cast<std::ptrdiff_t>(i * v),
                            lp.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * v));
    row[kPad] = -std::numeric_limits<double>::infinity();
    row[kBos] = -std::numeric_limits<double>::infinity();
    out.log_probs.push_back(std::move(row));
    out.states.emplace_back(last.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                            last.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  }
  return out;
}

StepScorer ModelScorer::as_step_scorer() const {
  return [this](const std::vector<std::vector<int>>& prefixes) { return score(prefixes).log_probs; };
}

int default_max_len(std::size_t src_len) { return static_cast<int>(2 * src_len + 10); }

std::vector<int> beam_search(std::span<const int> x, const TransformerParams& params, int beam_size, int max_len,
                             const DecoderPlugin* plugin) {
  const ModelScorer scorer(params, x, plugin);
  return beam_search(scorer.as_step_scorer(), BeamOptions{beam_size, max_len});
}

}  // namespace mplug
