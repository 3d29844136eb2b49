#include "mplug/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mplug/errors.hpp"
#include "mplug/vocab.hpp"

namespace mplug {

namespace {

constexpr int kMaxOrder = 4;

std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& tokens, int n) {
  std::map<std::vector<std::string>, int> counts;
  const auto len = static_cast<int>(tokens.size());
  for (int i = 0; i + n <= len; ++i) ++counts[{tokens.begin() + i, tokens.begin() + i + n}];
  return counts;
}

}  // namespace

double bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references) {
  if (references.empty()) throw ContractError("bleu: empty reference set");
  if (hypotheses.size() != references.size()) throw DimensionError("bleu: hypothesis and reference counts differ");
  double matches[kMaxOrder] = {};
  double totals[kMaxOrder] = {};
  double hyp_len = 0.0;
  double ref_len = 0.0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto hyp = split_whitespace(hypotheses[s]);
    const auto ref = split_whitespace(references[s]);
    hyp_len += static_cast<double>(hyp.size());
    ref_len += static_cast<double>(ref.size());
    for (int n = 1; n <= kMaxOrder; ++n) {
      const auto h = ngram_counts(hyp, n);
      const auto r = ngram_counts(ref, n);
      for (const auto& [gram, count] : h) {
        const auto it = r.find(gram);
        if (it != r.end()) matches[n - 1] += std::min(count, it->second);
        totals[n - 1] += count;
      }
    }
  }
  if (hyp_len == 0.0 || matches[0] == 0.0) return 0.0;
  double log_sum = std::log(matches[0] / totals[0]);
  for (int n = 2; n <= kMaxOrder; ++n) log_sum += std::log((matches[n - 1] + 1.0) / (totals[n - 1] + 1.0));
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return 100.0 * bp * std::exp(log_sum / kMaxOrder);
}

double style_marker_accuracy(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                             const std::map<std::string, std::string>& lexicon) {
  if (lexicon.empty()) throw ContractError("style accuracy: empty lexicon");
  if (hypotheses.size() != references.size()) {
    throw DimensionError("style accuracy: hypothesis and reference counts differ");
  }
  std::set<std::string> marked;
  for (const auto& [neutral, styled] : lexicon) marked.insert(styled);
  std::size_t total = 0;
  std::size_t hits = 0;
  for (std::size_t s = 0; s < references.size(); ++s) {
    const auto hyp = split_whitespace(hypotheses[s]);
    const auto ref = split_whitespace(references[s]);
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (!marked.contains(ref[j])) continue;
      ++total;
      if (j < hyp.size() && marked.contains(hyp[j])) ++hits;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace mplug
