#pragma once

#include <map>
#include <string>
#include <vector>

namespace mplug {

// Corpus BLEU-4 on space-split tokens in [0,100]. Unigram precision is
// unsmoothed; orders 2..4 use (matches+1)/(total+1). Brevity penalty on the
// corpus totals.
double bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references);

// Among reference positions holding a style token (a lexicon value), the
// fraction whose hypothesis token at the same position is also a style
// token. Positions past the shorter sentence count as misses. 0 when no
// reference position is style-marked.
double style_marker_accuracy(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                             const std::map<std::string, std::string>& lexicon);

}  // namespace mplug
