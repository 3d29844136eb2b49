#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace mplug {

// Bracketed constituency tree, e.g. "(S (NP the cat) (VP sat))". Every
// non-leaf node carries a label; leaves are surface tokens.
struct ParseNode {
  std::string label;  // empty for leaves
  std::string token;  // empty for internal nodes
  std::vector<ParseNode> children;

  bool is_leaf() const { return children.empty(); }
};

// Throws ParseError (carrying `line`) on malformed bracketing.
ParseNode parse_bracketed(std::string_view text, int line = 1);
std::vector<std::string> tree_leaves(const ParseNode& root);

enum class PhraseMode { Tree, Ngram };

using Phrase = std::vector<std::string>;

// Tree mode: every constituent (including single leaves) with 1 <= length <=
// l_max, in pre-order. Ngram mode: every contiguous span up to l_max ordered
// by start then length; `input` is then a plain token sequence. Duplicates
// keep their first occurrence.
std::vector<Phrase> extract_phrases(std::string_view input, int l_max, PhraseMode mode, int line = 1);

// Runs extract_phrases over each line (line numbers start at 1) and
// deduplicates across the whole corpus.
std::vector<Phrase> extract_corpus_phrases(const std::vector<std::string>& lines, int l_max, PhraseMode mode);

// "(S a (S b c))" style right-branching binary bracketing.
std::string bracket_right_branching(const std::vector<std::string>& tokens);

}  // namespace mplug
