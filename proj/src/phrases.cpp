#include "mplug/phrases.hpp"

#include <cctype>
#include <set>

#include "mplug/errors.hpp"
#include "mplug/vocab.hpp"

namespace mplug {

namespace {

class TreeReader {
 public:
  TreeReader(std::string_view text, int line) : text_(text), line_(line) {}

  ParseNode read_root() {
    skip_space();
    if (peek() != '(') fail("expected '(' at start of tree");
    ParseNode root = read_node();
    skip_space();
    if (pos_ != text_.size()) fail("trailing characters after tree");
    return root;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(what + " (column " + std::to_string(pos_ + 1) + ")", line_);
  }

  char peek() const { return pos_ < text_.size() ? text_[pos_] : '\0'; }

  void skip_space() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  std::string read_atom() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && text_[pos_] != '(' && text_[pos_] != ')' &&
           !std::isspace(static_cast<unsigned char>(text_[pos_]))) {
      ++pos_;
    }
    return std::string(text_.substr(start, pos_ - start));
  }

  // Positioned on '('.
  ParseNode read_node() {
    ++pos_;
    skip_space();
    ParseNode node;
    if (peek() != '(') {
      node.label = read_atom();
      if (node.label.empty()) fail("missing constituent label");
    }
    for (;;) {
      skip_space();
      const char c = peek();
      if (c == '\0') fail("unbalanced brackets: missing ')'");
      if (c == ')') {
        ++pos_;
        break;
      }
      if (c == '(') {
        node.children.push_back(read_node());
      } else {
        ParseNode leaf;
        leaf.token = read_atom();
        node.children.push_back(std::move(leaf));
      }
    }
    if (node.children.empty()) fail("constituent without children");
    return node;
  }

  std::string_view text_;
  int line_;
  std::size_t pos_ = 0;
};

void collect_leaves(const ParseNode& node, std::vector<std::string>& out) {
  if (node.is_leaf()) {
    out.push_back(node.token);
    return;
  }
  for (const auto& child : node.children) collect_leaves(child, out);
}

// Returns the span length of `node`, emitting qualifying spans in pre-order.
std::size_t collect_spans(const ParseNode& node, std::size_t start,
                          std::vector<std::pair<std::size_t, std::size_t>>& spans) {
  if (node.is_leaf()) {
    spans.emplace_back(start, 1);
    return 1;
  }
  const std::size_t slot = spans.size();
  spans.emplace_back(start, 0);  // filled once the length is known
  std::size_t len = 0;
  for (const auto& child : node.children) len += collect_spans(child, start + len, spans);
  spans[slot].second = len;
  return len;
}

void add_unique(std::vector<Phrase>& out, std::set<Phrase>& seen, Phrase phrase) {
  if (seen.insert(phrase).second) out.push_back(std::move(phrase));
}

}  // namespace

ParseNode parse_bracketed(std::string_view text, int line) { return TreeReader(text, line).read_root(); }

std::vector<std::string> tree_leaves(const ParseNode& root) {
  std::vector<std::string> out;
  collect_leaves(root, out);
  return out;
}

std::vector<Phrase> extract_phrases(std::string_view input, int l_max, PhraseMode mode, int line) {
  if (l_max < 1) throw ContractError("extract_phrases: l_max must be >= 1");
  const auto max_len = static_cast<std::size_t>(l_max);
  std::vector<Phrase> out;
  std::set<Phrase> seen;
  if (mode == PhraseMode::Tree) {
    const ParseNode root = parse_bracketed(input, line);
    const auto leaves = tree_leaves(root);
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    collect_spans(root, 0, spans);
    for (const auto& [start, len] : spans) {
      if (len < 1 || len > max_len) continue;
      add_unique(out, seen, Phrase(leaves.begin() + static_cast<std::ptrdiff_t>(start),
                                   leaves.begin() + static_cast<std::ptrdiff_t>(start + len)));
    }
    return out;
  }
  const auto tokens = split_whitespace(input);
  for (std::size_t start = 0; start < tokens.size(); ++start) {
    for (std::size_t len = 1; len <= max_len && start + len <= tokens.size(); ++len) {
      add_unique(out, seen, Phrase(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                                   tokens.begin() + static_cast<std::ptrdiff_t>(start + len)));
    }
  }
  return out;
}

std::vector<Phrase> extract_corpus_phrases(const std::vector<std::string>& lines, int l_max, PhraseMode mode) {
  std::vector<Phrase> out;
  std::set<Phrase> seen;
  int line_no = 0;
  for (const auto& line : lines) {
    ++line_no;
    if (split_whitespace(line).empty()) continue;
    for (auto& p : extract_phrases(line, l_max, mode, line_no)) add_unique(out, seen, std::move(p));
  }
  return out;
}

std::string bracket_right_branching(const std::vector<std::string>& tokens) {
  if (tokens.empty()) throw ContractError("bracket_right_branching: empty sentence");
  if (tokens.size() == 1) return "(S " + tokens[0] + ")";
  // (S t0 (S t1 ( ... (S t_{n-2} t_{n-1}))))
  std::string out;
  for (std::size_t i = 0; i + 2 < tokens.size(); ++i) out += "(S " + tokens[i] + " ";
  out += "(S " + tokens[tokens.size() - 2] + " " + tokens.back() + ")";
  out += std::string(tokens.size() - 2, ')');
  return out;
}

}  // namespace mplug
