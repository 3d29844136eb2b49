#include "mplug/vocab.hpp"

#include <fstream>
#include <sstream>

#include "mplug/errors.hpp"

namespace mplug {

const std::vector<std::string>& Vocab::reserved_tokens() {
  static const std::vector<std::string> reserved{"<pad>", "<s>", "</s>", "<unk>"};
  return reserved;
}

Vocab::Vocab() : Vocab(reserved_tokens()) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto& reserved = reserved_tokens();
  if (tokens_.size() < reserved.size()) throw FormatError("vocab: reserved tokens missing");
  for (std::size_t i = 0; i < reserved.size(); ++i) {
    if (tokens_[i] != reserved[i]) {
      throw FormatError("vocab: line " + std::to_string(i) + " must be " + reserved[i]);
    }
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw FormatError("vocab: empty token at line " + std::to_string(i));
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw FormatError("vocab: duplicate token " + tokens_[i]);
    }
  }
}

Vocab Vocab::load(const std::filesystem::path& path) { return Vocab(read_lines(path)); }

void Vocab::save(const std::filesystem::path& path) const { write_lines(path, tokens_); }

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw DimensionError("vocab: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::tokenize(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& tok : split_whitespace(text)) ids.push_back(id(tok));
  return ids;
}

std::string Vocab::detokenize(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (is_special(id)) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact(path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

std::vector<SentencePair> read_corpus(const std::filesystem::path& path) {
  std::vector<SentencePair> pairs;
  int line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("corpus line has no TAB separator", line_no);
    pairs.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return pairs;
}

void write_corpus(const std::filesystem::path& path, const std::vector<SentencePair>& pairs) {
  std::vector<std::string> lines;
  lines.reserve(pairs.size());
  for (const auto& p : pairs) lines.push_back(p.source + '\t' + p.target);
  write_lines(path, lines);
}

}  // namespace mplug
