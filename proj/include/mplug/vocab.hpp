#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mplug {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumReserved = 4;

inline bool is_special(int id) { return id == kPad || id == kBos || id == kEos; }

class Vocab {
 public:
  // Reserved tokens only.
  Vocab();
  // `tokens[0..3]` must be the reserved tokens; all entries unique.
  explicit Vocab(std::vector<std::string> tokens);

  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool contains(std::string_view token) const;

  // Whitespace split; unknown surface forms map to UNK.
  std::vector<int> tokenize(std::string_view text) const;
  // Space-joined tokens; PAD/BOS/EOS are dropped.
  std::string detokenize(std::span<const int> ids) const;

  static const std::vector<std::string>& reserved_tokens();

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

std::vector<std::string> split_whitespace(std::string_view text);
std::string join_tokens(const std::vector<std::string>& tokens);

struct SentencePair {
  std::string source;
  std::string target;
};

// "source<TAB>target" per line.
std::vector<SentencePair> read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, const std::vector<SentencePair>& pairs);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

}  // namespace mplug
