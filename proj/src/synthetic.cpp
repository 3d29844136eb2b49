#include "mplug/synthetic.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <random>

#include "mplug/errors.hpp"
#include "mplug/phrases.hpp"

namespace mplug {

namespace {

std::string name(char prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%c%02d", prefix, i);
  return buf;
}

}  // namespace

void SyntheticTaskSpec::validate() const {
  if (neutral_tokens < 1) throw ConfigError("task: neutral_tokens must be positive");
  if (style_tokens < 0 || style_tokens > neutral_tokens) {
    throw ConfigError("task: style_tokens must lie in [0, neutral_tokens]");
  }
  if (min_len < 1 || max_len < min_len) throw ConfigError("task: sentence length range is empty");
  if (!(style_rate >= 0.0 && style_rate <= 1.0)) throw ConfigError("task: style_rate must lie in [0,1]");
  if (!(general_style_rate >= 0.0 && general_style_rate <= 1.0)) {
    throw ConfigError("task: general_style_rate must lie in [0,1]");
  }
  if (general_train < 0 || custom_train < 0 || custom_valid < 0 || custom_test < 0) {
    throw ConfigError("task: corpus sizes must be nonnegative");
  }
  if ((style_rate > 0.0 || general_style_rate > 0.0) && style_tokens == 0) throw ConfigError("task: style_rate > 0 needs a style lexicon");
}

nlohmann::json SyntheticTaskSpec::to_json() const {
  return {{"neutral_tokens", neutral_tokens}, {"style_tokens", style_tokens}, {"min_len", min_len},
          {"max_len", max_len},               {"style_rate", style_rate},     {"general_style_rate", general_style_rate},
          {"general_train", general_train},
          {"custom_train", custom_train},     {"custom_valid", custom_valid}, {"custom_test", custom_test},
          {"seed", seed}};
}

SyntheticTaskSpec SyntheticTaskSpec::from_json(const nlohmann::json& j, const SyntheticTaskSpec& defaults) {
  SyntheticTaskSpec s = defaults;
  try {
    s.neutral_tokens = j.value("neutral_tokens", s.neutral_tokens);
    s.style_tokens = j.value("style_tokens", s.style_tokens);
    s.min_len = j.value("min_len", s.min_len);
    s.max_len = j.value("max_len", s.max_len);
    s.style_rate = j.value("style_rate", s.style_rate);
    s.general_style_rate = j.value("general_style_rate", s.general_style_rate);
    s.general_train = j.value("general_train", s.general_train);
    s.custom_train = j.value("custom_train", s.custom_train);
    s.custom_valid = j.value("custom_valid", s.custom_valid);
    s.custom_test = j.value("custom_test", s.custom_test);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("task: ") + e.what());
  }
  s.validate();
  return s;
}

SyntheticTask generate_synthetic_task(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);

  std::vector<std::string> src_tokens = Vocab::reserved_tokens();
  std::vector<std::string> tgt_tokens = Vocab::reserved_tokens();
  for (int i = 0; i < spec.neutral_tokens; ++i) src_tokens.push_back(name('a', i));
  for (int i = 0; i < spec.neutral_tokens; ++i) tgt_tokens.push_back(name('b', i));
  for (int i = 0; i < spec.style_tokens; ++i) tgt_tokens.push_back(name('z', i));

  SyntheticTask task{Vocab(src_tokens), Vocab(tgt_tokens), {}, {}, {}, {}, {}, {}};
  for (int i = 0; i < spec.style_tokens; ++i) task.lexicon[name('b', i)] = name('z', i);

  std::vector<int> perm(static_cast<std::size_t>(spec.neutral_tokens));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  std::uniform_int_distribution<int> len_dist(spec.min_len, spec.max_len);
  std::uniform_int_distribution<int> tok_dist(0, spec.neutral_tokens - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  auto sample = [&](double rate) {
    const int len = len_dist(rng);
    std::vector<std::string> src;
    std::vector<std::string> tgt;
    for (int i = 0; i < len; ++i) {
      const int s = tok_dist(rng);
      src.push_back(name('a', s));
      std::string t = name('b', perm[static_cast<std::size_t>(s)]);
      const auto it = task.lexicon.find(t);
      // One draw per eligible token keeps the stream aligned across rates.
      if (it != task.lexicon.end() && coin(rng) < rate) t = it->second;
      tgt.push_back(std::move(t));
    }
    return SentencePair{join_tokens(src), join_tokens(tgt)};
  };

  for (int i = 0; i < spec.general_train; ++i) task.general_train.push_back(sample(spec.general_style_rate));
  for (int i = 0; i < spec.custom_train; ++i) task.custom_train.push_back(sample(spec.style_rate));
  for (int i = 0; i < spec.custom_valid; ++i) task.custom_valid.push_back(sample(spec.style_rate));
  for (int i = 0; i < spec.custom_test; ++i) task.custom_test.push_back(sample(spec.style_rate));
  for (const auto& p : task.custom_train) task.custom_train_parses.push_back(bracket_right_branching(split_whitespace(p.target)));
  return task;
}

void write_synthetic_task(const SyntheticTask& task, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  task.source_vocab.save(dir / "src.vocab");
  task.target_vocab.save(dir / "tgt.vocab");
  write_lexicon(dir / "lexicon.tsv", task.lexicon);
  write_corpus(dir / "general.train.tsv", task.general_train);
  write_corpus(dir / "custom.train.tsv", task.custom_train);
  write_corpus(dir / "custom.valid.tsv", task.custom_valid);
  write_corpus(dir / "custom.test.tsv", task.custom_test);
  write_lines(dir / "custom.train.parse", task.custom_train_parses);
}

SyntheticTask gen_synthetic_corpus(const SyntheticTaskSpec& spec, const std::filesystem::path& dir) {
  SyntheticTask task = generate_synthetic_task(spec);
  write_synthetic_task(task, dir);
  return task;
}

std::map<std::string, std::string> read_lexicon(const std::filesystem::path& path) {
  std::map<std::string, std::string> out;
  const auto pairs = read_corpus(path);
  for (const auto& p : pairs) out[p.source] = p.target;
  return out;
}

void write_lexicon(const std::filesystem::path& path, const std::map<std::string, std::string>& lexicon) {
  std::vector<SentencePair> pairs;
  for (const auto& [k, v] : lexicon) pairs.push_back({k, v});
  write_corpus(path, pairs);
}

}  // namespace mplug
