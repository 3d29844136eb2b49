#pragma once

// Synthetic style-transfer translation task.
//
// Source sentences are random strings over neutral source tokens. Both
// corpora translate them token by token through a seeded bijection and then
// replace each target token that has a style counterpart with that
// counterpart, at `general_style_rate` in the general corpus and at
// `style_rate` in the customization corpus.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mplug/vocab.hpp"

namespace mplug {

struct SyntheticTaskSpec {
  int neutral_tokens = 36;  // per side
  int style_tokens = 10;    // target-only, one per lexicon key
  int min_len = 4;
  int max_len = 9;
  double style_rate = 0.8;
  double general_style_rate = 0.0;
  int general_train = 4000;
  int custom_train = 2000;
  int custom_valid = 200;
  int custom_test = 200;
  std::uint64_t seed = 7;

  // Throws ConfigError on an inconsistent spec.
  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep the values of `defaults`.
  static SyntheticTaskSpec from_json(const nlohmann::json& j, const SyntheticTaskSpec& defaults);
  static SyntheticTaskSpec from_json(const nlohmann::json& j) { return from_json(j, SyntheticTaskSpec{}); }
};

struct SyntheticTask {
  Vocab source_vocab;
  Vocab target_vocab;
  std::map<std::string, std::string> lexicon;  // neutral target token -> style token
  std::vector<SentencePair> general_train;
  std::vector<SentencePair> custom_train;
  std::vector<SentencePair> custom_valid;
  std::vector<SentencePair> custom_test;
  std::vector<std::string> custom_train_parses;  // right-branching trees over custom_train targets
};

SyntheticTask generate_synthetic_task(const SyntheticTaskSpec& spec);

// Writes src.vocab, tgt.vocab, lexicon.tsv, general.train.tsv,
// custom.{train,valid,test}.tsv and custom.train.parse under `dir`.
void write_synthetic_task(const SyntheticTask& task, const std::filesystem::path& dir);

SyntheticTask gen_synthetic_corpus(const SyntheticTaskSpec& spec, const std::filesystem::path& dir);

std::map<std::string, std::string> read_lexicon(const std::filesystem::path& path);
void write_lexicon(const std::filesystem::path& path, const std::map<std::string, std::string>& lexicon);

}  // namespace mplug
