#pragma once

// Config-driven pipelines: train base → build memory → train plugin →
// decode → score, per system and seed, plus the ablation suites.
//
// Output layout under the run directory:
//   data/                    synthetic corpora, vocabularies, lexicon, parses
//   base.mplg reverse.mplg   general-domain models (unless given in the config)
//   pairs.tsv                back-translated phrase pairs (target<TAB>source)
//   memory.mbnk              the default memory bank
//   seed-<s>/                adapters, training logs, datastore, translations
//   report.csv provenance.json

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mplug/knn.hpp"
#include "mplug/memory_bank.hpp"
#include "mplug/synthetic.hpp"
#include "mplug/trainer.hpp"
#include "mplug/transformer.hpp"

namespace mplug {

struct MemoryConfig {
  int l_max = 3;
  PhraseMode mode = PhraseMode::Tree;
  PartitionStrategy partition = PartitionStrategy::ShortToLong;
  // Phrases come from the first `sentences` customization parses (0 = all).
  int sentences = 200;
  int beam = 4;
  // Layers receiving memory; empty means all.
  std::vector<int> active_layers;
  // Keep only phrases of this target length (0 = the full mix).
  int only_length = 0;
  // "full", "no_gate", "no_source" or "no_target".
  std::string usage = "full";
};

// The default task with style tokens present but rare in the general corpus.
inline SyntheticTaskSpec desk_task() {
  SyntheticTaskSpec t;
  t.general_style_rate = 0.05;
  return t;
}

struct ExperimentConfig {
  SyntheticTaskSpec task = desk_task();
  ModelConfig model;
  TrainConfig base_train = {2500, 256, 200, 3e-3, 0.1, 0, 100, 0};
  double base_dropout = 0.1;
  MemoryConfig memory;
  TrainConfig adapter_train = {1000, 128, 100, 3e-3, 0.0, 0, 50, 0};
  LossConfig loss;
  int bottleneck = 0;  // 0 = match the memory adapter's parameter count
  KnnConfig knn;
  std::vector<double> knn_lambdas = {0.0, 0.1, 0.2, 0.3, 0.5, 0.7};
  int beam = 4;
  int eval_sentences = 0;   // test sentences decoded (0 = all)
  int tune_sentences = 50;  // validation sentences used to pick λ_knn
  std::vector<std::string> systems = {"vanilla", "bottleneck", "memory", "memory+knn"};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  // Existing checkpoints; when set they must exist and are not retrained.
  std::string base_checkpoint;
  std::string reverse_checkpoint;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  void validate() const;
};

struct ReportRow {
  std::string system;
  std::uint64_t seed = 0;
  double bleu = 0.0;
  double style_accuracy = 0.0;
  double valid_nll = 0.0;
  std::size_t trainable_params = 0;
};

struct ExperimentReport {
  std::vector<ReportRow> rows;  // sorted by (system, seed)
  nlohmann::json provenance;

  std::string csv() const;
};

// Everything shared by the systems of one run.
struct Prepared {
  SyntheticTask task;
  TransformerParams base;
  TransformerParams reverse;
  std::vector<PhrasePair> pairs;  // unassigned
};

// Generates data and obtains base and reverse models and phrase pairs,
// writing them under `dir`.
Prepared prepare(const ExperimentConfig& cfg, const std::filesystem::path& dir);

// Pairs filtered and partitioned per the memory config, then encoded.
MemoryBank build_bank(const Prepared& prep, const MemoryConfig& mem, std::uint64_t seed = 0);

// The view the adapters read under the memory config's usage knob.
MemoryView usage_view(const MemoryBank& bank, const MemoryConfig& mem);

struct Translation {
  std::vector<std::string> hypotheses;
  std::vector<std::string> references;
};

Translation translate_corpus(const TransformerParams& base, const DecoderPlugin* plugin,
                             const std::vector<SentencePair>& corpus, const Vocab& src_vocab,
                             const Vocab& tgt_vocab, int beam, const Datastore* ds = nullptr,
                             const KnnConfig* knn = nullptr);

// Mean per-token NLL of the interpolated kNN distribution under teacher forcing.
double evaluate_knn_nll(const TransformerParams& base, const DecoderPlugin* plugin, const Datastore& ds,
                        const KnnConfig& knn, const std::vector<Example>& data);

ExperimentReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir);

struct AblationVariant {
  std::string name;
  ExperimentConfig config;
};

std::vector<std::string> ablation_suites();
std::vector<AblationVariant> ablation_variants(const std::string& suite, const ExperimentConfig& base);

struct AblationRow {
  std::string suite;
  std::string variant;
  std::uint64_t seed = 0;
  double final_valid_nll = 0.0;
  double bleu = 0.0;
  double style_accuracy = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  // (variant, seed) -> validation curve
  std::map<std::pair<std::string, std::uint64_t>, std::vector<std::pair<int, double>>> curves;
  nlohmann::json provenance;

  std::string csv() const;
  std::string curves_csv() const;
};

// Writes ablation-<suite>.csv, ablation-<suite>-curves.csv and
// ablation-<suite>-provenance.json under `dir`.
AblationReport run_ablation(const std::string& suite, const ExperimentConfig& cfg, const std::filesystem::path& dir);

// Keys whose values differ between two JSON objects, as JSON pointers.
std::vector<std::string> json_diff(const nlohmann::json& a, const nlohmann::json& b);

}  // namespace mplug
