// Command-line front end for the pipeline stages and experiment runners.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mplug/beam.hpp"
#include "mplug/container.hpp"
#include "mplug/errors.hpp"
#include "mplug/experiment.hpp"
#include "mplug/knn.hpp"
#include "mplug/mem_adapter.hpp"
#include "mplug/memory_bank.hpp"
#include "mplug/metrics.hpp"
#include "mplug/phrases.hpp"
#include "mplug/synthetic.hpp"
#include "mplug/trainer.hpp"

namespace fs = std::filesystem;
using namespace mplug;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

ExperimentConfig load_config(const Globals& g) {
  if (g.config.empty()) return ExperimentConfig{};
  if (!fs::exists(g.config)) throw MissingArtifact(g.config);
  return ExperimentConfig::load(g.config);
}

void require(const std::string& path) {
  if (!fs::exists(path)) throw MissingArtifact(path);
}

// The vocabularies a model is used with must be the ones it was built for.
void check_vocabs(const TransformerParams& m, const Vocab& sv, const Vocab& tv) {
  if (sv.size() != m.config.src_vocab || tv.size() != m.config.tgt_vocab) {
    throw DimensionError("vocabulary sizes " + std::to_string(sv.size()) + "/" + std::to_string(tv.size()) +
                         " do not match the model's " + std::to_string(m.config.src_vocab) + "/" +
                         std::to_string(m.config.tgt_vocab));
  }
}

std::string escape(std::string s) {
  for (char& c : s) {
    if (c == '"' || c == '\n') c = '\'';
  }
  return s;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << "error kind=" << kind << " message=\"" << escape(message) << "\"\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memory-augmented adapters for a frozen NMT model"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  Globals g;
  app.add_option("--config", g.config, "JSON experiment config");
  app.add_option("--seed", g.seed, "Seed override");
  app.add_option("--out", g.out, "Output directory");

  std::string data, src_vocab, tgt_vocab, model, reverse, parses, bank, adapter, datastore, input, hyp, ref,
      lexicon, valid, suite;
  std::optional<double> lambda;
  bool reverse_direction = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic style task");

  auto* train_base_cmd = app.add_subcommand("train-base", "Train a general-domain model");
  train_base_cmd->add_option("--data", data, "Parallel corpus (source<TAB>target)")->required();
  train_base_cmd->add_option("--src-vocab", src_vocab)->required();
  train_base_cmd->add_option("--tgt-vocab", tgt_vocab)->required();
  train_base_cmd->add_flag("--reverse", reverse_direction, "Train target-to-source");

  auto* build_mem = app.add_subcommand("build-memory", "Extract, pair, partition and encode phrases");
  build_mem->add_option("--model", model, "Base checkpoint")->required();
  build_mem->add_option("--reverse", reverse, "Reverse checkpoint")->required();
  build_mem->add_option("--parses", parses, "Bracketed target parses (or plain sentences in ngram mode)")->required();
  build_mem->add_option("--tgt-vocab", tgt_vocab)->required();

  auto* train_adapter = app.add_subcommand("train-adapter", "Train memory-augmented adapters");
  train_adapter->add_option("--model", model)->required();
  train_adapter->add_option("--bank", bank)->required();
  train_adapter->add_option("--data", data)->required();
  train_adapter->add_option("--valid", valid);
  train_adapter->add_option("--src-vocab", src_vocab)->required();
  train_adapter->add_option("--tgt-vocab", tgt_vocab)->required();

  auto* build_ds = app.add_subcommand("build-datastore", "Build the kNN datastore");
  build_ds->add_option("--model", model)->required();
  build_ds->add_option("--adapter", adapter);
  build_ds->add_option("--bank", bank);
  build_ds->add_option("--data", data)->required();
  build_ds->add_option("--src-vocab", src_vocab)->required();
  build_ds->add_option("--tgt-vocab", tgt_vocab)->required();

  auto* translate = app.add_subcommand("translate", "Beam-search translation of source lines");
  translate->add_option("--model", model)->required();
  translate->add_option("--adapter", adapter);
  translate->add_option("--bank", bank);
  translate->add_option("--datastore", datastore);
  translate->add_option("--lambda", lambda, "kNN interpolation weight");
  translate->add_option("--input", input, "Source sentences, one per line")->required();
  translate->add_option("--src-vocab", src_vocab)->required();
  translate->add_option("--tgt-vocab", tgt_vocab)->required();

  auto* evaluate = app.add_subcommand("evaluate", "BLEU and style-marker accuracy");
  evaluate->add_option("--hyp", hyp, "Hypotheses, one per line")->required();
  evaluate->add_option("--ref", ref, "References, one per line")->required();
  evaluate->add_option("--lexicon", lexicon, "neutral<TAB>style lexicon")->required();

  auto* ablate = app.add_subcommand("ablate", "Run an ablation suite");
  ablate->add_option("--suite", suite)->required();

  auto* report = app.add_subcommand("report", "Run the full experiment and write report.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what(), 2);
  }

  try {
    ExperimentConfig cfg = load_config(g);
    const fs::path out(g.out);
    fs::create_directories(out);

    if (*gen) {
      if (g.seed) cfg.task.seed = *g.seed;
      gen_synthetic_corpus(cfg.task, out);
    } else if (*train_base_cmd) {
      for (const auto& p : {data, src_vocab, tgt_vocab}) require(p);
      const Vocab sv = Vocab::load(src_vocab);
      const Vocab tv = Vocab::load(tgt_vocab);
      auto examples = to_examples(read_corpus(data), sv, tv);
      ModelConfig mc = cfg.model;
      mc.src_vocab = sv.size();
      mc.tgt_vocab = tv.size();
      if (reverse_direction) {
        for (auto& e : examples) std::swap(e.source, e.target);
        std::swap(mc.src_vocab, mc.tgt_vocab);
      }
      TrainConfig tc = cfg.base_train;
      if (g.seed) tc.seed = *g.seed;
      TransformerParams m = TransformerParams::init(mc, tc.seed);
      const TrainLog log = train_base(m, examples, tc, cfg.base_dropout);
      const std::string name = reverse_direction ? "reverse" : "base";
      m.save(out / (name + ".mplg"));
      write_file_bytes(out / (name + ".log.csv"), log.csv());
    } else if (*build_mem) {
      for (const auto& p : {model, reverse, parses, tgt_vocab}) require(p);
      const TransformerParams base = TransformerParams::load(model);
      const TransformerParams rev = TransformerParams::load(reverse);
      const Vocab tv = Vocab::load(tgt_vocab);
      auto lines = read_lines(parses);
      if (cfg.memory.sentences > 0 && lines.size() > static_cast<std::size_t>(cfg.memory.sentences)) {
        lines.resize(static_cast<std::size_t>(cfg.memory.sentences));
      }
      const auto phrases = extract_corpus_phrases(lines, cfg.memory.l_max, cfg.memory.mode);
      Prepared prep{{}, base, rev, pair_phrases(phrases, tv, rev, cfg.memory.beam)};
      BuildStats stats;
      std::vector<PhrasePair> pairs;
      for (const auto& p : prep.pairs) {
        if (cfg.memory.only_length == 0 || p.target_len() == cfg.memory.only_length) pairs.push_back(p);
      }
      const auto layers = partition_phrases(pairs, base.config.layers, cfg.memory.partition, g.seed.value_or(0),
                                            cfg.memory.active_layers);
      const MemoryBank mb = build_memory(assign_layers(std::move(pairs), layers), base, &stats);
      mb.save(out / "memory.mbnk");
      std::cout << "items=" << mb.total_items() << " skipped=" << stats.skipped << "\n";
    } else if (*train_adapter) {
      for (const auto& p : {model, bank, data, src_vocab, tgt_vocab}) require(p);
      const TransformerParams base = TransformerParams::load(model);
      const MemoryBank mb = MemoryBank::load(bank);
      mb.validate_for(base.config);
      const Vocab sv = Vocab::load(src_vocab);
      const Vocab tv = Vocab::load(tgt_vocab);
      check_vocabs(base, sv, tv);
      const auto train = to_examples(read_corpus(data), sv, tv);
      std::vector<Example> val;
      if (!valid.empty()) {
        require(valid);
        val = to_examples(read_corpus(valid), sv, tv);
      }
      const std::uint64_t seed = g.seed.value_or(cfg.adapter_train.seed);
      TrainConfig tc = cfg.adapter_train;
      tc.seed = seed;
      LossConfig lc = cfg.loss;
      lc.seed = seed;
      AdapterParams a = init_adapter_params(base.config.d, base.config.layers, seed);
      if (cfg.memory.usage == "no_gate") a.fixed_gate = 0.5;
      const TrainLog log = train_adapters(base, a, usage_view(mb, cfg.memory), train, tc, lc, val);
      a.save(out / "adapter.madp");
      write_file_bytes(out / "adapter.log.csv", log.csv());
      if (!log.validation.empty()) write_file_bytes(out / "adapter.valid.csv", log.validation_csv());
    } else if (*build_ds) {
      for (const auto& p : {model, data, src_vocab, tgt_vocab}) require(p);
      const TransformerParams base = TransformerParams::load(model);
      const Vocab sv = Vocab::load(src_vocab);
      const Vocab tv = Vocab::load(tgt_vocab);
      check_vocabs(base, sv, tv);
      const auto corpus = to_examples(read_corpus(data), sv, tv);
      std::optional<AdapterParams> a;
      std::optional<MemoryBank> mb;
      std::optional<MemoryAdapterPlugin> plugin;
      if (!adapter.empty() || !bank.empty()) {
        require(adapter);
        require(bank);
        a = AdapterParams::load(adapter);
        mb = MemoryBank::load(bank);
        plugin.emplace(*a, mb->view());
      }
      const Datastore ds = build_datastore(base, plugin ? &*plugin : nullptr, corpus);
      ds.save(out / "datastore.mknn");
      std::cout << "entries=" << ds.size() << "\n";
    } else if (*translate) {
      for (const auto& p : {model, input, src_vocab, tgt_vocab}) require(p);
      const TransformerParams base = TransformerParams::load(model);
      const Vocab sv = Vocab::load(src_vocab);
      const Vocab tv = Vocab::load(tgt_vocab);
      check_vocabs(base, sv, tv);
      std::optional<AdapterParams> a;
      std::optional<MemoryBank> mb;
      std::optional<MemoryAdapterPlugin> plugin;
      if (!adapter.empty() || !bank.empty()) {
        require(adapter);
        require(bank);
        a = AdapterParams::load(adapter);
        mb = MemoryBank::load(bank);
        mb->validate_for(base.config);
        plugin.emplace(*a, mb->view());
      }
      std::optional<Datastore> ds;
      KnnConfig knn = cfg.knn;
      if (lambda) knn.lambda = *lambda;
      if (!datastore.empty()) {
        require(datastore);
        ds = Datastore::load(datastore);
      }
      std::vector<SentencePair> corpus;
      for (const auto& line : read_lines(input)) corpus.push_back({line, ""});
      const Translation t = translate_corpus(base, plugin ? &*plugin : nullptr, corpus, sv, tv, cfg.beam,
                                             ds ? &*ds : nullptr, &knn);
      write_lines(out / "translations.txt", t.hypotheses);
    } else if (*evaluate) {
      for (const auto& p : {hyp, ref, lexicon}) require(p);
      const auto h = read_lines(hyp);
      const auto r = read_lines(ref);
      const double b = bleu(h, r);
      const double s = style_marker_accuracy(h, r, read_lexicon(lexicon));
      const std::string csv = "bleu,style_acc\n" + std::to_string(b) + "," + std::to_string(s) + "\n";
      write_file_bytes(out / "evaluation.csv", csv);
      std::cout << csv;
    } else if (*ablate) {
      if (g.seed) cfg.seeds = {*g.seed};
      run_ablation(suite, cfg, out);
    } else if (*report) {
      if (g.seed) cfg.seeds = {*g.seed};
      std::cout << run_experiment(cfg, out).csv();
    }
  } catch (const MissingArtifact& e) {
    return fail("missing_artifact", e.path(), 3);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const FormatError& e) {
    return fail("format", e.what(), 4);
  } catch (const ParseError& e) {
    return fail("parse", e.what(), 4);
  } catch (const DivergenceError& e) {
    return fail("divergence", e.what(), 5);
  } catch (const DimensionError& e) {
    return fail("dimension", e.what(), 6);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 0;
}
