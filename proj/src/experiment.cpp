#include "mplug/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "mplug/beam.hpp"
#include "mplug/bottleneck.hpp"
#include "mplug/container.hpp"
#include "mplug/errors.hpp"
#include "mplug/mem_adapter.hpp"
#include "mplug/metrics.hpp"
#include "mplug/ops.hpp"
#include "mplug/phrases.hpp"

namespace mplug {

namespace fs = std::filesystem;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

json train_to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_tokens", c.batch_tokens},
          {"warmup", c.warmup},
          {"max_lr", c.max_lr},
          {"label_smoothing", c.label_smoothing},
          {"seed", c.seed},
          {"log_every", c.log_every},
          {"eval_every", c.eval_every}};
}

TrainConfig train_from_json(const json& j, TrainConfig c, const std::string& where) {
  check_keys(j, {"steps", "batch_tokens", "warmup", "max_lr", "label_smoothing", "seed", "log_every", "eval_every"},
             where);
  c.steps = j.value("steps", c.steps);
  c.batch_tokens = j.value("batch_tokens", c.batch_tokens);
  c.warmup = j.value("warmup", c.warmup);
  c.max_lr = j.value("max_lr", c.max_lr);
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.validate();
  return c;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string seed_dir(std::uint64_t seed) { return "seed-" + std::to_string(seed); }

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  write_file_bytes(path, text);
}

std::vector<Example> reversed(const std::vector<Example>& xs) {
  std::vector<Example> out;
  out.reserve(xs.size());
  for (const auto& e : xs) out.push_back({e.target, e.source});
  return out;
}

template <class T>
std::vector<T> head(const std::vector<T>& xs, int n) {
  if (n <= 0 || static_cast<std::size_t>(n) >= xs.size()) return xs;
  return {xs.begin(), xs.begin() + n};
}

// Saves and reloads so the in-memory model equals its persisted form.
TransformerParams persist(const TransformerParams& model, const fs::path& path) {
  model.save(path);
  return TransformerParams::load(path);
}

TransformerParams obtain_model(const std::string& checkpoint, const ModelConfig& config,
                               const std::vector<Example>& data, const TrainConfig& train, double dropout,
                               std::uint64_t seed, const fs::path& out) {
  if (!checkpoint.empty()) {
    if (!fs::exists(checkpoint)) throw MissingArtifact(checkpoint);
    TransformerParams m = TransformerParams::load(checkpoint);
    if (!(m.config == config)) throw ConfigError("checkpoint " + checkpoint + " does not match the model config");
    return m;
  }
  TransformerParams m = TransformerParams::init(config, seed);
  train_base(m, data, train, dropout);
  return persist(m, out);
}

void score(const Translation& t, const std::map<std::string, std::string>& lexicon, ReportRow& row) {
  row.bleu = bleu(t.hypotheses, t.references);
  row.style_accuracy = style_marker_accuracy(t.hypotheses, t.references, lexicon);
}

double elapsed(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

void collect_hashes(const fs::path& dir, json& files) {
  std::vector<fs::path> paths;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename() != "provenance.json" &&
        entry.path().filename().string().find("-provenance.json") == std::string::npos) {
      paths.push_back(entry.path());
    }
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) files[fs::relative(p, dir).generic_string()] = file_sha256(p);
}

AdapterParams fresh_adapters(const ExperimentConfig& cfg, std::uint64_t seed) {
  AdapterParams a = init_adapter_params(cfg.model.d, cfg.model.layers, seed);
  if (cfg.memory.usage == "no_gate") a.fixed_gate = 0.5;
  return a;
}

}  // namespace

json ExperimentConfig::to_json() const {
  json mem = {{"l_max", memory.l_max},
              {"mode", memory.mode == PhraseMode::Tree ? "tree" : "ngram"},
              {"partition", to_string(memory.partition)},
              {"sentences", memory.sentences},
              {"beam", memory.beam},
              {"active_layers", memory.active_layers},
              {"only_length", memory.only_length},
              {"usage", memory.usage}};
  return {{"task", task.to_json()},
          {"model", {{"d", model.d}, {"layers", model.layers}, {"heads", model.heads}, {"ffn", model.ffn}}},
          {"base_train", train_to_json(base_train)},
          {"base_dropout", base_dropout},
          {"memory", mem},
          {"adapter_train", train_to_json(adapter_train)},
          {"loss", {{"alpha", loss.alpha}, {"beta", loss.beta}, {"p", loss.p}, {"level", to_string(loss.level)}}},
          {"bottleneck", bottleneck},
          {"knn", {{"k", knn.k}, {"temperature", knn.temperature}, {"lambda", knn.lambda}}},
          {"knn_lambdas", knn_lambdas},
          {"beam", beam},
          {"eval_sentences", eval_sentences},
          {"tune_sentences", tune_sentences},
          {"systems", systems},
          {"seeds", seeds},
          {"base_checkpoint", base_checkpoint},
          {"reverse_checkpoint", reverse_checkpoint}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  try {
    check_keys(j, {"task", "model", "base_train", "base_dropout", "memory", "adapter_train", "loss", "bottleneck", "knn",
                   "knn_lambdas", "beam", "eval_sentences", "tune_sentences", "systems", "seeds", "base_checkpoint",
                   "reverse_checkpoint"},
               "config");
    if (j.contains("task")) c.task = SyntheticTaskSpec::from_json(j["task"], c.task);
    if (j.contains("model")) {
      const json& m = j["model"];
      check_keys(m, {"d", "layers", "heads", "ffn"}, "model");
      c.model.d = m.value("d", c.model.d);
      c.model.layers = m.value("layers", c.model.layers);
      c.model.heads = m.value("heads", c.model.heads);
      c.model.ffn = m.value("ffn", c.model.ffn);
    }
    if (j.contains("base_train")) c.base_train = train_from_json(j["base_train"], c.base_train, "base_train");
    c.base_dropout = j.value("base_dropout", c.base_dropout);
    if (j.contains("memory")) {
      const json& m = j["memory"];
      check_keys(m, {"l_max", "mode", "partition", "sentences", "beam", "active_layers", "only_length", "usage"},
                 "memory");
      c.memory.l_max = m.value("l_max", c.memory.l_max);
      const std::string mode = m.value("mode", std::string("tree"));
      if (mode != "tree" && mode != "ngram") throw ConfigError("memory: unknown mode " + mode);
      c.memory.mode = mode == "tree" ? PhraseMode::Tree : PhraseMode::Ngram;
      if (m.contains("partition")) c.memory.partition = parse_partition_strategy(m["partition"].get<std::string>());
      c.memory.sentences = m.value("sentences", c.memory.sentences);
      c.memory.beam = m.value("beam", c.memory.beam);
      c.memory.active_layers = m.value("active_layers", c.memory.active_layers);
      c.memory.only_length = m.value("only_length", c.memory.only_length);
      c.memory.usage = m.value("usage", c.memory.usage);
    }
    if (j.contains("adapter_train")) {
      c.adapter_train = train_from_json(j["adapter_train"], c.adapter_train, "adapter_train");
    }
    if (j.contains("loss")) {
      const json& l = j["loss"];
      check_keys(l, {"alpha", "beta", "p", "level"}, "loss");
      c.loss.alpha = l.value("alpha", c.loss.alpha);
      c.loss.beta = l.value("beta", c.loss.beta);
      c.loss.p = l.value("p", c.loss.p);
      if (l.contains("level")) c.loss.level = parse_dropout_level(l["level"].get<std::string>());
    }
    c.bottleneck = j.value("bottleneck", c.bottleneck);
    if (j.contains("knn")) {
      const json& k = j["knn"];
      check_keys(k, {"k", "temperature", "lambda"}, "knn");
      c.knn.k = k.value("k", c.knn.k);
      c.knn.temperature = k.value("temperature", c.knn.temperature);
      c.knn.lambda = k.value("lambda", c.knn.lambda);
    }
    c.knn_lambdas = j.value("knn_lambdas", c.knn_lambdas);
    c.beam = j.value("beam", c.beam);
    c.eval_sentences = j.value("eval_sentences", c.eval_sentences);
    c.tune_sentences = j.value("tune_sentences", c.tune_sentences);
    c.systems = j.value("systems", c.systems);
    c.seeds = j.value("seeds", c.seeds);
    c.base_checkpoint = j.value("base_checkpoint", c.base_checkpoint);
    c.reverse_checkpoint = j.value("reverse_checkpoint", c.reverse_checkpoint);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file_bytes(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::validate() const {
  task.validate();
  base_train.validate();
  adapter_train.validate();
  loss.validate();
  knn.validate();
  if (model.d <= 0 || model.layers <= 0 || model.heads <= 0 || model.ffn <= 0 || model.d % model.heads != 0) {
    throw ConfigError("model: invalid dimensions");
  }
  if (memory.l_max < 1) throw ConfigError("memory: l_max must be positive");
  if (memory.only_length < 0 || memory.only_length > memory.l_max) {
    throw ConfigError("memory: only_length must lie in [0, l_max]");
  }
  for (int l : memory.active_layers) {
    if (l < 0 || l >= model.layers) throw ConfigError("memory: active layer out of range");
  }
  static const std::set<std::string> usages = {"full", "no_gate", "no_source", "no_target"};
  if (!usages.contains(memory.usage)) throw ConfigError("memory: unknown usage " + memory.usage);
  static const std::set<std::string> known = {"vanilla", "bottleneck", "memory", "memory+knn"};
  for (const auto& s : systems) {
    if (!known.contains(s)) throw ConfigError("unknown system " + s);
  }
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (beam < 1 || memory.beam < 1) throw ConfigError("beam sizes must be positive");
  if (bottleneck < 0) throw ConfigError("bottleneck size must be nonnegative");
  for (double l : knn_lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("knn_lambdas must lie in [0,1]");
  }
}

std::string ExperimentReport::csv() const {
  std::string out = "system,seed,bleu,style_acc,valid_nll,trainable_params\n";
  for (const auto& r : rows) {
    out += r.system + "," + std::to_string(r.seed) + "," + fmt(r.bleu) + "," + fmt(r.style_accuracy) + "," +
           fmt(r.valid_nll) + "," + std::to_string(r.trainable_params) + "\n";
  }
  return out;
}

Prepared prepare(const ExperimentConfig& cfg, const fs::path& dir) {
  cfg.validate();
  fs::create_directories(dir);
  Prepared prep{generate_synthetic_task(cfg.task), {}, {}, {}};
  write_synthetic_task(prep.task, dir / "data");

  const auto& sv = prep.task.source_vocab;
  const auto& tv = prep.task.target_vocab;
  const auto general = to_examples(prep.task.general_train, sv, tv);
  ModelConfig fwd = cfg.model;
  fwd.src_vocab = sv.size();
  fwd.tgt_vocab = tv.size();
  prep.base = obtain_model(cfg.base_checkpoint, fwd, general, cfg.base_train, cfg.base_dropout, cfg.task.seed,
                           dir / "base.mplg");

  const auto rev_data = reversed(general);
  ModelConfig rev = cfg.model;
  rev.src_vocab = tv.size();
  rev.tgt_vocab = sv.size();
  prep.reverse = obtain_model(cfg.reverse_checkpoint, rev, rev_data, cfg.base_train, cfg.base_dropout,
                              cfg.task.seed + 1, dir / "reverse.mplg");

  std::vector<std::string> lines;
  if (cfg.memory.mode == PhraseMode::Tree) {
    lines = head(prep.task.custom_train_parses, cfg.memory.sentences);
  } else {
    for (const auto& p : head(prep.task.custom_train, cfg.memory.sentences)) lines.push_back(p.target);
  }
  const auto phrases = extract_corpus_phrases(lines, cfg.memory.l_max, cfg.memory.mode);
  prep.pairs = pair_phrases(phrases, tv, prep.reverse, cfg.memory.beam);
  std::vector<SentencePair> listing;
  for (const auto& p : prep.pairs) listing.push_back({p.target_text, sv.detokenize(p.source_tokens)});
  write_corpus(dir / "pairs.tsv", listing);
  return prep;
}

MemoryBank build_bank(const Prepared& prep, const MemoryConfig& mem, std::uint64_t seed) {
  std::vector<PhrasePair> pairs;
  for (const auto& p : prep.pairs) {
    if (mem.only_length == 0 || p.target_len() == mem.only_length) pairs.push_back(p);
  }
  const auto layers = partition_phrases(pairs, prep.base.config.layers, mem.partition, seed, mem.active_layers);
  return build_memory(assign_layers(std::move(pairs), layers), prep.base);
}

MemoryView usage_view(const MemoryBank& bank, const MemoryConfig& mem) {
  if (mem.usage == "no_source") return without_source(bank.view());
  if (mem.usage == "no_target") return without_target(bank.view());
  return bank.view();
}

Translation translate_corpus(const TransformerParams& base, const DecoderPlugin* plugin,
                             const std::vector<SentencePair>& corpus, const Vocab& src_vocab,
                             const Vocab& tgt_vocab, int beam, const Datastore* ds, const KnnConfig* knn) {
  Translation t;
  for (const auto& pair : corpus) {
    const auto x = src_vocab.tokenize(pair.source);
    const int max_len = default_max_len(x.size());
    const auto y = ds != nullptr ? decode_with_knn(x, base, plugin, *ds, *knn, beam, max_len)
                                 : beam_search(x, base, beam, max_len, plugin);
    t.hypotheses.push_back(tgt_vocab.detokenize(y));
    t.references.push_back(pair.target);
  }
  return t;
}

double evaluate_knn_nll(const TransformerParams& base, const DecoderPlugin* plugin, const Datastore& ds,
                        const KnnConfig& knn, const std::vector<Example>& data) {
  if (data.empty()) throw ContractError("evaluate_knn_nll: no examples");
  NoGradGuard guard;
  const auto d = static_cast<std::size_t>(base.config.d);
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t idx[] = {i};
    const Batch b = make_batch(data, idx);
    const EncoderState enc = encode_batch(base, b.source);
    ForwardOptions opts;
    opts.plugin = plugin;
    const Tensor states = decode_batch(base, enc, b.decoder_in, opts);
    const Tensor p_model = softmax(output_logits(base, states), 1);
    const std::size_t v = p_model.cols();
    for (std::size_t row = 0; row < b.gold.size(); ++row) {
      const std::span<const double> pm = p_model.data().subspan(row * v, v);
      const auto pk = knn_probability(states.data().subspan(row * d, d), ds, knn, v);
      const auto mixed = interpolate(pm, pk, knn.lambda);
      total -= std::log(mixed[static_cast<std::size_t>(b.gold[row])]);
      ++tokens;
    }
  }
  return total / static_cast<double>(tokens);
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, const fs::path& dir) {
  const auto t_prepare = std::chrono::steady_clock::now();
  const Prepared prep = prepare(cfg, dir);
  const auto& sv = prep.task.source_vocab;
  const auto& tv = prep.task.target_vocab;
  const auto& lexicon = prep.task.lexicon;
  MemoryBank bank = build_bank(prep, cfg.memory, cfg.task.seed);
  bank.save(dir / "memory.mbnk");
  bank = MemoryBank::load(dir / "memory.mbnk");
  const MemoryView view = usage_view(bank, cfg.memory);

  const auto train_ex = to_examples(prep.task.custom_train, sv, tv);
  const auto valid_ex = to_examples(prep.task.custom_valid, sv, tv);
  const auto test = head(prep.task.custom_test, cfg.eval_sentences);
  const auto tune = head(prep.task.custom_valid, cfg.tune_sentences);

  ExperimentReport report;
  json wall = json::object();
  json lambdas = json::object();
  wall["prepare"] = elapsed(t_prepare);
  auto has = [&](const std::string& s) { return std::find(cfg.systems.begin(), cfg.systems.end(), s) != cfg.systems.end(); };

  std::optional<ReportRow> vanilla;
  if (has("vanilla")) {
    const auto t0 = std::chrono::steady_clock::now();
    ReportRow row{"vanilla", 0, 0, 0, evaluate_nll(prep.base, nullptr, valid_ex), 0};
    const Translation t = translate_corpus(prep.base, nullptr, test, sv, tv, cfg.beam);
    score(t, lexicon, row);
    write_lines(dir / "vanilla.hyp", t.hypotheses);
    vanilla = row;
    wall["vanilla"] = elapsed(t0);
  }

  const std::size_t memory_params = init_adapter_params(cfg.model.d, cfg.model.layers, 0).parameter_count();
  const int bottleneck_size =
      cfg.bottleneck > 0 ? cfg.bottleneck : matched_bottleneck(cfg.model.d, cfg.model.layers, memory_params);

  for (std::uint64_t seed : cfg.seeds) {
    const fs::path sdir = dir / seed_dir(seed);
    fs::create_directories(sdir);
    const std::string key = std::to_string(seed);
    if (vanilla) {
      ReportRow row = *vanilla;
      row.seed = seed;
      report.rows.push_back(row);
    }
    TrainConfig tc = cfg.adapter_train;
    tc.seed = seed;

    if (has("bottleneck")) {
      const auto t0 = std::chrono::steady_clock::now();
      BottleneckParams bp = init_bottleneck(cfg.model.d, cfg.model.layers, bottleneck_size, seed);
      const TrainLog log = train_bottleneck(prep.base, bp, train_ex, tc);
      write_text(sdir / "bottleneck.log.csv", log.csv());
      const BottleneckPlugin plugin(bp);
      ReportRow row{"bottleneck", seed, 0, 0, evaluate_nll(prep.base, &plugin, valid_ex), bp.parameter_count()};
      const Translation t = translate_corpus(prep.base, &plugin, test, sv, tv, cfg.beam);
      score(t, lexicon, row);
      write_lines(sdir / "bottleneck.hyp", t.hypotheses);
      report.rows.push_back(row);
      wall["bottleneck/" + key] = elapsed(t0);
    }

    if (has("memory") || has("memory+knn")) {
      const auto t0 = std::chrono::steady_clock::now();
      AdapterParams adapters = fresh_adapters(cfg, seed);
      LossConfig lc = cfg.loss;
      lc.seed = seed;
      const TrainLog log = train_adapters(prep.base, adapters, view, train_ex, tc, lc);
      write_text(sdir / "adapter.log.csv", log.csv());
      adapters.save(sdir / "adapter.madp");
      adapters = AdapterParams::load(sdir / "adapter.madp");
      const MemoryAdapterPlugin plugin(adapters, view);
      if (has("memory")) {
        ReportRow row{"memory", seed, 0, 0, evaluate_nll(prep.base, &plugin, valid_ex), adapters.parameter_count()};
        const Translation t = translate_corpus(prep.base, &plugin, test, sv, tv, cfg.beam);
        score(t, lexicon, row);
        write_lines(sdir / "memory.hyp", t.hypotheses);
        report.rows.push_back(row);
      }
      wall["memory/" + key] = elapsed(t0);

      if (has("memory+knn")) {
        const auto t1 = std::chrono::steady_clock::now();
        const Datastore ds = build_datastore(prep.base, &plugin, train_ex);
        ds.save(sdir / "datastore.mknn");
        // Grid search on validation BLEU; ties keep the smaller λ.
        KnnConfig best = cfg.knn;
        double best_bleu = -1.0;
        for (double lambda : cfg.knn_lambdas) {
          KnnConfig k = cfg.knn;
          k.lambda = lambda;
          const Translation t = translate_corpus(prep.base, &plugin, tune, sv, tv, cfg.beam, &ds, &k);
          const double b = bleu(t.hypotheses, t.references);
          if (b > best_bleu || (b == best_bleu && lambda < best.lambda)) {
            best_bleu = b;
            best = k;
          }
        }
        lambdas[key] = best.lambda;
        ReportRow row{"memory+knn", seed, 0, 0, evaluate_knn_nll(prep.base, &plugin, ds, best, valid_ex),
                      adapters.parameter_count()};
        const Translation t = translate_corpus(prep.base, &plugin, test, sv, tv, cfg.beam, &ds, &best);
        score(t, lexicon, row);
        write_lines(sdir / "memory+knn.hyp", t.hypotheses);
        report.rows.push_back(row);
        wall["memory+knn/" + key] = elapsed(t1);
      }
    }
  }

  std::sort(report.rows.begin(), report.rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return a.system != b.system ? a.system < b.system : a.seed < b.seed;
  });
  write_text(dir / "report.csv", report.csv());

  json files = json::object();
  collect_hashes(dir, files);
  report.provenance = {{"config", cfg.to_json()},
                       {"seeds", cfg.seeds},
                       {"bottleneck_size", bottleneck_size},
                       {"memory_adapter_params", memory_params},
                       {"memory_items", bank.total_items()},
                       {"phrase_pairs", prep.pairs.size()},
                       {"knn_lambda", lambdas},
                       {"files", files},
                       {"wall_time_seconds", wall}};
  write_text(dir / "provenance.json", report.provenance.dump(2) + "\n");
  return report;
}

std::vector<std::string> ablation_suites() {
  return {"granularity_order", "dropout_level", "memory_usage", "layers", "granularity_mix"};
}

std::vector<AblationVariant> ablation_variants(const std::string& suite, const ExperimentConfig& base) {
  std::vector<AblationVariant> out;
  auto add = [&](const std::string& name, auto&& edit) {
    ExperimentConfig c = base;
    edit(c);
    out.push_back({name, std::move(c)});
  };
  if (suite == "granularity_order") {
    for (auto s : {PartitionStrategy::ShortToLong, PartitionStrategy::Random, PartitionStrategy::LongToShort}) {
      add(to_string(s), [s](ExperimentConfig& c) { c.memory.partition = s; });
    }
  } else if (suite == "dropout_level") {
    add("none", [](ExperimentConfig& c) { c.loss.p = 0.0; });
    add("item", [](ExperimentConfig& c) { c.loss.level = DropoutLevel::Item; });
    add("layer", [](ExperimentConfig& c) { c.loss.level = DropoutLevel::Layer; });
  } else if (suite == "memory_usage") {
    for (const char* u : {"full", "no_gate", "no_source", "no_target"}) {
      add(u, [u](ExperimentConfig& c) { c.memory.usage = u; });
    }
  } else if (suite == "layers") {
    add("all", [](ExperimentConfig& c) { c.memory.active_layers.clear(); });
    for (int i = 0; i < base.model.layers; ++i) {
      add("layer-" + std::to_string(i), [i](ExperimentConfig& c) { c.memory.active_layers = {i}; });
    }
  } else if (suite == "granularity_mix") {
    for (int n = 1; n <= base.memory.l_max; ++n) {
      add("only-" + std::to_string(n), [n](ExperimentConfig& c) { c.memory.only_length = n; });
    }
    add("mix", [](ExperimentConfig& c) { c.memory.only_length = 0; });
  } else {
    throw ConfigError("unknown ablation suite: " + suite);
  }
  return out;
}

std::string AblationReport::csv() const {
  std::string out = "suite,variant,seed,final_valid_nll,bleu,style_acc\n";
  for (const auto& r : rows) {
    out += r.suite + "," + r.variant + "," + std::to_string(r.seed) + "," + fmt(r.final_valid_nll) + "," +
           fmt(r.bleu) + "," + fmt(r.style_accuracy) + "\n";
  }
  return out;
}

std::string AblationReport::curves_csv() const {
  std::string out = "variant,seed,step,valid_nll\n";
  for (const auto& [key, curve] : curves) {
    for (const auto& [step, v] : curve) {
      out += key.first + "," + std::to_string(key.second) + "," + std::to_string(step) + "," + fmt(v) + "\n";
    }
  }
  return out;
}

AblationReport run_ablation(const std::string& suite, const ExperimentConfig& cfg, const fs::path& dir) {
  const auto variants = ablation_variants(suite, cfg);
  const Prepared prep = prepare(cfg, dir);
  const auto& sv = prep.task.source_vocab;
  const auto& tv = prep.task.target_vocab;
  const auto train_ex = to_examples(prep.task.custom_train, sv, tv);
  const auto valid_ex = to_examples(prep.task.custom_valid, sv, tv);
  const auto test = head(prep.task.custom_test, cfg.eval_sentences);

  AblationReport report;
  json described = json::array();
  std::map<std::string, MemoryBank> banks;
  for (const auto& v : variants) {
    described.push_back({{"variant", v.name}, {"diff", json_diff(cfg.to_json(), v.config.to_json())},
                         {"config", v.config.to_json()}});
    for (std::uint64_t seed : cfg.seeds) {
      const bool seeded_partition = v.config.memory.partition == PartitionStrategy::Random;
      json bank_key = v.config.to_json()["memory"];
      bank_key.erase("usage");
      const std::string key = bank_key.dump() + (seeded_partition ? "#" + std::to_string(seed) : "");
      if (!banks.contains(key)) {
        banks.emplace(key, build_bank(prep, v.config.memory, seeded_partition ? seed : cfg.task.seed));
      }
      const MemoryBank& bank = banks.at(key);
      const MemoryView view = usage_view(bank, v.config.memory);

      TrainConfig tc = v.config.adapter_train;
      tc.seed = seed;
      if (tc.eval_every == 0) tc.eval_every = std::max(1, tc.steps / 10);
      LossConfig lc = v.config.loss;
      lc.seed = seed;
      AdapterParams adapters = fresh_adapters(v.config, seed);
      const TrainLog log = train_adapters(prep.base, adapters, view, train_ex, tc, lc, valid_ex);
      const MemoryAdapterPlugin plugin(adapters, view);
      const Translation t = translate_corpus(prep.base, &plugin, test, sv, tv, cfg.beam);
      AblationRow row{suite, v.name, seed, log.validation.back().second, bleu(t.hypotheses, t.references),
                      style_marker_accuracy(t.hypotheses, t.references, prep.task.lexicon)};
      report.rows.push_back(row);
      report.curves[{v.name, seed}] = log.validation;
    }
  }
  write_text(dir / ("ablation-" + suite + ".csv"), report.csv());
  write_text(dir / ("ablation-" + suite + "-curves.csv"), report.curves_csv());
  report.provenance = {{"suite", suite}, {"config", cfg.to_json()}, {"variants", described}};
  write_text(dir / ("ablation-" + suite + "-provenance.json"), report.provenance.dump(2) + "\n");
  return report;
}

std::vector<std::string> json_diff(const json& a, const json& b) {
  std::vector<std::string> out;
  const json patch = json::diff(a, b);
  for (const auto& op : patch) out.push_back(op.at("path").get<std::string>());
  return out;
}

}  // namespace mplug
