#include <bit>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mplug/bottleneck.hpp"
#include "mplug/container.hpp"
#include "mplug/errors.hpp"
#include "mplug/experiment.hpp"
#include "mplug/metrics.hpp"
#include "mplug/ops.hpp"
#include "mplug/synthetic.hpp"
#include "support.hpp"

using namespace mplug;
using namespace mplug::testing;
using nlohmann::json;

namespace {

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string t; in >> t;) out.push_back(t);
  return out;
}

// Source token -> neutral target token, read off a style-free corpus.
std::map<std::string, std::string> neutral_map(const std::vector<SentencePair>& corpus) {
  std::map<std::string, std::string> m;
  for (const auto& p : corpus) {
    const auto s = split(p.source), t = split(p.target);
    REQUIRE(s.size() == t.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto [it, fresh] = m.emplace(s[i], t[i]);
      REQUIRE(it->second == t[i]);
    }
  }
  return m;
}

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.task.neutral_tokens = 10;
  c.task.style_tokens = 4;
  c.task.min_len = 2;
  c.task.max_len = 4;
  c.task.general_train = 80;
  c.task.custom_train = 30;
  c.task.custom_valid = 8;
  c.task.custom_test = 6;
  c.model = {8, 2, 2, 16, 0, 0};
  c.base_train = {30, 64, 5, 1e-2, 0.0, 0, 10, 0};
  c.adapter_train = {10, 64, 2, 1e-2, 0.0, 0, 5, 0};
  c.memory.sentences = 10;
  c.memory.beam = 2;
  c.beam = 2;
  c.tune_sentences = 3;
  c.knn_lambdas = {0.0, 0.5};
  c.seeds = {1, 2};
  return c;
}

}  // namespace

TEST_CASE("synthetic task generation") {
  SyntheticTaskSpec spec;
  spec.general_train = 50;
  spec.custom_train = 40;
  const auto a = generate_synthetic_task(spec);
  const auto b = generate_synthetic_task(spec);
  CHECK(a.custom_train.size() == 40);
  CHECK(a.lexicon == b.lexicon);
  for (std::size_t i = 0; i < a.custom_train.size(); ++i) {
    CHECK(a.custom_train[i].source == b.custom_train[i].source);
    CHECK(a.custom_train[i].target == b.custom_train[i].target);
  }
  CHECK(a.lexicon.size() == 10);
  for (const auto& [k, v] : a.lexicon) {
    CHECK(a.target_vocab.contains(k));
    CHECK(a.target_vocab.contains(v));
  }
  CHECK(a.custom_train_parses.size() == a.custom_train.size());

  SUBCASE("same seed twice gives identical files") {
    const auto d1 = scratch_dir("synth-a"), d2 = scratch_dir("synth-b");
    gen_synthetic_corpus(spec, d1);
    gen_synthetic_corpus(spec, d2);
    for (const char* f : {"src.vocab", "tgt.vocab", "lexicon.tsv", "general.train.tsv", "custom.train.tsv",
                          "custom.valid.tsv", "custom.test.tsv", "custom.train.parse"}) {
      CHECK(read_file_bytes(d1 / f) == read_file_bytes(d2 / f));
    }
    CHECK(read_lexicon(d1 / "lexicon.tsv") == a.lexicon);
  }
  SUBCASE("rate 0 gives the neutral mapping") {
    SyntheticTaskSpec z = spec;
    z.style_rate = 0.0;
    const auto t = generate_synthetic_task(z);
    const auto m = neutral_map(t.general_train);
    for (const auto& p : t.custom_train) {
      const auto s = split(p.source), y = split(p.target);
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (m.contains(s[i])) CHECK(y[i] == m.at(s[i]));
        for (const auto& [k, v] : t.lexicon) CHECK(y[i] != v);
      }
    }
  }
  SUBCASE("rate 0.5 is binomial over eligible tokens") {
    SyntheticTaskSpec h = spec;
    h.style_rate = 0.5;
    h.general_train = 2000;
    h.custom_train = 6000;
    const auto t = generate_synthetic_task(h);
    const auto m = neutral_map(t.general_train);
    std::size_t eligible = 0, styled = 0;
    for (const auto& p : t.custom_train) {
      const auto s = split(p.source), y = split(p.target);
      for (std::size_t i = 0; i < s.size(); ++i) {
        REQUIRE(m.contains(s[i]));
        const auto& neutral = m.at(s[i]);
        if (!t.lexicon.contains(neutral)) continue;
        ++eligible;
        if (y[i] == t.lexicon.at(neutral)) {
          ++styled;
        } else {
          CHECK(y[i] == neutral);
        }
      }
    }
    MESSAGE("eligible " << eligible);
    REQUIRE(eligible >= 10000);
    CHECK(std::abs(static_cast<double>(styled) / static_cast<double>(eligible) - 0.5) < 0.02);
  }
  SUBCASE("inconsistent specs are rejected") {
    SyntheticTaskSpec bad = spec;
    bad.style_rate = 1.5;
    CHECK_THROWS_AS(generate_synthetic_task(bad), ConfigError);
    bad = spec;
    bad.style_tokens = bad.neutral_tokens + 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = spec;
    bad.min_len = 5;
    bad.max_len = 4;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}

TEST_CASE("bleu examples") {
  CHECK(bleu({"a b c d", "e f g h i"}, {"a b c d", "e f g h i"}) == doctest::Approx(100.0));
  CHECK(bleu({"", ""}, {"a b c d", "e f"}) == 0.0);
  // Precisions 3/4, (2+1)/(3+1), (1+1)/(2+1), (0+1)/(1+1); no brevity penalty.
  const double hand = 100.0 * std::pow(0.75 * 0.75 * (2.0 / 3.0) * 0.5, 0.25);
  CHECK(std::abs(bleu({"a b c d"}, {"a b c e"}) - hand) < 1e-6);
  // Short hypothesis: brevity penalty exp(1 - 4/2).
  const double bp = std::exp(1.0 - 4.0 / 2.0);
  const double short_hand = 100.0 * bp * std::pow(1.0 * 1.0 * 1.0 * 1.0, 0.25);
  CHECK(std::abs(bleu({"a b"}, {"a b c d"}) - short_hand) < 1e-9);
  CHECK_THROWS(bleu({}, {}));
  CHECK_THROWS(bleu({"a"}, {"a", "b"}));

  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> tok(0, 5), len(0, 8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> h, r;
    for (int i = 0; i < 4; ++i) {
      std::string a, b;
      for (int k = len(rng); k > 0; --k) a += "t" + std::to_string(tok(rng)) + " ";
      for (int k = len(rng) + 1; k > 0; --k) b += "t" + std::to_string(tok(rng)) + " ";
      h.push_back(a);
      r.push_back(b);
    }
    const double s = bleu(h, r);
    CHECK(s >= 0.0);
    CHECK(s <= 100.0);
  }
}

TEST_CASE("style marker accuracy examples") {
  const std::map<std::string, std::string> lex = {{"a", "A"}, {"b", "B"}};
  const std::vector<std::string> refs = {"A x", "x B", "A B", "x x", "A", "B x A", "x", "A x B", "B", "x A"};
  CHECK(style_marker_accuracy(refs, refs, lex) == 1.0);
  std::vector<std::string> plain = {"a x", "x b", "a b", "x x", "a", "b x a", "x", "a x b", "b", "x a"};
  CHECK(style_marker_accuracy(plain, refs, lex) == 0.0);
  // 11 style positions in refs; hits counted by hand below.
  const std::vector<std::string> hyps = {
      "A x",    // 1/1
      "x b",    // 0/1
      "B A",    // 2/2: any style token counts
      "A A",    // 0/0
      "",       // 0/1: past the hypothesis
      "B x",    // 1/2: last position truncated
      "A",      // 0/0
      "a x B",  // 1/2
      "B c d",  // 1/1
      "x",      // 0/1
  };
  CHECK(style_marker_accuracy(hyps, refs, lex) == 6.0 / 11.0);
  CHECK(style_marker_accuracy({"A"}, {"x"}, lex) == 0.0);
}

TEST_CASE("bottleneck baseline") {
  const auto m = tiny_model(3);
  BottleneckParams bp = init_bottleneck(8, 2, 5, 4);
  CHECK(bp.parameter_count() == bottleneck_parameter_count(8, 2, 5));
  CHECK(bottleneck_parameter_count(8, 2, 5) == 2u * 2u * (2u * 8u * 5u + 8u + 5u));
  std::size_t counted = 0;
  for (const auto& t : bp.parameters()) counted += t.numel();
  CHECK(counted == bp.parameter_count());

  const std::size_t target = 20608;
  const int b = matched_bottleneck(32, 2, target);
  CHECK(b == 79);
  for (int other : {b - 1, b + 1}) {
    const auto diff = [&](int x) {
      const auto n = bottleneck_parameter_count(32, 2, x);
      return n > target ? n - target : target - n;
    };
    CHECK(diff(b) <= diff(other));
  }

  // Zero up-projection: output equals the base bitwise.
  const BottleneckPlugin plugin(bp);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_ids(rng, 12, 2, 6);
    const ModelScorer plain(m, x), adapted(m, x, &plugin);
    const std::vector<std::vector<int>> prefixes = {{kBos, 5, 6}};
    const auto a = plain.score(prefixes).log_probs[0];
    const auto c = adapted.score(prefixes).log_probs[0];
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(std::bit_cast<std::uint64_t>(a[i]) == std::bit_cast<std::uint64_t>(c[i]));
    }
  }

  // Gradient check through a nonzero adapter.
  for (auto& t : bp.parameters()) {
    std::normal_distribution<double> g(0.0, 0.3);
    for (double& v : t.mutable_data()) v = g(rng);
  }
  std::vector<Example> data = {{random_ids(rng, 12, 2, 4), random_ids(rng, 12, 2, 4)}};
  const std::vector<std::size_t> idx = {0};
  const Batch batch = make_batch(data, idx);
  const auto res = grad_check(bp.parameters(), [&] {
    const EncoderState enc = encode_batch(m, batch.source);
    ForwardOptions opts;
    opts.plugin = &plugin;
    return cross_entropy(output_logits(m, decode_batch(m, enc, batch.decoder_in, opts)), batch.gold, kPad);
  });
  CHECK(res.max_relative_error < 1e-4);
}

TEST_CASE("experiment config JSON is strict and roundtrips") {
  const ExperimentConfig def;
  CHECK(ExperimentConfig::from_json(def.to_json()).to_json() == def.to_json());
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"loss", {{"gamma", 1}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"memory", {{"usage", "half"}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"systems", {"oracle"}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"beam", "four"}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(json{{"seeds", json::array()}}), ConfigError);
  const auto partial = ExperimentConfig::from_json(json{{"loss", {{"alpha", 2.0}}}});
  CHECK(partial.loss.alpha == 2.0);
  CHECK(partial.loss.beta == def.loss.beta);

  const auto dir = scratch_dir("config");
  {
    std::ofstream(dir / "broken.json") << "{ \"beam\": ";
  }
  CHECK_THROWS_AS(ExperimentConfig::load(dir / "broken.json"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::load(dir / "absent.json"), MissingArtifact);
}

TEST_CASE("ablation variants differ only in the declared knob") {
  const ExperimentConfig def;
  const std::map<std::string, std::string> knob = {{"granularity_order", "/memory/partition"},
                                                   {"dropout_level", "/loss"},
                                                   {"memory_usage", "/memory/usage"},
                                                   {"layers", "/memory/active_layers"},
                                                   {"granularity_mix", "/memory/only_length"}};
  for (const auto& suite : ablation_suites()) {
    const auto variants = ablation_variants(suite, def);
    CHECK(variants.size() >= 3);
    std::set<std::string> names;
    for (const auto& v : variants) {
      names.insert(v.name);
      for (const auto& path : json_diff(def.to_json(), v.config.to_json())) {
        CHECK_MESSAGE(path.rfind(knob.at(suite), 0) == 0, suite << "/" << v.name << " changes " << path);
      }
    }
    CHECK(names.size() == variants.size());
  }
  CHECK_THROWS_AS(ablation_variants("nothing", def), ConfigError);

  const auto layers = ablation_variants("layers", def);
  CHECK(layers.back().config.memory.active_layers == std::vector<int>{def.model.layers - 1});
  const auto mix = ablation_variants("granularity_mix", def);
  CHECK(mix.front().config.memory.only_length == 1);

  CHECK(json_diff(json{{"a", 1}, {"b", {{"c", 2}}}}, json{{"a", 1}, {"b", {{"c", 3}}}}) ==
        std::vector<std::string>{"/b/c"});
  CHECK(json_diff(json{{"a", 1}}, json{{"a", 1}}).empty());
}

TEST_CASE("tiny experiment: rows, reproducibility, provenance, missing artifacts") {
  const ExperimentConfig cfg = tiny_experiment();
  const auto d1 = scratch_dir("exp-a"), d2 = scratch_dir("exp-b");
  const auto r1 = run_experiment(cfg, d1);
  CHECK(r1.rows.size() == cfg.systems.size() * cfg.seeds.size());
  std::set<std::pair<std::string, std::uint64_t>> keys;
  for (const auto& row : r1.rows) {
    keys.insert({row.system, row.seed});
    CHECK(std::isfinite(row.bleu));
    CHECK(row.bleu >= 0.0);
    CHECK(row.bleu <= 100.0);
    CHECK(row.style_accuracy >= 0.0);
    CHECK(row.style_accuracy <= 1.0);
    CHECK(std::isfinite(row.valid_nll));
  }
  CHECK(keys.size() == r1.rows.size());

  // Rerun against the first run's base and reverse models.
  ExperimentConfig again = cfg;
  again.base_checkpoint = (d1 / "base.mplg").string();
  again.reverse_checkpoint = (d1 / "reverse.mplg").string();
  const auto r2 = run_experiment(again, d2);
  CHECK(r2.csv() == r1.csv());
  CHECK(read_file_bytes(d1 / "report.csv") == r1.csv());

  for (const auto& [name, hash] : r1.provenance.at("files").items()) {
    CHECK(file_sha256(d1 / name) == hash.get<std::string>());
  }

  ExperimentConfig missing = cfg;
  missing.base_checkpoint = (d1 / "nowhere.mplg").string();
  try {
    run_experiment(missing, scratch_dir("exp-c"));
    FAIL("expected a missing artifact");
  } catch (const MissingArtifact& e) {
    CHECK(std::string(e.what()).find("nowhere.mplg") != std::string::npos);
  }
}

TEST_CASE("tiny ablation emits rows and curves per variant and seed") {
  ExperimentConfig cfg = tiny_experiment();
  const auto d = scratch_dir("ablate");
  run_experiment(cfg, d / "base");
  cfg.base_checkpoint = (d / "base" / "base.mplg").string();
  cfg.reverse_checkpoint = (d / "base" / "reverse.mplg").string();
  const auto rep = run_ablation("memory_usage", cfg, d);
  CHECK(rep.rows.size() == 4 * cfg.seeds.size());
  CHECK(rep.curves.size() == rep.rows.size());
  for (const auto& [key, curve] : rep.curves) CHECK_FALSE(curve.empty());
  CHECK(std::filesystem::exists(d / "ablation-memory_usage.csv"));
  CHECK(std::filesystem::exists(d / "ablation-memory_usage-curves.csv"));
  CHECK(std::filesystem::exists(d / "ablation-memory_usage-provenance.json"));
}
