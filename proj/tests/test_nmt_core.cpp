#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <random>

#include "doctest.h"
#include "mplug/beam.hpp"
#include "mplug/container.hpp"
#include "mplug/errors.hpp"
#include "mplug/ops.hpp"
#include "mplug/vocab.hpp"
#include "reference_model.hpp"
#include "support.hpp"

using namespace mplug;
using namespace mplug::testing;

namespace {

double max_diff(const Mat& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b.at(i, j)));
  }
  return m;
}

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("vocab tokenize and detokenize") {
  const Vocab v({"<pad>", "<s>", "</s>", "<unk>", "a", "b"});
  CHECK(v.tokenize("a b") == std::vector<int>{4, 5});
  CHECK(v.tokenize("a z") == std::vector<int>{4, kUnk});
  CHECK(v.detokenize(v.tokenize("b a b")) == "b a b");
  CHECK(v.detokenize(std::vector<int>{kBos, 4, kEos, kPad}) == "a");
  CHECK(v.size() == 6);
  CHECK(v.id("b") == 5);
}

TEST_CASE("vocab file contract") {
  const auto dir = scratch_dir("vocab");
  const Vocab v({"<pad>", "<s>", "</s>", "<unk>", "x", "y"});
  v.save(dir / "v.txt");
  CHECK(Vocab::load(dir / "v.txt").tokens() == v.tokens());
  write_lines(dir / "bad.txt", {"<s>", "<pad>", "</s>", "<unk>", "x"});
  CHECK_THROWS_AS(Vocab::load(dir / "bad.txt"), FormatError);
  write_lines(dir / "dup.txt", {"<pad>", "<s>", "</s>", "<unk>", "x", "x"});
  CHECK_THROWS_AS(Vocab::load(dir / "dup.txt"), FormatError);
  CHECK_THROWS_AS(Vocab::load(dir / "missing.txt"), MissingArtifact);
}

TEST_CASE("corpus files") {
  const auto dir = scratch_dir("corpus");
  write_corpus(dir / "c.tsv", {{"a b", "c"}, {"d", "e f"}});
  const auto pairs = read_corpus(dir / "c.tsv");
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[1].target == "e f");
  write_lines(dir / "bad.tsv", {"a\tb", "no tab here"});
  try {
    read_corpus(dir / "bad.tsv");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("encode shape, determinism and padding") {
  const auto p = tiny_model(1, 16, 2, 12);
  const std::vector<int> x = {4, 7, 9};
  const Tensor e = encode(x, p);
  CHECK(e.shape() == Shape{3, 16});
  CHECK(same_values(e, encode(x, p)));
  CHECK_THROWS_AS(encode(std::vector<int>{}, p), ContractError);

  // Padding x to the length of a longer batch neighbour leaves its rows unchanged.
  const EncoderState enc = encode_batch(p, {x, {5, 6, 7, 8, 9, 10}});
  CHECK(enc.len == 6);
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t c = 0; c < 16; ++c) CHECK(enc.states.at(t, c) == doctest::Approx(e.at(t, c)).epsilon(1e-12));
  }
}

TEST_CASE("teacher-forced forward matches a hand-executed d=2 model") {
  ModelConfig cfg;
  cfg.d = 2;
  cfg.layers = 1;
  cfg.heads = 1;
  cfg.ffn = 3;
  cfg.src_vocab = 6;
  cfg.tgt_vocab = 7;
  TransformerParams p = TransformerParams::init(cfg, 0);
  hand_set(p);
  p.set_frozen(true);
  const std::vector<int> x = {4, 5, 4};
  const std::vector<int> y = {kBos, 6, 4, 5};
  const auto out = forward_teacher_forced(x, y, p, false);
  CHECK(out.logits.shape() == Shape{4, 7});
  CHECK(max_diff(reference_forward(p, x, y), out.logits) < 1e-10);
}

TEST_CASE("teacher-forced forward matches the reference on a random multi-head model") {
  const auto p = tiny_model(3, 8, 2, 12);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_ids(rng, 12, 1, 6);
    auto y = random_ids(rng, 12, 1, 6);
    y.insert(y.begin(), kBos);
    CHECK(max_diff(reference_forward(p, x, y), forward_teacher_forced(x, y, p, false).logits) < 1e-10);
  }
}

TEST_CASE("capture fidelity") {
  const auto p = tiny_model(5);
  const std::vector<int> x = {4, 5, 6};
  const std::vector<int> y = {kBos, 7, 8};
  const auto a = forward_teacher_forced(x, y, p, true);
  const auto b = forward_teacher_forced(x, y, p, true);
  REQUIRE(a.reps.has_value());
  const auto& r = *a.reps;
  CHECK(r.E.shape() == Shape{3, 8});
  CHECK(r.S.size() == 2);
  CHECK(r.D.size() == 3);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(r.S[i].shape() == Shape{3, 8});
    CHECK(same_values(r.S[i], b.reps->S[i]));
    CHECK(same_values(r.C[i], b.reps->C[i]));
    CHECK(same_values(r.L1[i], b.reps->L1[i]));
    CHECK(same_values(r.L2[i], b.reps->L2[i]));
  }
  CHECK(same_values(r.E, encode(x, p)));
  // The last captured D is the state feeding the output projection.
  CHECK(same_values(output_logits(p, r.D.back()), a.logits));
  CHECK_THROWS_AS(forward_teacher_forced(x, std::vector<int>{}, p, false), ContractError);
}

TEST_CASE("causality: later target edits leave earlier logits unchanged") {
  const auto p = tiny_model(6);
  const std::vector<int> x = {4, 5};
  const auto a = forward_teacher_forced(x, std::vector<int>{kBos, 6, 7, 8}, p, false).logits;
  const auto b = forward_teacher_forced(x, std::vector<int>{kBos, 6, 11, 4}, p, false).logits;
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t c = 0; c < a.cols(); ++c) CHECK(a.at(t, c) == b.at(t, c));
  }
}

TEST_CASE("nll loss examples") {
  const Tensor uniform = Tensor::zeros({3, 5});
  CHECK(nll_loss(uniform, std::vector<int>{4, 1, 2}).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(nll_loss(Tensor::matrix({{0, 0, 0, 100}}), std::vector<int>{3}).item() < 1e-12);
  // PAD rows are excluded from the mean.
  const Tensor l = Tensor::matrix({{0, 1, 2}, {5, 0, 0}});
  const double row0 = std::log(1 + std::exp(1.0) + std::exp(2.0)) - 1.0;
  CHECK(nll_loss(l, std::vector<int>{1, kPad}).item() == doctest::Approx(row0).epsilon(1e-12));
}

namespace {

// Deterministic toy scorer: log-probabilities over 5 ids depend on the prefix.
StepScorer toy_scorer(std::uint64_t salt) {
  return [salt](const std::vector<std::vector<int>>& prefixes) {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) {
      std::uint64_t h = salt;
      for (int t : p) h = h * 1000003 + static_cast<std::uint64_t>(t) + 1;
      std::mt19937_64 rng(h);
      std::uniform_real_distribution<double> u(-3, 3);
      std::vector<double> logits = {0, 0, u(rng), u(rng), u(rng)};
      double z = 0.0;
      for (std::size_t i = 2; i < 5; ++i) z += std::exp(logits[i]);
      std::vector<double> lp(5, -std::numeric_limits<double>::infinity());
      for (std::size_t i = 2; i < 5; ++i) lp[i] = logits[i] - std::log(z);
      out.push_back(lp);
    }
    return out;
  };
}

// Every path of up to `max_len` steps, ranked as the beam ranks completions.
std::vector<int> exhaustive_best(const StepScorer& scorer, int max_len) {
  struct Done {
    std::vector<int> tokens;
    double score;
    int step;
  };
  std::vector<Done> done;
  std::function<void(std::vector<int>, double, int)> walk = [&](std::vector<int> prefix, double score, int step) {
    std::vector<int> in{kBos};
    in.insert(in.end(), prefix.begin(), prefix.end());
    const auto lp = scorer({in})[0];
    for (int tok = 0; tok < static_cast<int>(lp.size()); ++tok) {
      if (std::isinf(lp[static_cast<std::size_t>(tok)])) continue;
      const double s = score + lp[static_cast<std::size_t>(tok)];
      if (tok == kEos) {
        done.push_back({prefix, s / step, step});
        continue;
      }
      auto next = prefix;
      next.push_back(tok);
      if (step == max_len) {
        done.push_back({next, s / step, step});
      } else {
        walk(next, s, step + 1);
      }
    }
  };
  walk({}, 0.0, 1);
  const auto best = std::min_element(done.begin(), done.end(), [](const Done& a, const Done& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.tokens != b.tokens) return a.tokens < b.tokens;
    return a.step < b.step;
  });
  return best->tokens;
}

}  // namespace

TEST_CASE("beam search matches exhaustive enumeration when the beam covers every path") {
  for (std::uint64_t salt = 0; salt < 50; ++salt) {
    const auto scorer = toy_scorer(salt);
    CHECK(beam_search(scorer, {9, 2}) == exhaustive_best(scorer, 2));
    CHECK(beam_search(scorer, {27, 3}) == exhaustive_best(scorer, 3));
  }
}

TEST_CASE("beam size one equals greedy decoding") {
  const auto p = tiny_model(7);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_ids(rng, 12, 1, 5);
    const ModelScorer scorer(p, x);
    CHECK(beam_search(scorer.as_step_scorer(), {1, 12}) == greedy_decode(scorer.as_step_scorer(), 12));
  }
}

TEST_CASE("a model that prefers EOS yields an empty translation") {
  TransformerParams p = tiny_model(9);
  // Constant final state of ones; only the EOS column of the projection is nonzero.
  auto& last = p.decoder.back();
  for (double& v : last.ln3_gain.mutable_data()) v = 0.0;
  for (double& v : last.ln3_bias.mutable_data()) v = 1.0;
  auto proj = p.output_proj.mutable_data();
  std::fill(proj.begin(), proj.end(), 0.0);
  const auto v = static_cast<std::size_t>(p.config.tgt_vocab);
  for (std::size_t r = 0; r < static_cast<std::size_t>(p.config.d); ++r) proj[r * v + kEos] = 1.0;
  CHECK(beam_search(std::vector<int>{4, 5}, p, 4, 10).empty());
}

TEST_CASE("model scorer masks PAD and BOS and decoding is deterministic") {
  const auto p = tiny_model(10);
  const std::vector<int> x = {4, 9, 6};
  const ModelScorer scorer(p, x);
  const auto out = scorer.score({{kBos}, {kBos}});
  CHECK(std::isinf(out.log_probs[0][kPad]));
  CHECK(std::isinf(out.log_probs[0][kBos]));
  CHECK(out.states[0].size() == 8);
  CHECK(beam_search(x, p, 4, 10) == beam_search(x, p, 4, 10));
}

TEST_CASE("checkpoint roundtrip and corruption") {
  const auto dir = scratch_dir("checkpoint");
  TransformerParams p = tiny_model(11);
  p.save(dir / "a.mplg");
  const auto q = TransformerParams::load(dir / "a.mplg");
  CHECK(q.frozen());
  CHECK(q.config == p.config);
  q.save(dir / "b.mplg");
  CHECK(read_file_bytes(dir / "a.mplg") == read_file_bytes(dir / "b.mplg"));

  const std::string bytes = read_file_bytes(dir / "a.mplg");
  CHECK_THROWS_AS(TransformerParams::deserialize(bytes.substr(0, bytes.size() - 3)), FormatError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(TransformerParams::deserialize(bad_magic), FormatError);
  CHECK_THROWS_AS(TransformerParams::deserialize(bytes + "junk"), FormatError);
  CHECK_THROWS_AS(TransformerParams::deserialize(bytes.substr(0, 7)), FormatError);
  CHECK_THROWS_AS(TransformerParams::load(dir / "absent.mplg"), MissingArtifact);
}

TEST_CASE("frozen parameters never receive gradient") {
  const auto p = tiny_model(12);
  const auto out = forward_teacher_forced(std::vector<int>{4, 5}, std::vector<int>{kBos, 6}, p, false);
  CHECK_FALSE(out.logits.requires_grad());
  for (const auto& t : p.parameters()) CHECK_FALSE(t.has_grad());
}
