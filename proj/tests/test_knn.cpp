#include <algorithm>
#include <bit>
#include <cmath>
#include <random>

#include "doctest.h"
#include "mplug/container.hpp"
#include "mplug/errors.hpp"
#include "mplug/knn.hpp"
#include "reference_model.hpp"
#include "support.hpp"

using namespace mplug;
using namespace mplug::testing;

namespace {

Datastore random_store(std::mt19937_64& rng, std::size_t n, std::size_t d, int vocab) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  std::vector<double> keys(n * d);
  for (double& k : keys) k = g(rng);
  std::vector<int> values(n);
  for (int& v : values) v = tok(rng);
  return Datastore(d, std::move(keys), std::move(values));
}

// Full sort over every entry, then softmax over the first k.
std::vector<double> oracle_probability(std::span<const double> q, const Datastore& ds, int k, double temp,
                                       std::size_t vocab) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double dist = 0.0;
    for (std::size_t j = 0; j < ds.d(); ++j) dist += (q[j] - ds.key(i)[j]) * (q[j] - ds.key(i)[j]);
    all.emplace_back(dist, i);
  }
  std::sort(all.begin(), all.end());
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), all.size());
  double z = 0.0;
  for (std::size_t i = 0; i < keep; ++i) z += std::exp(-all[i].first / temp);
  std::vector<double> p(vocab, 0.0);
  for (std::size_t i = 0; i < keep; ++i) {
    p[static_cast<std::size_t>(ds.value(all[i].second))] += std::exp(-all[i].first / temp) / z;
  }
  return p;
}

}  // namespace

TEST_CASE("nearest and knn_probability match a full-sort oracle") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t n : {1u, 7u, 50u, 333u, 1000u}) {
    const Datastore ds = random_store(rng, n, 6, 20);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<double> q(6);
      for (double& v : q) v = g(rng);
      for (int k : {1, 8, 64}) {
        const KnnConfig cfg{k, 10.0, 0.5};
        const auto p = knn_probability(q, ds, cfg, 20);
        const auto o = oracle_probability(q, ds, k, 10.0, 20);
        double sum = 0.0;
        for (std::size_t t = 0; t < 20; ++t) {
          CHECK(std::abs(p[t] - o[t]) < 1e-12);
          sum += p[t];
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
        const auto hits = nearest(q, ds, k);
        CHECK(hits.size() == std::min<std::size_t>(static_cast<std::size_t>(k), n));
        for (std::size_t i = 1; i < hits.size(); ++i) CHECK(hits[i - 1].distance <= hits[i].distance);
      }
    }
  }
}

TEST_CASE("knn examples: k = 1 and equidistant neighbors") {
  const Datastore ds(2, {0, 0, 1, 0, 0, 1, 3, 3}, {5, 6, 7, 8});
  const std::vector<double> q = {0.1, 0.0};
  const auto p1 = knn_probability(q, ds, KnnConfig{1, 1.0, 0.5}, 10);
  CHECK(p1[5] == 1.0);

  // Two keys at distance 1 from the origin: equal weights, the lower
  // index wins a k = 1 tie.
  const std::vector<double> o = {0.5, 0.5};
  const auto hits = nearest(o, ds, 3);
  CHECK(hits[0].distance == hits[1].distance);
  CHECK(hits[1].distance == hits[2].distance);
  CHECK(hits[0].index == 0);
  CHECK(hits[1].index == 1);
  CHECK(hits[2].index == 2);
  const auto p = knn_probability(std::vector<double>{1, 1}, ds, KnnConfig{2, 1.0, 0.5}, 10);
  CHECK(p[6] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(p[7] == doctest::Approx(0.5).epsilon(1e-15));

  // Same token twice aggregates mass.
  const Datastore dup(1, {0, 0, 5}, {4, 4, 9});
  const auto pd = knn_probability(std::vector<double>{0}, dup, KnnConfig{3, 1.0, 0.5}, 10);
  const double far = std::exp(-25.0);
  CHECK(pd[4] == doctest::Approx(2.0 / (2.0 + far)));
  CHECK(pd[9] == doctest::Approx(far / (2.0 + far)));
}

TEST_CASE("interpolate examples and monotonicity") {
  const std::vector<double> pm = {1, 0}, pk = {0, 1};
  const auto mixed = interpolate(pm, pk, 0.7);
  CHECK(std::abs(mixed[0] - 0.3) < 1e-15);
  CHECK(std::abs(mixed[1] - 0.7) < 1e-15);
  CHECK(interpolate(pm, pk, 1.0) == pk);
  CHECK(interpolate(pm, pk, 0.0) == pm);
  CHECK_THROWS_AS(interpolate(pm, std::vector<double>{1}, 0.5), DimensionError);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(5), b(5);
    double za = 0, zb = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      za += a[i] = u(rng);
      zb += b[i] = u(rng);
    }
    for (std::size_t i = 0; i < 5; ++i) {
      a[i] /= za;
      b[i] /= zb;
    }
    double prev_l = 0.0;
    auto prev = interpolate(a, b, 0.0);
    for (double l = 0.1; l <= 1.0; l += 0.1) {
      const auto cur = interpolate(a, b, l);
      double sum = 0.0;
      for (std::size_t i = 0; i < 5; ++i) {
        sum += cur[i];
        // Moves toward the kNN distribution: supported tokens gain weakly.
        if (b[i] >= a[i]) CHECK(cur[i] >= prev[i] - 1e-15);
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
      prev = cur;
      prev_l = l;
    }
    CHECK(prev_l > 0.9);
  }
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS((KnnConfig{0, 1.0, 0.5}.validate()), ConfigError);
  CHECK_THROWS_AS((KnnConfig{1, 0.0, 0.5}.validate()), ConfigError);
  CHECK_THROWS_AS((KnnConfig{1, 1.0, 1.5}.validate()), ConfigError);
  CHECK_NOTHROW((KnnConfig{1, 1.0, 0.0}.validate()));
}

TEST_CASE("empty datastore and width mismatch") {
  const Datastore empty;
  CHECK_THROWS_AS(nearest(std::vector<double>{0.0}, empty, 1), ContractError);
  const Datastore ds(2, {0, 0}, {4});
  CHECK_THROWS_AS(nearest(std::vector<double>{0.0}, ds, 1), DimensionError);
  CHECK_THROWS_AS(Datastore(2, {0, 0, 1}, {4}), DimensionError);
}

TEST_CASE("datastore has one entry per target token plus EOS with faithful keys") {
  const auto m = tiny_model(4);
  std::mt19937_64 rng(5);
  std::vector<Example> corpus;
  std::size_t expected = 0;
  for (int i = 0; i < 9; ++i) {
    corpus.push_back({random_ids(rng, 12, 1, 5), random_ids(rng, 12, 1, 5)});
    expected += corpus.back().target.size() + 1;
  }
  const Datastore ds = build_datastore(m, nullptr, corpus, 16);
  REQUIRE(ds.size() == expected);

  // key · output_proj reproduces the reference logits and the value is the
  // gold next token.
  const Mat proj = to_mat(m.output_proj);
  std::size_t entry = 0;
  for (const auto& e : corpus) {
    std::vector<int> y = {kBos};
    y.insert(y.end(), e.target.begin(), e.target.end());
    const Mat logits = reference_forward(m, e.source, y);
    for (std::size_t t = 0; t < y.size(); ++t, ++entry) {
      const int gold = t < e.target.size() ? e.target[t] : kEos;
      CHECK(ds.value(entry) == gold);
      for (std::size_t v = 0; v < proj[0].size(); ++v) {
        double z = 0.0;
        for (std::size_t c = 0; c < proj.size(); ++c) z += ds.key(entry)[c] * proj[c][v];
        CHECK(std::abs(z - logits[t][v]) < 1e-5 * std::max(1.0, std::abs(logits[t][v])));
      }
    }
  }
  // Batch size does not change the store.
  CHECK(build_datastore(m, nullptr, corpus, 1000) == ds);
}

TEST_CASE("lambda 0 reproduces plain beam output bitwise") {
  const auto m = tiny_model(6);
  std::mt19937_64 rng(7);
  std::vector<Example> corpus;
  for (int i = 0; i < 5; ++i) corpus.push_back({random_ids(rng, 12, 2, 5), random_ids(rng, 12, 2, 5)});
  const Datastore ds = build_datastore(m, nullptr, corpus);
  for (const auto& e : corpus) {
    const ModelScorer scorer(m, e.source);
    const auto plain = scorer.as_step_scorer();
    const auto knn = knn_step_scorer(scorer, ds, KnnConfig{8, 10.0, 0.0});
    for (const std::vector<std::vector<int>>& prefixes :
         {std::vector<std::vector<int>>{{kBos}}, std::vector<std::vector<int>>{{kBos, 5}, {kBos, 7}}}) {
      const auto a = plain(prefixes);
      const auto b = knn(prefixes);
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(std::equal(a[i].begin(), a[i].end(), b[i].begin(), [](double x, double y) {
          return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
        }));
      }
    }
    CHECK(decode_with_knn(e.source, m, nullptr, ds, KnnConfig{8, 10.0, 0.0}, 4, 10) ==
          beam_search(e.source, m, 4, 10));
  }
}

TEST_CASE("lambda 1 with k 1 memorizes a single pair") {
  const auto m = tiny_model(8);
  const Example pair{{4, 5, 6}, {9, 7, 11, 8}};
  const Datastore ds = build_datastore(m, nullptr, {pair});
  const KnnConfig cfg{1, 1.0, 1.0};
  // Teacher-forced states are distinct per prefix, so each step retrieves
  // its own entry and decoding replays the stored target.
  CHECK(decode_with_knn(pair.source, m, nullptr, ds, cfg, 1, 10) == pair.target);
  CHECK(decode_with_knn(pair.source, m, nullptr, ds, cfg, 4, 10) == pair.target);
}

TEST_CASE("datastore container roundtrip and corruption") {
  std::mt19937_64 rng(9);
  const Datastore ds = random_store(rng, 30, 4, 12);
  const std::string bytes = ds.serialize();
  CHECK(bytes.rfind("MKNN1", 0) == 0);
  CHECK(Datastore::deserialize(bytes) == ds);
  const auto dir = scratch_dir("knn");
  ds.save(dir / "store.knn");
  CHECK(Datastore::load(dir / "store.knn") == ds);

  std::string tampered = bytes;
  const auto at = tampered.find("\"N\":30");
  REQUIRE(at != std::string::npos);
  tampered[at + 5] = '1';  // header claims 31 entries
  CHECK_THROWS_AS(Datastore::deserialize(tampered), FormatError);
  CHECK_THROWS_AS(Datastore::deserialize(bytes + "zzzz"), FormatError);
  CHECK_THROWS_AS(Datastore::deserialize(bytes.substr(0, bytes.size() - 4)), FormatError);
  std::string wrong = bytes;
  wrong[1] = 'X';
  CHECK_THROWS_AS(Datastore::deserialize(wrong), FormatError);

  // Keys are stored as f32.
  const Datastore precise(1, {0.1}, {4});
  CHECK(precise.key(0)[0] == static_cast<double>(0.1f));
}
