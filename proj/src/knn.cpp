#include "mplug/knn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mplug/container.hpp"
#include "mplug/errors.hpp"
#include "mplug/ops.hpp"

namespace mplug {

namespace {

constexpr std::string_view kKnnMagic = "MKNN1";

}  // namespace

void KnnConfig::validate() const {
  if (k < 1) throw ConfigError("knn: k must be at least 1");
  if (!(temperature > 0.0)) throw ConfigError("knn: temperature must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("knn: lambda must lie in [0,1]");
}

Datastore::Datastore(std::size_t d, std::vector<double> keys, std::vector<int> values)
    : d_(d), keys_(std::move(keys)), values_(std::move(values)) {
  if (d_ == 0) throw DimensionError("datastore: d must be positive");
  if (keys_.size() != values_.size() * d_) throw DimensionError("datastore: keys and values differ in length");
  for (double& v : keys_) v = round_f32(v);
  for (int v : values_) {
    if (v < 0) throw DimensionError("datastore: negative token id");
  }
}

std::string Datastore::serialize() const {
  json header;
  header["N"] = size();
  header["d"] = d_;
  PayloadWriter payload;
  payload.put_f32s(keys_);
  for (int v : values_) payload.put_u32(static_cast<std::uint32_t>(v));
  return encode_container(kKnnMagic, header, payload.bytes());
}

void Datastore::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

Datastore Datastore::deserialize(const std::string& bytes) {
  const Container c = decode_container(bytes, kKnnMagic);
  std::size_t n = 0;
  std::size_t d = 0;
  try {
    n = c.header.at("N").get<std::size_t>();
    d = c.header.at("d").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("datastore header: ") + e.what());
  }
  if (d == 0) throw FormatError("datastore header: d must be positive");
  PayloadReader reader(c.payload);
  if (reader.remaining() != n * d * 4 + n * 4) throw FormatError("datastore payload size does not match header");
  std::vector<double> keys = reader.get_f32s(n * d);
  std::vector<int> values(n);
  for (auto& v : values) {
    const std::uint32_t u = reader.get_u32();
    if (u > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) throw FormatError("datastore value out of range");
    v = static_cast<int>(u);
  }
  return Datastore(d, std::move(keys), std::move(values));
}

Datastore Datastore::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

Datastore build_datastore(const TransformerParams& base, const DecoderPlugin* plugin,
                          const std::vector<Example>& corpus, int batch_tokens) {
  NoGradGuard guard;
  const auto d = static_cast<std::size_t>(base.config.d);
  std::vector<double> keys;
  std::vector<int> values;
  std::vector<std::size_t> picked;
  std::size_t in_batch = 0;
  auto flush = [&] {
    if (picked.empty()) return;
    const Batch b = make_batch(corpus, picked);
    const EncoderState enc = encode_batch(base, b.source);
    ForwardOptions opts;
    opts.plugin = plugin;
    const Tensor states = decode_batch(base, enc, b.decoder_in, opts);
    for (std::size_t row = 0; row < b.gold.size(); ++row) {
      if (b.gold[row] == kPad) continue;
      keys.insert(keys.end(), states.data().begin() + static_cast<std::ptrdiff_t>(row * d),
                  states.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * d));
      values.push_back(b.gold[row]);
    }
    picked.clear();
    in_batch = 0;
  };
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const std::size_t n = corpus[i].target.size() + 1;
    if (!picked.empty() && in_batch + n > static_cast<std::size_t>(batch_tokens)) flush();
    picked.push_back(i);
    in_batch += n;
  }
  flush();
  return Datastore(d, std::move(keys), std::move(values));
}

std::vector<Neighbor> nearest(std::span<const double> query, const Datastore& ds, int k) {
  if (ds.size() == 0) throw ContractError("knn: empty datastore");
  if (query.size() != ds.d()) throw DimensionError("knn: query width differs from datastore d");
  if (k < 1) throw ContractError("knn: k must be at least 1");
  std::vector<Neighbor> all(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto key = ds.key(i);
    double dist = 0.0;
    for (std::size_t j = 0; j < key.size(); ++j) {
      const double diff = query[j] - key[j];
      dist += diff * diff;
    }
    all[i] = {i, dist};
  }
  const std::size_t keep = std::min(static_cast<std::size_t>(k), all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(),
                    [](const Neighbor& a, const Neighbor& b) {
                      return a.distance != b.distance ? a.distance < b.distance : a.index < b.index;
                    });
  all.resize(keep);
  return all;
}

std::vector<double> knn_probability(std::span<const double> query, const Datastore& ds, const KnnConfig& cfg,
                                    std::size_t vocab_size) {
  cfg.validate();
  const auto hits = nearest(query, ds, cfg.k);
  std::vector<double> weights(hits.size());
  const double closest = hits.front().distance;
  double z = 0.0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    weights[i] = std::exp(-(hits[i].distance - closest) / cfg.temperature);
    z += weights[i];
  }
  std::vector<double> p(vocab_size, 0.0);
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const int tok = ds.value(hits[i].index);
    if (static_cast<std::size_t>(tok) >= vocab_size) throw DimensionError("knn: datastore token outside vocabulary");
    p[static_cast<std::size_t>(tok)] += weights[i] / z;
  }
  return p;
}

std::vector<double> interpolate(std::span<const double> p_model, std::span<const double> p_knn, double lambda) {
  if (p_model.size() != p_knn.size()) throw DimensionError("interpolate: distribution sizes differ");
  std::vector<double> out(p_model.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lambda * p_knn[i] + (1.0 - lambda) * p_model[i];
  return out;
}

StepScorer knn_step_scorer(const ModelScorer& model, const Datastore& ds, const KnnConfig& cfg) {
  cfg.validate();
  if (cfg.lambda == 0.0) return model.as_step_scorer();
  return [&model, &ds, cfg](const std::vector<std::vector<int>>& prefixes) {
    auto out = model.score(prefixes);
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
      auto& lp = out.log_probs[i];
      std::vector<double> p(lp.size());
      for (std::size_t t = 0; t < lp.size(); ++t) p[t] = std::exp(lp[t]);
      const auto knn = knn_probability(out.states[i], ds, cfg, lp.size());
      const auto mixed = interpolate(p, knn, cfg.lambda);
      for (std::size_t t = 0; t < lp.size(); ++t) {
        lp[t] = mixed[t] > 0.0 ? std::log(mixed[t]) : -std::numeric_limits<double>::infinity();
      }
      lp[kPad] = -std::numeric_limits<double>::infinity();
      lp[kBos] = -std::numeric_limits<double>::infinity();
    }
    return out.log_probs;
  };
}

std::vector<int> decode_with_knn(std::span<const int> x, const TransformerParams& base, const DecoderPlugin* plugin,
                                 const Datastore& ds, const KnnConfig& cfg, int beam_size, int max_len) {
  const ModelScorer model(base, x, plugin);
  return beam_search(knn_step_scorer(model, ds, cfg), BeamOptions{beam_size, max_len});
}

}  // namespace mplug
