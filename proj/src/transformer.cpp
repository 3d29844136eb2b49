#include "mplug/transformer.hpp"

#include <cmath>

#include "mplug/container.hpp"
#include "mplug/errors.hpp"
#include "mplug/ops.hpp"
#include "mplug/vocab.hpp"

namespace mplug {

namespace {

constexpr std::string_view kModelMagic = "MPLG1";

Tensor normal_matrix(std::size_t r, std::size_t c, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(r * c);
  for (double& v : values) v = dist(rng);
  return Tensor::from({r, c}, std::move(values), true);
}

Tensor xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  return normal_matrix(fan_in, fan_out, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)), rng);
}

AttentionWeights init_attention(std::size_t d, std::mt19937_64& rng) {
  return {xavier(d, d, rng), xavier(d, d, rng), xavier(d, d, rng), xavier(d, d, rng)};
}

Tensor ones(std::size_t n) { return Tensor::filled({n}, 1.0, true); }
Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }

void add_attention(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                   const AttentionWeights& a) {
  out.emplace_back(prefix + ".wq", a.wq);
  out.emplace_back(prefix + ".wk", a.wk);
  out.emplace_back(prefix + ".wv", a.wv);
  out.emplace_back(prefix + ".wo", a.wo);
}

Tensor multi_head(const AttentionWeights& w, const Tensor& xq, const Tensor& xkv, std::size_t batch,
                  std::size_t q_len, std::size_t k_len, int heads, bool causal,
                  std::span<const int> key_lengths) {
  const Tensor q = matmul(xq, w.wq);
  const Tensor k = matmul(xkv, w.wk);
  const Tensor v = matmul(xkv, w.wv);
  AttentionShape shape{batch, q_len, k_len, static_cast<std::size_t>(heads), causal};
  return matmul(attention(q, k, v, shape, key_lengths), w.wo);
}

Tensor feed_forward(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2, const Tensor& b2) {
  return add_row(matmul(relu(add_row(matmul(x, w1), b1)), w2), b2);
}

Tensor maybe_dropout(const Tensor& x, const ForwardOptions& options) {
  if (options.dropout_rng == nullptr || options.dropout <= 0.0) return x;
  return dropout(x, options.dropout, *options.dropout_rng);
}

// Scaled token embeddings plus positions, for a padded id block.
Tensor embed(const Tensor& table, std::span<const int> ids, std::size_t batch, std::size_t len, std::size_t d) {
  const Tensor tokens = scale(gather_rows(table, ids), std::sqrt(static_cast<double>(d)));
  const Tensor pe = sinusoidal_positions(len, d);
  std::vector<double> tiled(batch * len * d);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(pe.data().begin(), pe.data().end(), tiled.begin() + static_cast<std::ptrdiff_t>(b * len * d));
  }
  return add(tokens, Tensor::from({batch * len, d}, std::move(tiled)));
}

}  // namespace

TransformerParams TransformerParams::init(const ModelConfig& config, std::uint64_t seed) {
  if (config.d <= 0 || config.layers <= 0 || config.heads <= 0 || config.d % config.heads != 0 ||
      config.ffn <= 0 || config.src_vocab <= kNumReserved || config.tgt_vocab <= kNumReserved) {
    throw ConfigError("model config is invalid");
  }
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(config.d);
  const auto ffn = static_cast<std::size_t>(config.ffn);
  TransformerParams p;
  p.config = config;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  p.src_embedding = normal_matrix(static_cast<std::size_t>(config.src_vocab), d, emb_std, rng);
  p.tgt_embedding = normal_matrix(static_cast<std::size_t>(config.tgt_vocab), d, emb_std, rng);
  for (int i = 0; i < config.layers; ++i) {
    EncoderLayerParams e;
    e.self = init_attention(d, rng);
    e.ln1_gain = ones(d);
    e.ln1_bias = zeros(d);
    e.ff_w1 = xavier(d, ffn, rng);
    e.ff_b1 = zeros(ffn);
    e.ff_w2 = xavier(ffn, d, rng);
    e.ff_b2 = zeros(d);
    e.ln2_gain = ones(d);
    e.ln2_bias = zeros(d);
    p.encoder.push_back(std::move(e));
  }
  for (int i = 0; i < config.layers; ++i) {
    DecoderLayerParams l;
    l.self = init_attention(d, rng);
    l.ln1_gain = ones(d);
    l.ln1_bias = zeros(d);
    l.cross = init_attention(d, rng);
    l.ln2_gain = ones(d);
    l.ln2_bias = zeros(d);
    l.ff_w1 = xavier(d, ffn, rng);
    l.ff_b1 = zeros(ffn);
    l.ff_w2 = xavier(ffn, d, rng);
    l.ff_b2 = zeros(d);
    l.ln3_gain = ones(d);
    l.ln3_bias = zeros(d);
    p.decoder.push_back(std::move(l));
  }
  p.output_proj = xavier(d, static_cast<std::size_t>(config.tgt_vocab), rng);
  return p;
}

std::vector<std::pair<std::string, Tensor>> TransformerParams::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("src_embedding", src_embedding);
  out.emplace_back("tgt_embedding", tgt_embedding);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const auto& e = encoder[i];
    const std::string p = "encoder." + std::to_string(i);
    add_attention(out, p + ".self", e.self);
    out.emplace_back(p + ".ln1.gain", e.ln1_gain);
    out.emplace_back(p + ".ln1.bias", e.ln1_bias);
    out.emplace_back(p + ".ff.w1", e.ff_w1);
    out.emplace_back(p + ".ff.b1", e.ff_b1);
    out.emplace_back(p + ".ff.w2", e.ff_w2);
    out.emplace_back(p + ".ff.b2", e.ff_b2);
    out.emplace_back(p + ".ln2.gain", e.ln2_gain);
    out.emplace_back(p + ".ln2.bias", e.ln2_bias);
  }
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const auto& l = decoder[i];
    const std::string p = "decoder." + std::to_string(i);
    add_attention(out, p + ".self", l.self);
    out.emplace_back(p + ".ln1.gain", l.ln1_gain);
    out.emplace_back(p + ".ln1.bias", l.ln1_bias);
    add_attention(out, p + ".cross", l.cross);
    out.emplace_back(p + ".ln2.gain", l.ln2_gain);
    out.emplace_back(p + ".ln2.bias", l.ln2_bias);
    out.emplace_back(p + ".ff.w1", l.ff_w1);
    out.emplace_back(p + ".ff.b1", l.ff_b1);
    out.emplace_back(p + ".ff.w2", l.ff_w2);
    out.emplace_back(p + ".ff.b2", l.ff_b2);
    out.emplace_back(p + ".ln3.gain", l.ln3_gain);
    out.emplace_back(p + ".ln3.bias", l.ln3_bias);
  }
  out.emplace_back("output_proj", output_proj);
  return out;
}

std::vector<Tensor> TransformerParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t TransformerParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void TransformerParams::set_frozen(bool frozen) {
  for (auto t : parameters()) {
    t.set_requires_grad(!frozen);
    t.zero_grad();
  }
}

bool TransformerParams::frozen() const {
  for (const auto& t : parameters()) {
    if (t.requires_grad()) return false;
  }
  return true;
}

void TransformerParams::round_to_storage_precision() {
  for (auto t : parameters()) {
    for (double& v : t.mutable_data()) v = round_f32(v);
  }
}

std::string TransformerParams::serialize() const {
  json header;
  header["d"] = config.d;
  header["L"] = config.layers;
  header["h"] = config.heads;
  header["ffn"] = config.ffn;
  header["src_vocab"] = config.src_vocab;
  header["tgt_vocab"] = config.tgt_vocab;
  json manifest = json::array();
  PayloadWriter payload;
  for (const auto& [name, t] : named_parameters()) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}});
    payload.put_f32s(t.data());
  }
  header["params"] = std::move(manifest);
  return encode_container(kModelMagic, header, payload.bytes());
}

void TransformerParams::save(const std::filesystem::path& path) const {
  write_file_bytes(path, serialize());
}

TransformerParams TransformerParams::deserialize(const std::string& bytes) {
  const Container c = decode_container(bytes, kModelMagic);
  ModelConfig config;
  try {
    config.d = c.header.at("d").get<int>();
    config.layers = c.header.at("L").get<int>();
    config.heads = c.header.at("h").get<int>();
    config.ffn = c.header.at("ffn").get<int>();
    config.src_vocab = c.header.at("src_vocab").get<int>();
    config.tgt_vocab = c.header.at("tgt_vocab").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("model header: ") + e.what());
  }
  TransformerParams p;
  try {
    p = init(config, 0);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("model header: ") + e.what());
  }
  const json& manifest = c.header.value("params", json::array());
  auto named = p.named_parameters();
  if (!manifest.is_array() || manifest.size() != named.size()) {
    throw FormatError("model manifest does not match the configuration");
  }
  PayloadReader reader(c.payload);
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [name, t] = named[i];
    if (manifest[i].value("name", "") != name ||
        manifest[i].value("shape", std::vector<std::size_t>{}) != t.shape()) {
      throw FormatError("model manifest entry " + std::to_string(i) + " does not match " + name);
    }
    const auto values = reader.get_f32s(t.numel());
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
  if (reader.remaining() != 0) throw FormatError("model payload has trailing bytes");
  p.set_frozen(true);
  return p;
}

TransformerParams TransformerParams::load(const std::filesystem::path& path) {
  return deserialize(read_file_bytes(path));
}

std::pair<std::vector<int>, std::vector<int>> pad_batch(const std::vector<std::vector<int>>& seqs,
                                                         std::size_t& max_len) {
  max_len = 0;
  for (const auto& s : seqs) max_len = std::max(max_len, s.size());
  std::vector<int> ids(seqs.size() * max_len, kPad);
  std::vector<int> lengths;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    std::copy(seqs[b].begin(), seqs[b].end(), ids.begin() + static_cast<std::ptrdiff_t>(b * max_len));
    lengths.push_back(static_cast<int>(seqs[b].size()));
  }
  return {std::move(ids), std::move(lengths)};
}

Tensor sinusoidal_positions(std::size_t len, std::size_t d) {
  std::vector<double> pe(len * d);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) pe[pos * d + i + 1] = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return Tensor::from({len, d}, std::move(pe));
}

EncoderState encode_batch(const TransformerParams& params, const std::vector<std::vector<int>>& src,
                          const ForwardOptions& options) {
  if (src.empty()) throw ContractError("encode: empty batch");
  for (const auto& s : src) {
    if (s.empty()) throw ContractError("encode: empty source sentence");
  }
  const auto d = static_cast<std::size_t>(params.config.d);
  EncoderState enc;
  enc.batch = src.size();
  auto [ids, lengths] = pad_batch(src, enc.len);
  enc.lengths = std::move(lengths);
  Tensor x = maybe_dropout(embed(params.src_embedding, ids, enc.batch, enc.len, d), options);
  for (const auto& layer : params.encoder) {
    const Tensor s = multi_head(layer.self, x, x, enc.batch, enc.len, enc.len, params.config.heads, false,
                                enc.lengths);
    const Tensor x1 = layernorm(add(x, maybe_dropout(s, options)), layer.ln1_gain, layer.ln1_bias);
    const Tensor f = feed_forward(x1, layer.ff_w1, layer.ff_b1, layer.ff_w2, layer.ff_b2);
    x = layernorm(add(x1, maybe_dropout(f, options)), layer.ln2_gain, layer.ln2_bias);
  }
  enc.states = x;
  return enc;
}

Tensor decoder_layer(const DecoderLayerParams& layer, std::size_t layer_index, const Tensor& d_prev,
                     const EncoderState& enc, std::size_t tgt_len, std::span<const int> tgt_lengths,
                     int heads, const ForwardOptions& options) {
  const std::size_t batch = enc.batch;
  const Tensor s = multi_head(layer.self, d_prev, d_prev, batch, tgt_len, tgt_len, heads, true, tgt_lengths);
  const Tensor o1 = options.plugin != nullptr ? options.plugin->adapt_self(layer_index, s) : s;
  const Tensor l1 = layernorm(add(d_prev, maybe_dropout(o1, options)), layer.ln1_gain, layer.ln1_bias);
  const Tensor c =
      multi_head(layer.cross, l1, enc.states, batch, tgt_len, enc.len, heads, false, enc.lengths);
  const Tensor o2 = options.plugin != nullptr ? options.plugin->adapt_cross(layer_index, c, l1) : c;
  const Tensor l2 = layernorm(add(l1, maybe_dropout(o2, options)), layer.ln2_gain, layer.ln2_bias);
  const Tensor f = feed_forward(l2, layer.ff_w1, layer.ff_b1, layer.ff_w2, layer.ff_b2);
  const Tensor out = layernorm(add(l2, maybe_dropout(f, options)), layer.ln3_gain, layer.ln3_bias);
  if (options.capture != nullptr) {
    options.capture->S.push_back(s);
    options.capture->C.push_back(c);
    options.capture->L1.push_back(l1);
    options.capture->L2.push_back(l2);
    options.capture->D.push_back(out);
  }
  return out;
}

Tensor decode_batch(const TransformerParams& params, const EncoderState& enc,
                    const std::vector<std::vector<int>>& tgt_in, const ForwardOptions& options) {
  if (tgt_in.size() != enc.batch) throw DimensionError("decode: batch size differs from encoder batch");
  for (const auto& y : tgt_in) {
    if (y.empty()) throw ContractError("decode: empty target input");
    if (y.front() != kBos) throw ContractError("decode: target input must begin with BOS");
  }
  const auto d = static_cast<std::size_t>(params.config.d);
  std::size_t tgt_len = 0;
  auto [ids, lengths] = pad_batch(tgt_in, tgt_len);
  Tensor x = maybe_dropout(embed(params.tgt_embedding, ids, enc.batch, tgt_len, d), options);
  if (options.capture != nullptr) {
    *options.capture = CapturedReps{};
    options.capture->E = enc.states;
    options.capture->D.push_back(x);
  }
  for (std::size_t i = 0; i < params.decoder.size(); ++i) {
    x = decoder_layer(params.decoder[i], i, x, enc, tgt_len, lengths, params.config.heads, options);
  }
  return x;
}

Tensor output_logits(const TransformerParams& params, const Tensor& states) {
  return matmul(states, params.output_proj);
}

Tensor encode(std::span<const int> x, const TransformerParams& params) {
  if (x.empty()) throw ContractError("encode: empty input");
  return encode_batch(params, {std::vector<int>(x.begin(), x.end())}).states;
}

TeacherForcedResult forward_teacher_forced(std::span<const int> x, std::span<const int> y,
                                           const TransformerParams& params, bool capture,
                                           const DecoderPlugin* plugin) {
  if (y.empty()) throw ContractError("forward: empty target");
  const EncoderState enc = encode_batch(params, {std::vector<int>(x.begin(), x.end())});
  TeacherForcedResult result;
  CapturedReps reps;
  ForwardOptions options;
  options.plugin = plugin;
  options.capture = capture ? &reps : nullptr;
  const Tensor states = decode_batch(params, enc, {std::vector<int>(y.begin(), y.end())}, options);
  result.logits = output_logits(params, states);
  if (capture) result.reps = std::move(reps);
  return result;
}

Tensor nll_loss(const Tensor& logits, std::span<const int> gold) { return cross_entropy(logits, gold, kPad, 0.0); }

}  // namespace mplug
