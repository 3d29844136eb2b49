#include "mplug/mem_adapter.hpp"

#include <random>

#include "mplug/container.hpp"
#include "mplug/errors.hpp"
#include "mplug/ops.hpp"

namespace mplug {

namespace {

constexpr std::string_view kAdapterMagic = "MADP1";
constexpr double kInitStd = 0.02;

Tensor gaussian(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, kInitStd);
  std::vector<double> values(r * c);
  for (double& v : values) v = dist(rng);
  return Tensor::from({r, c}, std::move(values), true);
}

SiteParams init_site(std::size_t d, std::mt19937_64& rng) {
  SiteParams p;
  p.wq = gaussian(d, d, rng);
  p.wk = gaussian(d, d, rng);
  p.wv = Tensor::zeros({d, d}, true);
  p.w1 = gaussian(2 * d, d, rng);
  p.w2 = gaussian(d, 1, rng);
  return p;
}

const char* site_name(int s) { return s == 0 ? "self" : "cross"; }

void check_cols(const Tensor& t, std::size_t d, const char* what) {
  if (t.dim() != 2 || t.cols() != d) {
    throw DimensionError(std::string("memadapt: ") + what + " width differs from d=" + std::to_string(d));
  }
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> AdapterParams::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (int s = 0; s < 2; ++s) {
      const SiteParams& p = layers[i][s];
      const std::string prefix = "adapter." + std::to_string(i) + "." + site_name(s);
      out.emplace_back(prefix + ".wq", p.wq);
      out.emplace_back(prefix + ".wk", p.wk);
      out.emplace_back(prefix + ".wv", p.wv);
      out.emplace_back(prefix + ".w1", p.w1);
      out.emplace_back(prefix + ".w2", p.w2);
    }
  }
  return out;
}

std::vector<Tensor> AdapterParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t AdapterParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

std::string AdapterParams::serialize() const {
  json header;
  header["d"] = d;
  header["L"] = layers.size();
  header["T"] = temperature;
  header["b2"] = gate_offset;
  header["fixed_gate"] = fixed_gate ? json(*fixed_gate) : json(nullptr);
  json manifest = json::array();
  PayloadWriter payload;
  for (const auto& [name, t] : named_parameters()) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}});
    payload.put_f32s(t.data());
  }
  header["params"] = std::move(manifest);
  return encode_container(kAdapterMagic, header, payload.bytes());
}

void AdapterParams::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

AdapterParams AdapterParams::deserialize(const std::string& bytes) {
  const Container c = decode_container(bytes, kAdapterMagic);
  AdapterParams p;
  try {
    const int d = c.header.at("d").get<int>();
    const int layers = c.header.at("L").get<int>();
    if (d <= 0 || layers <= 0) throw FormatError("adapter header: nonpositive d or L");
    p = init_adapter_params(d, layers, 0, c.header.at("b2").get<double>(), c.header.at("T").get<double>());
    const json& fixed = c.header.at("fixed_gate");
    if (!fixed.is_null()) p.fixed_gate = fixed.get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("adapter header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("adapter header: ") + e.what());
  }
  const json& manifest = c.header.value("params", json::array());
  auto named = p.named_parameters();
  if (!manifest.is_array() || manifest.size() != named.size()) {
    throw FormatError("adapter manifest does not match the configuration");
  }
  PayloadReader reader(c.payload);
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [name, t] = named[i];
    if (manifest[i].value("name", "") != name ||
        manifest[i].value("shape", std::vector<std::size_t>{}) != t.shape()) {
      throw FormatError("adapter manifest entry " + std::to_string(i) + " does not match " + name);
    }
    const auto values = reader.get_f32s(t.numel());
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
  if (reader.remaining() != 0) throw FormatError("adapter payload has trailing bytes");
  return p;
}

AdapterParams AdapterParams::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

AdapterParams AdapterParams::clone() const {
  AdapterParams out = *this;
  for (auto& layer : out.layers) {
    for (auto& s : layer) {
      s.wq = s.wq.clone(true);
      s.wk = s.wk.clone(true);
      s.wv = s.wv.clone(true);
      s.w1 = s.w1.clone(true);
      s.w2 = s.w2.clone(true);
    }
  }
  return out;
}

AdapterParams init_adapter_params(int d, int layers, std::uint64_t seed, double gate_offset, double temperature) {
  if (d < 1 || layers < 1) throw ConfigError("adapter init: d and layers must be positive");
  if (!(temperature > 0.0)) throw ConfigError("adapter init: temperature must be positive");
  std::mt19937_64 rng(seed);
  AdapterParams p;
  p.d = d;
  p.temperature = temperature;
  p.gate_offset = gate_offset;
  for (int i = 0; i < layers; ++i) {
    SiteParams self = init_site(static_cast<std::size_t>(d), rng);
    SiteParams cross = init_site(static_cast<std::size_t>(d), rng);
    p.layers.push_back({std::move(self), std::move(cross)});
  }
  return p;
}

Tensor retrieval_weights(const Tensor& q, const Tensor& k, const SiteParams& p, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("retrieval: temperature must be positive");
  const Tensor scores = matmul_nt(matmul(q, p.wq), matmul(k, p.wk));
  return softmax(scale(scores, 1.0 / temperature), 1);
}

Tensor memadapt(const Tensor& a, const Tensor& q, const Tensor& k, const Tensor& v, const SiteParams& p,
                double temperature, double gate_offset, std::optional<double> fixed_gate, GateTrace* trace) {
  const std::size_t d = p.wq.rows();
  check_cols(a, d, "anchor");
  check_cols(q, d, "query");
  if (q.rows() != a.rows()) throw DimensionError("memadapt: query and anchor row counts differ");
  if (k.rows() != v.rows()) throw DimensionError("memadapt: key and value counts differ");
  if (k.rows() == 0) return a;
  check_cols(k, d, "key");
  check_cols(v, d, "value");

  const Tensor w = retrieval_weights(q, k, p, temperature);
  const Tensor r = matmul(w, matmul(v, p.wv));
  Tensor gate;
  if (fixed_gate) {
    gate = Tensor::filled({a.rows(), 1}, *fixed_gate);
  } else {
    const Tensor h = relu(matmul(concat_cols(a, r), p.w1));
    gate = sigmoid(add_scalar(matmul(h, p.w2), gate_offset));
  }
  const Tensor one_minus = add_scalar(scale(gate, -1.0), 1.0);
  if (trace != nullptr) {
    trace->gates.assign(gate.data().begin(), gate.data().end());
    trace->weights = w.detach();
  }
  return add(mul_col(a, gate), mul_col(r, one_minus));
}

MemoryAdapterPlugin::MemoryAdapterPlugin(const AdapterParams& params, MemoryView view)
    : params_(params), view_(std::move(view)) {
  if (view_.source.size() != view_.target.size()) throw DimensionError("adapter: memory view sides differ in layers");
  if (view_.layers() > params_.layers.size()) throw DimensionError("adapter: memory has more layers than adapters");
  for (std::size_t i = 0; i < view_.layers(); ++i) {
    for (const Tensor* t : {&view_.source[i], &view_.target[i]}) {
      if (t->rows() > 0 && t->cols() != static_cast<std::size_t>(params_.d)) {
        throw DimensionError("adapter: memory width differs from adapter d");
      }
    }
  }
}

Tensor MemoryAdapterPlugin::adapt_self(std::size_t layer, const Tensor& s) const {
  if (layer >= view_.layers() || view_.target[layer].rows() == 0) return s;
  GateTrace trace;
  const Tensor& m = view_.target[layer];
  Tensor out = memadapt(s, s, m, m, params_.site(layer, Site::Self), params_.temperature, params_.gate_offset,
                        params_.fixed_gate, sink_ != nullptr ? &trace : nullptr);
  if (sink_ != nullptr) sink_->push_back(std::move(trace));
  return out;
}

Tensor MemoryAdapterPlugin::adapt_cross(std::size_t layer, const Tensor& c, const Tensor& l1) const {
  if (layer >= view_.layers() || view_.source[layer].rows() == 0) return c;
  GateTrace trace;
  const Tensor& m = view_.source[layer];
  Tensor out = memadapt(c, l1, m, m, params_.site(layer, Site::Cross), params_.temperature, params_.gate_offset,
                        params_.fixed_gate, sink_ != nullptr ? &trace : nullptr);
  if (sink_ != nullptr) sink_->push_back(std::move(trace));
  return out;
}

}  // namespace mplug
