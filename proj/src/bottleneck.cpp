#include "mplug/bottleneck.hpp"

#include <cstdlib>
#include <random>

#include "mplug/errors.hpp"
#include "mplug/ops.hpp"

namespace mplug {

namespace {

Tensor apply(const BottleneckSite& p, const Tensor& x) {
  const Tensor h = relu(add_row(matmul(x, p.down), p.down_bias));
  return add(x, add_row(matmul(h, p.up), p.up_bias));
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> BottleneckParams::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (int s = 0; s < 2; ++s) {
      const auto& p = layers[i][s];
      const std::string prefix = "bottleneck." + std::to_string(i) + (s == 0 ? ".self" : ".cross");
      out.emplace_back(prefix + ".down", p.down);
      out.emplace_back(prefix + ".down_bias", p.down_bias);
      out.emplace_back(prefix + ".up", p.up);
      out.emplace_back(prefix + ".up_bias", p.up_bias);
    }
  }
  return out;
}

std::vector<Tensor> BottleneckParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t BottleneckParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

BottleneckParams init_bottleneck(int d, int layers, int bottleneck, std::uint64_t seed) {
  if (d < 1 || layers < 1 || bottleneck < 1) throw ConfigError("bottleneck: sizes must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  const auto dd = static_cast<std::size_t>(d);
  const auto b = static_cast<std::size_t>(bottleneck);
  BottleneckParams p;
  p.d = d;
  p.bottleneck = bottleneck;
  for (int i = 0; i < layers; ++i) {
    std::array<BottleneckSite, 2> sites;
    for (auto& s : sites) {
      std::vector<double> down(dd * b);
      for (double& v : down) v = dist(rng);
      s.down = Tensor::from({dd, b}, std::move(down), true);
      s.down_bias = Tensor::zeros({b}, true);
      s.up = Tensor::zeros({b, dd}, true);
      s.up_bias = Tensor::zeros({dd}, true);
    }
    p.layers.push_back(std::move(sites));
  }
  return p;
}

std::size_t bottleneck_parameter_count(int d, int layers, int bottleneck) {
  const auto dd = static_cast<std::size_t>(d);
  const auto b = static_cast<std::size_t>(bottleneck);
  return 2 * static_cast<std::size_t>(layers) * (2 * dd * b + dd + b);
}

int matched_bottleneck(int d, int layers, std::size_t target) {
  int best = 1;
  auto gap = [&](int b) {
    const auto n = static_cast<long long>(bottleneck_parameter_count(d, layers, b));
    return std::llabs(n - static_cast<long long>(target));
  };
  for (int b = 2; bottleneck_parameter_count(d, layers, b - 1) <= target; ++b) {
    if (gap(b) < gap(best)) best = b;
  }
  return best;
}

Tensor BottleneckPlugin::adapt_self(std::size_t layer, const Tensor& s) const {
  return apply(params_.layers.at(layer)[0], s);
}

Tensor BottleneckPlugin::adapt_cross(std::size_t layer, const Tensor& c, const Tensor&) const {
  return apply(params_.layers.at(layer)[1], c);
}

TrainLog train_bottleneck(const TransformerParams& base, BottleneckParams& params, const std::vector<Example>& data,
                          const TrainConfig& cfg, const std::vector<Example>& validation) {
  if (!base.frozen()) throw ContractError("bottleneck training requires a frozen base model");
  if (params.d != base.config.d || params.layers.size() != static_cast<std::size_t>(base.config.layers)) {
    throw DimensionError("bottleneck shape does not match the base model");
  }
  const BottleneckPlugin plugin(params);
  const StepLoss step = [&](const Batch& batch, std::mt19937_64&, LossComponents& c) {
    const EncoderState enc = encode_batch(base, batch.source);
    ForwardOptions opts;
    opts.plugin = &plugin;
    const Tensor logits = output_logits(base, decode_batch(base, enc, batch.decoder_in, opts));
    Tensor loss = cross_entropy(logits, batch.gold, kPad, cfg.label_smoothing);
    c.loss = c.nll_full = loss.item();
    return loss;
  };
  Validator val;
  if (!validation.empty()) val = [&] { return evaluate_nll(base, &plugin, validation, cfg.batch_tokens); };
  auto trainable = params.parameters();
  return train_loop(trainable, data, cfg, step, val);
}

}  // namespace mplug
