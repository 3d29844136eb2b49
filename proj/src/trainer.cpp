#include "mplug/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <numeric>
#include <sstream>

#include "mplug/adam.hpp"
#include "mplug/errors.hpp"
#include "mplug/ops.hpp"

namespace mplug {

namespace {

Tensor keep_rows(const Tensor& t, const std::vector<bool>& dropped) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    if (!dropped[i]) keep.push_back(i);
  }
  if (keep.size() == t.rows()) return t;
  return select_rows(t, keep);
}

double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] > 0.0) s += p[j] * (std::log(p[j]) - std::log(q[j]));
  }
  return s;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

std::size_t count_tokens(const Batch& b) {
  std::size_t n = 0;
  for (int g : b.gold) n += g != kPad ? 1 : 0;
  return n;
}

}  // namespace

DropoutLevel parse_dropout_level(const std::string& name) {
  if (name == "item") return DropoutLevel::Item;
  if (name == "layer") return DropoutLevel::Layer;
  throw ConfigError("unknown dropout level: " + name);
}

std::string to_string(DropoutLevel level) { return level == DropoutLevel::Item ? "item" : "layer"; }

void LossConfig::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("loss: alpha and beta must be nonnegative");
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("loss: dropout rate must lie in [0,1]");
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train: steps must be at least 1");
  if (batch_tokens < 1) throw ConfigError("train: batch_tokens must be positive");
  if (warmup < 0) throw ConfigError("train: warmup must be nonnegative");
  if (!(max_lr > 0.0)) throw ConfigError("train: max_lr must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("train: label_smoothing out of range");
  if (log_every < 1) throw ConfigError("train: log_every must be positive");
  if (eval_every < 0) throw ConfigError("train: eval_every must be nonnegative");
}

double learning_rate(const TrainConfig& cfg, int step) {
  if (cfg.warmup <= 0) return cfg.max_lr;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(cfg.warmup);
  return cfg.max_lr * std::min(s / w, std::sqrt(w / s));
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

MemoryView memory_dropout(const MemoryView& full, const LossConfig& cfg, std::mt19937_64& rng) {
  if (cfg.p <= 0.0) return full;
  MemoryView out = full;
  for (std::size_t i = 0; i < full.layers(); ++i) {
    const Tensor& s = full.source[i];
    const Tensor& t = full.target[i];
    if (cfg.level == DropoutLevel::Layer) {
      if (uniform01(rng) < cfg.p) {
        out.source[i] = Tensor::zeros({0, s.cols()});
        out.target[i] = Tensor::zeros({0, t.cols()});
      }
      continue;
    }
    std::vector<bool> dropped(std::max(s.rows(), t.rows()));
    for (std::size_t j = 0; j < dropped.size(); ++j) dropped[j] = uniform01(rng) < cfg.p;
    out.source[i] = keep_rows(s, dropped);
    out.target[i] = keep_rows(t, dropped);
  }
  return out;
}

double agreement_loss(const std::vector<std::vector<double>>& p, const std::vector<std::vector<double>>& q) {
  if (p.size() != q.size()) throw DimensionError("agreement_loss: row counts differ");
  if (p.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].size() != q[i].size()) throw DimensionError("agreement_loss: distribution sizes differ");
    total += 0.5 * (kl(p[i], q[i]) + kl(q[i], p[i]));
  }
  return total / static_cast<double>(p.size());
}

std::vector<Example> to_examples(const std::vector<SentencePair>& pairs, const Vocab& src_vocab,
                                 const Vocab& tgt_vocab) {
  std::vector<Example> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({src_vocab.tokenize(p.source), tgt_vocab.tokenize(p.target)});
  return out;
}

Batch make_batch(const std::vector<Example>& data, std::span<const std::size_t> indices) {
  Batch b;
  std::size_t len = 0;
  for (std::size_t i : indices) {
    const Example& e = data.at(i);
    if (e.source.empty()) throw ContractError("batch: empty source sentence");
    b.source.push_back(e.source);
    std::vector<int> in{kBos};
    in.insert(in.end(), e.target.begin(), e.target.end());
    len = std::max(len, in.size());
    b.decoder_in.push_back(std::move(in));
  }
  b.gold.assign(indices.size() * len, kPad);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto& tgt = data[indices[r]].target;
    std::copy(tgt.begin(), tgt.end(), b.gold.begin() + static_cast<std::ptrdiff_t>(r * len));
    b.gold[r * len + tgt.size()] = kEos;
  }
  return b;
}

BatchStream::BatchStream(const std::vector<Example>& data, int batch_tokens, std::uint64_t seed)
    : data_(data), batch_tokens_(batch_tokens), rng_(seed) {
  if (data_.empty()) throw ContractError("batch stream: no examples");
}

Batch BatchStream::next() {
  if (cursor_ >= order_.size()) {
    order_.resize(data_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  std::vector<std::size_t> picked;
  std::size_t tokens = 0;
  while (cursor_ < order_.size()) {
    const std::size_t n = data_[order_[cursor_]].target.size() + 1;
    if (!picked.empty() && tokens + n > static_cast<std::size_t>(batch_tokens_)) break;
    picked.push_back(order_[cursor_++]);
    tokens += n;
  }
  return make_batch(data_, picked);
}

Tensor total_loss(const Batch& batch, const TransformerParams& base, const AdapterParams& adapters,
                  const MemoryView& full, const MemoryView& dropped, const LossConfig& cfg,
                  double label_smoothing, LossComponents* components) {
  const EncoderState enc = encode_batch(base, batch.source);
  ForwardOptions opts;
  const MemoryAdapterPlugin full_plugin(adapters, full);
  opts.plugin = &full_plugin;
  const Tensor logits_full = output_logits(base, decode_batch(base, enc, batch.decoder_in, opts));
  const Tensor nll_full = cross_entropy(logits_full, batch.gold, kPad, label_smoothing);
  LossComponents c;
  c.nll_full = nll_full.item();
  Tensor loss = nll_full;
  if (cfg.alpha != 0.0 || cfg.beta != 0.0) {
    const MemoryAdapterPlugin drop_plugin(adapters, dropped);
    opts.plugin = &drop_plugin;
    const Tensor logits_drop = output_logits(base, decode_batch(base, enc, batch.decoder_in, opts));
    const Tensor nll_drop = cross_entropy(logits_drop, batch.gold, kPad, label_smoothing);
    const Tensor dist = symmetric_kl(logits_full, logits_drop, batch.gold, kPad);
    c.nll_drop = nll_drop.item();
    c.dist = dist.item();
    loss = add(add(loss, scale(nll_drop, cfg.alpha)), scale(dist, cfg.beta));
  }
  c.loss = loss.item();
  if (components != nullptr) *components = c;
  return loss;
}

std::string TrainLog::csv() const {
  std::string out = "step,loss,nll_full,nll_drop,dist,lr\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + fmt(r.c.loss) + "," + fmt(r.c.nll_full) + "," + fmt(r.c.nll_drop) +
           "," + fmt(r.c.dist) + "," + fmt(r.lr) + "\n";
  }
  return out;
}

std::string TrainLog::validation_csv() const {
  std::string out = "step,valid_nll\n";
  for (const auto& [step, v] : validation) out += std::to_string(step) + "," + fmt(v) + "\n";
  return out;
}

TrainLog train_loop(std::span<Tensor> trainable, const std::vector<Example>& data, const TrainConfig& cfg,
                    const StepLoss& step_loss, const Validator& validate) {
  cfg.validate();
  BatchStream stream(data, cfg.batch_tokens, cfg.seed);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  AdamState adam;
  TrainLog log;
  for (int step = 1; step <= cfg.steps; ++step) {
    const Batch batch = stream.next();
    zero_grads(trainable);
    LossComponents c;
    Tensor loss;
    try {
      loss = step_loss(batch, rng, c);
    } catch (const std::domain_error& e) {
      // Ops reject non-finite intermediates; during training that is divergence.
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss.item())) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": loss is " +
                            std::to_string(loss.item()));
    }
    loss.backward();
    adam.lr = learning_rate(cfg, step);
    adam_step(trainable, adam);
    if (step % cfg.log_every == 0 || step == cfg.steps) log.rows.push_back({step, c, adam.lr});
    if (validate && cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps)) {
      log.validation.emplace_back(step, validate());
    }
  }
  return log;
}

TrainLog train_adapters(const TransformerParams& base, AdapterParams& adapters, const MemoryBank& bank,
                        const std::vector<Example>& data, const TrainConfig& cfg, const LossConfig& loss_cfg,
                        const std::vector<Example>& validation) {
  bank.validate_for(base.config);
  return train_adapters(base, adapters, bank.view(), data, cfg, loss_cfg, validation);
}

TrainLog train_adapters(const TransformerParams& base, AdapterParams& adapters, const MemoryView& view,
                        const std::vector<Example>& data, const TrainConfig& cfg, const LossConfig& loss_cfg,
                        const std::vector<Example>& validation) {
  loss_cfg.validate();
  if (!base.frozen()) throw ContractError("adapter training requires a frozen base model");
  if (adapters.d != base.config.d || adapters.layers.size() != static_cast<std::size_t>(base.config.layers)) {
    throw DimensionError("adapter shape does not match the base model");
  }
  std::mt19937_64 mask_rng(loss_cfg.seed);
  const StepLoss step = [&](const Batch& batch, std::mt19937_64&, LossComponents& c) {
    const MemoryView dropped = memory_dropout(view, loss_cfg, mask_rng);
    return total_loss(batch, base, adapters, view, dropped, loss_cfg, cfg.label_smoothing, &c);
  };
  Validator val;
  if (!validation.empty()) {
    val = [&] {
      const MemoryAdapterPlugin plugin(adapters, view);
      return evaluate_nll(base, &plugin, validation, cfg.batch_tokens);
    };
  }
  auto params = adapters.parameters();
  return train_loop(params, data, cfg, step, val);
}

TrainLog train_base(TransformerParams& model, const std::vector<Example>& data, const TrainConfig& cfg,
                    double dropout) {
  model.set_frozen(false);
  const StepLoss step = [&](const Batch& batch, std::mt19937_64& rng, LossComponents& c) {
    ForwardOptions opts;
    opts.dropout_rng = &rng;
    opts.dropout = dropout;
    const EncoderState enc = encode_batch(model, batch.source, opts);
    const Tensor logits = output_logits(model, decode_batch(model, enc, batch.decoder_in, opts));
    Tensor loss = cross_entropy(logits, batch.gold, kPad, cfg.label_smoothing);
    c.loss = c.nll_full = loss.item();
    return loss;
  };
  auto params = model.parameters();
  TrainLog log = train_loop(params, data, cfg, step);
  model.set_frozen(true);
  return log;
}

double evaluate_nll(const TransformerParams& base, const DecoderPlugin* plugin, const std::vector<Example>& data,
                    int batch_tokens) {
  if (data.empty()) throw ContractError("evaluate_nll: no examples");
  NoGradGuard guard;
  double total = 0.0;
  std::size_t tokens = 0;
  std::vector<std::size_t> picked;
  std::size_t in_batch = 0;
  auto flush = [&] {
    const Batch b = make_batch(data, picked);
    const EncoderState enc = encode_batch(base, b.source);
    ForwardOptions opts;
    opts.plugin = plugin;
    const Tensor logits = output_logits(base, decode_batch(base, enc, b.decoder_in, opts));
    const std::size_t n = count_tokens(b);
    total += cross_entropy(logits, b.gold, kPad, 0.0).item() * static_cast<double>(n);
    tokens += n;
    picked.clear();
    in_batch = 0;
  };
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t n = data[i].target.size() + 1;
    if (!picked.empty() && in_batch + n > static_cast<std::size_t>(batch_tokens)) flush();
    picked.push_back(i);
    in_batch += n;
  }
  flush();
  return total / static_cast<double>(tokens);
}

}  // namespace mplug
