#include "mplug/memory_bank.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <thread>

#include "mplug/beam.hpp"
#include "mplug/container.hpp"
#include "mplug/errors.hpp"

namespace mplug {

namespace {

constexpr std::string_view kBankMagic = "MBNK1";

Tensor empty_items(int d) { return Tensor::zeros({0, static_cast<std::size_t>(d)}); }

}  // namespace

std::vector<PhrasePair> pair_phrases(const std::vector<Phrase>& target_phrases, const Vocab& target_vocab,
                                     const TransformerParams& reverse_model, int beam_size) {
  std::vector<PhrasePair> pairs;
  for (const auto& phrase : target_phrases) {
    const std::string text = join_tokens(phrase);
    std::vector<int> target = target_vocab.tokenize(text);
    if (target.empty()) continue;
    std::vector<int> source = beam_search(target, reverse_model, beam_size, default_max_len(target.size()));
    if (source.empty()) continue;
    pairs.push_back({std::move(source), std::move(target), text, -1});
  }
  return pairs;
}

PartitionStrategy parse_partition_strategy(const std::string& name) {
  if (name == "short_to_long") return PartitionStrategy::ShortToLong;
  if (name == "long_to_short") return PartitionStrategy::LongToShort;
  if (name == "random") return PartitionStrategy::Random;
  throw ConfigError("unknown partition strategy: " + name);
}

std::string to_string(PartitionStrategy strategy) {
  switch (strategy) {
    case PartitionStrategy::ShortToLong: return "short_to_long";
    case PartitionStrategy::LongToShort: return "long_to_short";
    case PartitionStrategy::Random: return "random";
  }
  return "unknown";
}

std::vector<int> partition_phrases(const std::vector<PhrasePair>& pairs, int layers, PartitionStrategy strategy,
                                   std::uint64_t seed, std::span<const int> active_layers) {
  if (layers < 1) throw ContractError("partition_phrases: layer count must be >= 1");
  std::vector<int> active(active_layers.begin(), active_layers.end());
  if (active.empty()) {
    active.resize(static_cast<std::size_t>(layers));
    std::iota(active.begin(), active.end(), 0);
  }
  std::sort(active.begin(), active.end());
  active.erase(std::unique(active.begin(), active.end()), active.end());
  for (int l : active) {
    if (l < 0 || l >= layers) throw ContractError("partition_phrases: active layer out of range");
  }

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = pairs[a];
    const auto& pb = pairs[b];
    if (pa.target_len() != pb.target_len()) return pa.target_len() < pb.target_len();
    return pa.target_text < pb.target_text;
  });
  if (strategy == PartitionStrategy::Random) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }

  const std::size_t groups = active.size();
  const std::size_t base = pairs.size() / groups;
  const std::size_t extra = pairs.size() % groups;
  std::vector<int> assignment(pairs.size(), -1);
  std::size_t cursor = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t size = base + (g < extra ? 1 : 0);
    const std::size_t target_group = strategy == PartitionStrategy::LongToShort ? groups - 1 - g : g;
    for (std::size_t i = 0; i < size; ++i) assignment[order[cursor++]] = active[target_group];
  }
  return assignment;
}

std::vector<PhrasePair> assign_layers(std::vector<PhrasePair> pairs, const std::vector<int>& layers) {
  if (layers.size() != pairs.size()) throw DimensionError("assign_layers: one layer per pair required");
  for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i].layer = layers[i];
  return pairs;
}

MemoryBank::MemoryBank(int layers, int d) : d_(d) {
  if (layers < 1 || d < 1) throw ContractError("MemoryBank: layers and d must be positive");
  for (int i = 0; i < layers; ++i) layers_.push_back({empty_items(d), empty_items(d), {}});
}

MemoryBank::MemoryBank(int d, std::vector<LayerMemory> layers) : d_(d), layers_(std::move(layers)) {
  if (layers_.empty() || d < 1) throw ContractError("MemoryBank: layers and d must be positive");
  const auto width = static_cast<std::size_t>(d);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    const Shape expected{l.pairs.size(), width};
    if (l.source.shape() != expected || l.target.shape() != expected) {
      throw DimensionError("MemoryBank: layer " + std::to_string(i) + " rows are not aligned with its pairs");
    }
    for (const auto& p : l.pairs) {
      if (p.layer != static_cast<int>(i)) throw DimensionError("MemoryBank: pair stored at the wrong layer");
    }
  }
}

std::size_t MemoryBank::total_items() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.size();
  return n;
}

void MemoryBank::validate_for(const ModelConfig& config) const {
  if (d_ != config.d) {
    throw DimensionError("memory bank d=" + std::to_string(d_) + " does not match model d=" +
                         std::to_string(config.d));
  }
  if (layers() != config.layers) {
    throw DimensionError("memory bank has " + std::to_string(layers()) + " layers, model has " +
                         std::to_string(config.layers));
  }
}

MemoryView MemoryBank::view() const {
  MemoryView v;
  for (const auto& l : layers_) {
    v.source.push_back(l.source);
    v.target.push_back(l.target);
  }
  return v;
}

MemoryView without_source(MemoryView view) {
  for (auto& t : view.source) t = Tensor::zeros({0, t.cols()});
  return view;
}

MemoryView without_target(MemoryView view) {
  for (auto& t : view.target) t = Tensor::zeros({0, t.cols()});
  return view;
}

std::string MemoryBank::serialize() const {
  json header;
  header["L"] = layers();
  header["d"] = d_;
  json counts = json::array();
  json manifest = json::array();
  PayloadWriter payload;
  for (const auto& l : layers_) {
    counts.push_back(l.size());
    json layer_pairs = json::array();
    for (const auto& p : l.pairs) {
      layer_pairs.push_back({{"src", p.source_tokens}, {"tgt", p.target_tokens}, {"text", p.target_text}});
    }
    manifest.push_back(std::move(layer_pairs));
    payload.put_f32s(l.source.data());
    payload.put_f32s(l.target.data());
  }
  header["counts"] = std::move(counts);
  header["pairs"] = std::move(manifest);
  return encode_container(kBankMagic, header, payload.bytes());
}

void MemoryBank::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

MemoryBank MemoryBank::deserialize(const std::string& bytes) {
  const Container c = decode_container(bytes, kBankMagic);
  try {
    const int layers = c.header.at("L").get<int>();
    const int d = c.header.at("d").get<int>();
    const auto counts = c.header.at("counts").get<std::vector<std::size_t>>();
    const json& manifest = c.header.at("pairs");
    if (layers < 1 || d < 1) throw FormatError("bank header: L and d must be positive");
    if (counts.size() != static_cast<std::size_t>(layers) || !manifest.is_array() ||
        manifest.size() != static_cast<std::size_t>(layers)) {
      throw FormatError("bank header: per-layer counts do not match L");
    }
    const auto width = static_cast<std::size_t>(d);
    PayloadReader reader(c.payload);
    std::vector<LayerMemory> out;
    for (int i = 0; i < layers; ++i) {
      const auto idx = static_cast<std::size_t>(i);
      if (manifest[idx].size() != counts[idx]) {
        throw FormatError("bank header: layer " + std::to_string(i) + " manifest size differs from its count");
      }
      LayerMemory l;
      for (const auto& entry : manifest[idx]) {
        l.pairs.push_back({entry.at("src").get<std::vector<int>>(), entry.at("tgt").get<std::vector<int>>(),
                           entry.at("text").get<std::string>(), i});
      }
      l.source = Tensor::from({counts[idx], width}, reader.get_f32s(counts[idx] * width));
      l.target = Tensor::from({counts[idx], width}, reader.get_f32s(counts[idx] * width));
      out.push_back(std::move(l));
    }
    if (reader.remaining() != 0) throw FormatError("bank payload has trailing bytes");
    return MemoryBank(d, std::move(out));
  } catch (const json::exception& e) {
    throw FormatError(std::string("bank header: ") + e.what());
  }
}

MemoryBank MemoryBank::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

bool MemoryBank::operator==(const MemoryBank& other) const {
  if (d_ != other.d_ || layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& a = layers_[i];
    const auto& b = other.layers_[i];
    if (a.pairs != b.pairs || a.source.shape() != b.source.shape() || a.target.shape() != b.target.shape()) {
      return false;
    }
    if (!std::equal(a.source.data().begin(), a.source.data().end(), b.source.data().begin()) ||
        !std::equal(a.target.data().begin(), a.target.data().end(), b.target.data().begin())) {
      return false;
    }
  }
  return true;
}

std::vector<double> average_rows(const Tensor& states, std::span<const int> ids, std::size_t row_offset) {
  const std::size_t d = states.cols();
  std::vector<double> acc(d, 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (is_special(ids[i])) continue;
    const std::size_t row = row_offset + i;
    for (std::size_t j = 0; j < d; ++j) acc[j] += states.data()[row * d + j];
    ++n;
  }
  if (n == 0) return {};
  for (double& v : acc) v /= static_cast<double>(n);
  return acc;
}

MemoryBank build_memory(const std::vector<PhrasePair>& assigned, const TransformerParams& base, BuildStats* stats,
                        int threads) {
  const int layers = base.config.layers;
  const auto d = static_cast<std::size_t>(base.config.d);
  for (const auto& p : assigned) {
    if (p.layer < 0 || p.layer >= layers) throw ContractError("build_memory: pair has no valid layer assignment");
  }

  struct Item {
    std::vector<double> source, target;
    bool ok = false;
  };
  std::vector<Item> items(assigned.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    NoGradGuard no_grad;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& p = assigned[i];
      try {
        std::vector<int> y{kBos};
        y.insert(y.end(), p.target_tokens.begin(), p.target_tokens.end());
        const auto result = forward_teacher_forced(p.source_tokens, y, base, true);
        const auto& reps = *result.reps;
        // Row 0 of S is the BOS input; rows 1..k are the phrase tokens.
        auto src_item = average_rows(reps.E, p.source_tokens, 0);
        auto tgt_item = average_rows(reps.S[static_cast<std::size_t>(p.layer)], p.target_tokens, 1);
        if (src_item.empty() || tgt_item.empty()) continue;
        items[i] = {std::move(src_item), std::move(tgt_item), true};
      } catch (const std::exception&) {
        items[i].ok = false;
      }
    }
  };
  const std::size_t n_threads = static_cast<std::size_t>(std::max(1, threads));
  if (n_threads == 1 || assigned.size() < 2) {
    work(0, assigned.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (assigned.size() + n_threads - 1) / n_threads;
    for (std::size_t start = 0; start < assigned.size(); start += chunk) {
      pool.emplace_back(work, start, std::min(assigned.size(), start + chunk));
    }
    for (auto& t : pool) t.join();
  }

  std::vector<std::vector<double>> src_rows(static_cast<std::size_t>(layers));
  std::vector<std::vector<double>> tgt_rows(static_cast<std::size_t>(layers));
  std::vector<std::vector<PhrasePair>> pairs(static_cast<std::size_t>(layers));
  BuildStats local;
  for (std::size_t i = 0; i < assigned.size(); ++i) {
    if (!items[i].ok) {
      ++local.skipped;
      continue;
    }
    const auto l = static_cast<std::size_t>(assigned[i].layer);
    src_rows[l].insert(src_rows[l].end(), items[i].source.begin(), items[i].source.end());
    tgt_rows[l].insert(tgt_rows[l].end(), items[i].target.begin(), items[i].target.end());
    pairs[l].push_back(assigned[i]);
    ++local.built;
  }
  if (stats != nullptr) *stats = local;
  std::vector<LayerMemory> out;
  for (std::size_t l = 0; l < static_cast<std::size_t>(layers); ++l) {
    const std::size_t n = pairs[l].size();
    out.push_back({Tensor::from({n, d}, std::move(src_rows[l])), Tensor::from({n, d}, std::move(tgt_rows[l])),
                   std::move(pairs[l])});
  }
  return MemoryBank(base.config.d, std::move(out));
}

}  // namespace mplug
