#pragma once

// Memory-augmented adapter: a retrieval attention over one layer's memory
// items followed by a gated fusion with the frozen model's activation.
//
//   R = softmax((Q W_q)(K W_k)^T / T) (V W_v)
//   λ = sigmoid(relu([A;R] W_1) W_2 + b_2)
//   O = λ A + (1 - λ) R
//
// One adapter per decoder layer and site. The self site reads the target
// memory with the self-attention output as query; the cross site reads the
// source memory with L1 as query.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mplug/memory_bank.hpp"
#include "mplug/tensor.hpp"
#include "mplug/transformer.hpp"

namespace mplug {

enum class Site { Self = 0, Cross = 1 };

struct SiteParams {
  Tensor wq, wk, wv;  // [d × d]
  Tensor w1;          // [2d × d]
  Tensor w2;          // [d × 1]
};

struct AdapterParams {
  int d = 0;
  std::vector<std::array<SiteParams, 2>> layers;
  double temperature = 0.5;
  double gate_offset = 4.0;
  // Replaces the learned gate with a constant (the "no gated fusion" variant).
  std::optional<double> fixed_gate;

  const SiteParams& site(std::size_t layer, Site s) const { return layers.at(layer)[static_cast<int>(s)]; }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  // MADP1 container; T, b2 and the fixed gate live in the header.
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static AdapterParams deserialize(const std::string& bytes);
  static AdapterParams load(const std::filesystem::path& path);

  // Deep copy with fresh trainable storage.
  AdapterParams clone() const;
};

// W_q, W_k, W_1, W_2 ~ N(0, 0.02^2); W_v = 0; b_2 = gate_offset.
AdapterParams init_adapter_params(int d, int layers, std::uint64_t seed, double gate_offset = 4.0,
                                  double temperature = 0.5);

struct GateTrace {
  std::vector<double> gates;  // one λ per query row
  Tensor weights;             // [n × N] retrieval distribution
};

// Retrieval distribution softmax((Q W_q)(K W_k)^T / T) as an [n × N] tensor.
Tensor retrieval_weights(const Tensor& q, const Tensor& k, const SiteParams& p, double temperature);

// Returns `a` itself when the memory is empty.
Tensor memadapt(const Tensor& a, const Tensor& q, const Tensor& k, const Tensor& v, const SiteParams& p,
                double temperature, double gate_offset, std::optional<double> fixed_gate = std::nullopt,
                GateTrace* trace = nullptr);

// Adapters bound to a memory view. Layers beyond the view, or with an empty
// memory on a side, pass that site through unchanged.
class MemoryAdapterPlugin final : public DecoderPlugin {
 public:
  MemoryAdapterPlugin(const AdapterParams& params, MemoryView view);

  Tensor adapt_self(std::size_t layer, const Tensor& s) const override;
  Tensor adapt_cross(std::size_t layer, const Tensor& c, const Tensor& l1) const override;

  // When set, every adapter call appends its trace here (not thread-safe).
  void record_traces(std::vector<GateTrace>* sink) { sink_ = sink; }
  const MemoryView& view() const { return view_; }

 private:
  const AdapterParams& params_;
  MemoryView view_;
  std::vector<GateTrace>* sink_ = nullptr;
};

}  // namespace mplug
