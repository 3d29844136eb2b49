#pragma once

// Residual bottleneck adapter at the same two decoder sites as the memory
// adapter: x + relu(x W_down + b_down) W_up + b_up.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mplug/trainer.hpp"
#include "mplug/transformer.hpp"

namespace mplug {

struct BottleneckSite {
  Tensor down, down_bias;  // [d × b], [b]
  Tensor up, up_bias;      // [b × d], [d]
};

struct BottleneckParams {
  int d = 0;
  int bottleneck = 0;
  std::vector<std::array<BottleneckSite, 2>> layers;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
};

// Down-projection ~ N(0, 0.02^2); up-projection and biases zero.
BottleneckParams init_bottleneck(int d, int layers, int bottleneck, std::uint64_t seed);

// 2 sites · L · (2·d·b + d + b).
std::size_t bottleneck_parameter_count(int d, int layers, int bottleneck);

// The bottleneck size whose parameter count is closest to `target` (smaller wins ties).
int matched_bottleneck(int d, int layers, std::size_t target);

class BottleneckPlugin final : public DecoderPlugin {
 public:
  explicit BottleneckPlugin(const BottleneckParams& params) : params_(params) {}
  Tensor adapt_self(std::size_t layer, const Tensor& s) const override;
  Tensor adapt_cross(std::size_t layer, const Tensor& c, const Tensor& l1) const override;

 private:
  const BottleneckParams& params_;
};

TrainLog train_bottleneck(const TransformerParams& base, BottleneckParams& params, const std::vector<Example>& data,
                          const TrainConfig& cfg, const std::vector<Example>& validation = {});

}  // namespace mplug
