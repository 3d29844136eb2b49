#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mplug/tensor.hpp"

namespace mplug {

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// One bias-corrected Adam update over `params` using their accumulated
// gradients. Tensors without requires_grad are skipped; a tensor that never
// received gradient is treated as having a zero gradient. Throws
// DivergenceError on a non-finite gradient before touching any parameter.
void adam_step(std::span<Tensor> params, AdamState& state);

// Clears gradients of every tensor in `params`.
void zero_grads(std::span<Tensor> params);

}  // namespace mplug
