#pragma once

// Shared helpers for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mplug/tensor.hpp"
#include "mplug/transformer.hpp"

namespace mplug::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, bool requires_grad = false) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Naive triple loop, independent of the library's matmul.
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += a[i * k + t] * b[t * n + j];
      out[i * n + j] = s;
    }
  }
  return out;
}

// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
// entries whose true gradient is ~0 from dividing roundoff by roundoff.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  double max_relative_error = 0.0;
  std::size_t entries = 0;
};

// Compares the tape gradient of `loss` against central differences with step
// `h` on every entry of `params`.
inline GradCheck grad_check(std::vector<Tensor> params, const std::function<Tensor()>& loss, double h = 1e-4) {
  for (auto& p : params) p.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }
  GradCheck out;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double orig = data[j];
      data[j] = orig + h;
      const double up = loss().item();
      data[j] = orig - h;
      const double down = loss().item();
      data[j] = orig;
      const double numeric = (up - down) / (2 * h);
      out.max_relative_error = std::max(out.max_relative_error, relative_error(analytic[i][j], numeric));
      ++out.entries;
    }
  }
  return out;
}

inline ModelConfig tiny_config(int d = 8, int layers = 2, int vocab = 12) {
  ModelConfig c;
  c.d = d;
  c.layers = layers;
  c.heads = 2;
  c.ffn = 2 * d;
  c.src_vocab = vocab;
  c.tgt_vocab = vocab;
  return c;
}

// A randomly initialized, frozen toy model.
inline TransformerParams tiny_model(std::uint64_t seed, int d = 8, int layers = 2, int vocab = 12) {
  TransformerParams p = TransformerParams::init(tiny_config(d, layers, vocab), seed);
  p.set_frozen(true);
  return p;
}

inline std::vector<int> random_ids(std::mt19937_64& rng, int vocab, std::size_t min_len, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> tok(4, vocab - 1);
  std::vector<int> out(len(rng));
  for (int& t : out) t = tok(rng);
  return out;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mplug-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace mplug::testing
