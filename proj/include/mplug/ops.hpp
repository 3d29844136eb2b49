#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "mplug/tensor.hpp"

namespace mplug {

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
// x[n×d] + bias[d] on every row.
Tensor add_row(const Tensor& x, const Tensor& bias);
// x[n×d] scaled row-wise by c[n×1].
Tensor mul_col(const Tensor& x, const Tensor& c);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Normalizes along `axis` (0 or 1 for matrices; 0 for vectors) with max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);
// Row-wise log-softmax over the last dimension.
Tensor log_softmax(const Tensor& x);

inline constexpr double kLayerNormEps = 1e-5;
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor concat_cols(const Tensor& a, const Tensor& b);
// Row slice [begin, begin+count).
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
// Embedding lookup: out[i] = table[ids[i]].
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
// Picks rows by index (memory dropout views and similar).
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Inverted dropout with a Bernoulli keep mask drawn from `rng`.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

// Multi-head scaled dot-product attention over a padded batch. Rows of q are
// laid out as batch*q_len + t, rows of k/v as batch*k_len + s. Keys at
// s >= key_lengths[b] are masked; with `causal`, also keys s > t.
// Returns the concatenated head outputs [batch*q_len × d].
struct AttentionShape {
  std::size_t batch = 1;
  std::size_t q_len = 0;
  std::size_t k_len = 0;
  std::size_t heads = 1;
  bool causal = false;
};
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape,
                 std::span<const int> key_lengths);

// Mean token cross-entropy of row-wise logits against `targets`, skipping
// rows whose target equals `ignore_id`. With smoothing ε the target
// distribution is (1-ε)·onehot + ε/V.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_id,
                     double smoothing = 0.0);

// ½(KL(p‖q) + KL(q‖p)) with p = softmax(logits_p), q = softmax(logits_q) per
// row, averaged over rows whose target is not `ignore_id`.
Tensor symmetric_kl(const Tensor& logits_p, const Tensor& logits_q, std::span<const int> targets,
                    int ignore_id);

// Throws std::domain_error when any value is NaN or infinite.
void check_finite(const Tensor& t, const char* op);

}  // namespace mplug
