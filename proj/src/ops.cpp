#include "mplug/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "mplug/errors.hpp"

namespace mplug {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kMaskedScore = -1e30;

ConstMap as_matrix(std::span<const double> v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MutMap as_matrix(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined() || t.dim() < 1 || t.dim() > 2) {
    throw DimensionError(std::string(op) + ": expected a matrix");
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw DimensionError(std::string(op) + ": shape mismatch");
}

// Gradient buffer of an input, or nullptr when it does not take gradients.
std::vector<double>* grad_of(const Tensor& t) {
  return t.requires_grad() ? &t.impl()->grad_buffer() : nullptr;
}

Shape matrix_shape(std::size_t r, std::size_t c) { return {r, c}; }

}  // namespace

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw std::domain_error(std::string(op) + ": non-finite value");
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(k) + " vs " +
                         std::to_string(b.rows()) + ")");
  }
  std::vector<double> out(m * n, 0.0);
  if (m > 0 && n > 0 && k > 0) {
    as_matrix(out, m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  }
  Tensor result = make_result(matrix_shape(m, n), std::move(out), {a, b}, [a, b, m, k, n](const TensorImpl& o) {
    auto dout = as_matrix(o.grad, m, n);
    if (auto* ga = grad_of(a)) as_matrix(*ga, m, k).noalias() += dout * as_matrix(b.data(), k, n).transpose();
    if (auto* gb = grad_of(b)) as_matrix(*gb, k, n).noalias() += as_matrix(a.data(), m, k).transpose() * dout;
  });
  check_finite(result, "matmul");
  return result;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) throw DimensionError("matmul_nt: inner dimensions differ");
  std::vector<double> out(m * n, 0.0);
  if (m > 0 && n > 0 && k > 0) {
    as_matrix(out, m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), n, k).transpose();
  }
  Tensor result = make_result(matrix_shape(m, n), std::move(out), {a, b}, [a, b, m, k, n](const TensorImpl& o) {
    auto dout = as_matrix(o.grad, m, n);
    if (auto* ga = grad_of(a)) as_matrix(*ga, m, k).noalias() += dout * as_matrix(b.data(), n, k);
    if (auto* gb = grad_of(b)) as_matrix(*gb, n, k).noalias() += dout.transpose() * as_matrix(a.data(), m, k);
  });
  check_finite(result, "matmul_nt");
  return result;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  as_matrix(out, c, r) = as_matrix(a.data(), r, c).transpose();
  return make_result(matrix_shape(c, r), std::move(out), {a}, [a, r, c](const TensorImpl& o) {
    if (auto* ga = grad_of(a)) as_matrix(*ga, r, c) += as_matrix(o.grad, c, r).transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tensor result = make_result(a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    for (const Tensor* in : {&a, &b}) {
      if (auto* g = grad_of(*in)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
      }
    }
  });
  check_finite(result, "add");
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  Tensor result = make_result(a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    if (auto* g = grad_of(a)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    }
    if (auto* g = grad_of(b)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= o.grad[i];
    }
  });
  check_finite(result, "sub");
  return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor result = make_result(a.shape(), std::move(out), {a, b}, [a, b](const TensorImpl& o) {
    if (auto* g = grad_of(a)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * b.data()[i];
    }
    if (auto* g = grad_of(b)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * a.data()[i];
    }
  });
  check_finite(result, "mul");
  return result;
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  Tensor result = make_result(x.shape(), std::move(out), {x}, [x, factor](const TensorImpl& o) {
    if (auto* g = grad_of(x)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * factor;
    }
  });
  check_finite(result, "scale");
  return result;
}

Tensor add_scalar(const Tensor& x, double offset) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + offset;
  Tensor result = make_result(x.shape(), std::move(out), {x}, [x](const TensorImpl& o) {
    if (auto* g = grad_of(x)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    }
  });
  check_finite(result, "add_scalar");
  return result;
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_row");
  const std::size_t r = x.rows(), c = x.cols();
  if (bias.numel() != c) throw DimensionError("add_row: bias length differs from column count");
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.data()[i * c + j] + bias.data()[j];
  }
  Tensor result = make_result(x.shape(), std::move(out), {x, bias}, [x, bias, r, c](const TensorImpl& o) {
    if (auto* g = grad_of(x)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i];
    }
    if (auto* g = grad_of(bias)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) (*g)[j] += o.grad[i * c + j];
      }
    }
  });
  check_finite(result, "add_row");
  return result;
}

Tensor mul_col(const Tensor& x, const Tensor& c) {
  require_matrix(x, "mul_col");
  const std::size_t r = x.rows(), n = x.cols();
  if (c.numel() != r) throw DimensionError("mul_col: column length differs from row count");
  std::vector<double> out(r * n);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] * c.data()[i];
  }
  Tensor result = make_result(x.shape(), std::move(out), {x, c}, [x, c, r, n](const TensorImpl& o) {
    if (auto* g = grad_of(x)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*g)[i * n + j] += o.grad[i * n + j] * c.data()[i];
      }
    }
    if (auto* g = grad_of(c)) {
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += o.grad[i * n + j] * x.data()[i * n + j];
        (*g)[i] += acc;
      }
    }
  });
  check_finite(result, "mul_col");
  return result;
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  return make_result(x.shape(), std::move(out), {x}, [x](const TensorImpl& o) {
    if (auto* g = grad_of(x)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (x.data()[i] > 0.0) (*g)[i] += o.grad[i];
      }
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    // Branching keeps exp() from overflowing for large |v|.
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result(x.shape(), std::move(out), {x}, [x](const TensorImpl& o) {
    if (auto* g = grad_of(x)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double s = o.data[i];
        (*g)[i] += o.grad[i] * s * (1.0 - s);
      }
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_matrix(x, "softmax");
  const std::size_t r = x.rows(), c = x.cols();
  if (x.dim() == 1 && axis != 0) throw DimensionError("softmax: axis out of range");
  if (x.dim() == 2 && axis > 1) throw DimensionError("softmax: axis out of range");
  // View as `outer` groups of `len` values spaced `stride` apart.
  const bool along_rows = x.dim() == 1 || axis == 1;
  const std::size_t len = along_rows ? c : r;
  const std::size_t outer = along_rows ? r : c;
  const std::size_t stride = along_rows ? 1 : c;
  const std::size_t group_step = along_rows ? c : 1;
  if (len == 0) throw DimensionError("softmax: empty axis");

  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t g = 0; g < outer; ++g) {
    const std::size_t base = g * group_step;
    double mx = in[base];
    for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, in[base + j * stride]);
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double e = std::exp(in[base + j * stride] - mx);
      out[base + j * stride] = e;
      total += e;
    }
    for (std::size_t j = 0; j < len; ++j) out[base + j * stride] /= total;
  }
  return make_result(x.shape(), std::move(out), {x}, [x, len, outer, stride, group_step](const TensorImpl& o) {
    auto* g = grad_of(x);
    if (g == nullptr) return;
    for (std::size_t gi = 0; gi < outer; ++gi) {
      const std::size_t base = gi * group_step;
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) dot += o.grad[base + j * stride] * o.data[base + j * stride];
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t idx = base + j * stride;
        (*g)[idx] += o.data[idx] * (o.grad[idx] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  require_matrix(x, "log_softmax");
  const std::size_t r = x.rows(), c = x.cols();
  if (c == 0) throw DimensionError("log_softmax: empty axis");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return make_result(x.shape(), std::move(out), {x}, [x, r, c](const TensorImpl& o) {
    auto* g = grad_of(x);
    if (g == nullptr) return;
    for (std::size_t i = 0; i < r; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < c; ++j) gsum += o.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        (*g)[i * c + j] += o.grad[i * c + j] - std::exp(o.data[i * c + j]) * gsum;
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_matrix(x, "layernorm");
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c) {
    throw DimensionError("layernorm: gain/bias must match the last dimension");
  }
  std::vector<double> out(r * c);
  // Normalized values and inverse std are kept for the backward pass.
  std::vector<double> xhat(r * c);
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data().data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gain.data()[j] + bias.data()[j];
    }
  }
  Tensor result = make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](const TensorImpl& o) {
        if (auto* gg = grad_of(gain)) {
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) (*gg)[j] += o.grad[i * c + j] * xhat[i * c + j];
          }
        }
        if (auto* gb = grad_of(bias)) {
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) (*gb)[j] += o.grad[i * c + j];
          }
        }
        if (auto* gx = grad_of(x)) {
          const double n = static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dy = o.grad[i * c + j] * gain.data()[j];
              sum_dy += dy;
              sum_dy_xhat += dy * xhat[i * c + j];
            }
            for (std::size_t j = 0; j < c; ++j) {
              const double dy = o.grad[i * c + j] * gain.data()[j];
              (*gx)[i * c + j] += inv_std[i] * (dy - sum_dy / n - xhat[i * c + j] * sum_dy_xhat / n);
            }
          }
        }
      });
  check_finite(result, "layernorm");
  return result;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  const std::size_t r = a.rows(), ca = a.cols(), cb = b.cols();
  if (b.rows() != r) throw DimensionError("concat_cols: row counts differ");
  const std::size_t c = ca + cb;
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.data().data() + i * ca, ca, out.data() + i * c);
    std::copy_n(b.data().data() + i * cb, cb, out.data() + i * c + ca);
  }
  return make_result(matrix_shape(r, c), std::move(out), {a, b}, [a, b, r, ca, cb, c](const TensorImpl& o) {
    if (auto* g = grad_of(a)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < ca; ++j) (*g)[i * ca + j] += o.grad[i * c + j];
      }
    }
    if (auto* g = grad_of(b)) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < cb; ++j) (*g)[i * cb + j] += o.grad[i * c + ca + j];
      }
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  const std::size_t c = x.cols();
  if (begin + count > x.rows()) throw DimensionError("slice_rows: range out of bounds");
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
  return make_result(matrix_shape(count, c), std::move(out), {x}, [x, begin, c](const TensorImpl& o) {
    if (auto* g = grad_of(x)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[begin * c + i] += o.grad[i];
    }
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "gather_rows");
  const std::size_t n = table.rows(), c = table.cols();
  std::vector<double> out(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " out of range");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * c, c, out.data() + i * c);
  }
  std::vector<int> id_copy(ids.begin(), ids.end());
  return make_result(matrix_shape(ids.size(), c), std::move(out), {table},
                     [table, c, id_copy = std::move(id_copy)](const TensorImpl& o) {
                       if (auto* g = grad_of(table)) {
                         for (std::size_t i = 0; i < id_copy.size(); ++i) {
                           const std::size_t row = static_cast<std::size_t>(id_copy[i]);
                           for (std::size_t j = 0; j < c; ++j) (*g)[row * c + j] += o.grad[i * c + j];
                         }
                       }
                     });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "select_rows");
  const std::size_t c = x.cols();
  std::vector<double> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) throw DimensionError("select_rows: row out of range");
    std::copy_n(x.data().data() + rows[i] * c, c, out.data() + i * c);
  }
  std::vector<std::size_t> row_copy(rows.begin(), rows.end());
  return make_result(matrix_shape(rows.size(), c), std::move(out), {x},
                     [x, c, row_copy = std::move(row_copy)](const TensorImpl& o) {
                       if (auto* g = grad_of(x)) {
                         for (std::size_t i = 0; i < row_copy.size(); ++i) {
                           for (std::size_t j = 0; j < c; ++j) (*g)[row_copy[i] * c + j] += o.grad[i * c + j];
                         }
                       }
                     });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({1}, {total}, {x}, [x](const TensorImpl& o) {
    if (auto* g = grad_of(x)) {
      for (double& v : *g) v += o.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout: rate must be below 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = keep(rng) ? inv : 0.0;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return make_result(x.shape(), std::move(out), {x}, [x, mask = std::move(mask)](const TensorImpl& o) {
    if (auto* g = grad_of(x)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += o.grad[i] * mask[i];
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape,
                 std::span<const int> key_lengths) {
  require_matrix(q, "attention");
  const std::size_t d = q.cols();
  const std::size_t B = shape.batch, nq = shape.q_len, nk = shape.k_len, H = shape.heads;
  if (q.rows() != B * nq || k.rows() != B * nk || v.rows() != B * nk) {
    throw DimensionError("attention: row counts disagree with batch layout");
  }
  if (k.cols() != d || v.cols() != d) throw DimensionError("attention: width mismatch");
  if (H == 0 || d % H != 0) throw DimensionError("attention: width not divisible by heads");
  if (key_lengths.size() != B) throw DimensionError("attention: one key length per batch entry");
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[((b*H + h)*nq + t)*nk + s]
  std::vector<double> probs(B * H * nq * nk, 0.0);
  std::vector<double> out(B * nq * d, 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  std::vector<double> scores(nk);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t klen = std::min<std::size_t>(nk, static_cast<std::size_t>(std::max(key_lengths[b], 0)));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < nq; ++t) {
        const double* qrow = Q + (b * nq + t) * d + h * dh;
        double mx = kMaskedScore;
        for (std::size_t s = 0; s < nk; ++s) {
          const bool masked = s >= klen || (shape.causal && s > t);
          if (masked) {
            scores[s] = kMaskedScore;
            continue;
          }
          const double* krow = K + (b * nk + s) * d + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < dh; ++j) dot += qrow[j] * krow[j];
          scores[s] = dot * inv_sqrt;
          mx = std::max(mx, scores[s]);
        }
        double* p = probs.data() + ((b * H + h) * nq + t) * nk;
        double total = 0.0;
        for (std::size_t s = 0; s < nk; ++s) {
          p[s] = scores[s] == kMaskedScore ? 0.0 : std::exp(scores[s] - mx);
          total += p[s];
        }
        double* orow = out.data() + (b * nq + t) * d + h * dh;
        if (total == 0.0) continue;
        for (std::size_t s = 0; s < nk; ++s) {
          p[s] /= total;
          if (p[s] == 0.0) continue;
          const double* vrow = V + (b * nk + s) * d + h * dh;
          for (std::size_t j = 0; j < dh; ++j) orow[j] += p[s] * vrow[j];
        }
      }
    }
  }

  Tensor result = make_result(
      matrix_shape(B * nq, d), std::move(out), {q, k, v},
      [q, k, v, B, nq, nk, H, d, dh, inv_sqrt, probs = std::move(probs)](const TensorImpl& o) {
        auto* gq = grad_of(q);
        auto* gk = grad_of(k);
        auto* gv = grad_of(v);
        const double* Q = q.data().data();
        const double* K = k.data().data();
        const double* V = v.data().data();
        std::vector<double> dp(nk);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < nq; ++t) {
              const double* p = probs.data() + ((b * H + h) * nq + t) * nk;
              const double* dout = o.grad.data() + (b * nq + t) * d + h * dh;
              double weighted = 0.0;
              for (std::size_t s = 0; s < nk; ++s) {
                if (p[s] == 0.0) {
                  dp[s] = 0.0;
                  continue;
                }
                const double* vrow = V + (b * nk + s) * d + h * dh;
                double acc = 0.0;
                for (std::size_t j = 0; j < dh; ++j) acc += dout[j] * vrow[j];
                dp[s] = acc;
                weighted += p[s] * acc;
                if (gv != nullptr) {
                  double* gvrow = gv->data() + (b * nk + s) * d + h * dh;
                  for (std::size_t j = 0; j < dh; ++j) gvrow[j] += p[s] * dout[j];
                }
              }
              const double* qrow = Q + (b * nq + t) * d + h * dh;
              for (std::size_t s = 0; s < nk; ++s) {
                if (p[s] == 0.0) continue;
                const double ds = p[s] * (dp[s] - weighted) * inv_sqrt;
                const double* krow = K + (b * nk + s) * d + h * dh;
                if (gq != nullptr) {
                  double* gqrow = gq->data() + (b * nq + t) * d + h * dh;
                  for (std::size_t j = 0; j < dh; ++j) gqrow[j] += ds * krow[j];
                }
                if (gk != nullptr) {
                  double* gkrow = gk->data() + (b * nk + s) * d + h * dh;
                  for (std::size_t j = 0; j < dh; ++j) gkrow[j] += ds * qrow[j];
                }
              }
            }
          }
        }
      });
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_id, double smoothing) {
  require_matrix(logits, "cross_entropy");
  const std::size_t r = logits.rows(), c = logits.cols();
  if (targets.size() != r) throw DimensionError("cross_entropy: one target per row required");
  if (smoothing < 0.0 || smoothing >= 1.0) throw ContractError("cross_entropy: smoothing must be in [0,1)");
  std::vector<double> logp(r * c);
  std::size_t counted = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] == ignore_id) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      throw DimensionError("cross_entropy: target out of range");
    }
    const double* row = logits.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    double row_loss = 0.0;
    double uniform = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      logp[i * c + j] = row[j] - lse;
      uniform += logp[i * c + j];
    }
    row_loss = -(1.0 - smoothing) * logp[i * c + static_cast<std::size_t>(targets[i])];
    if (smoothing > 0.0) row_loss -= smoothing * uniform / static_cast<double>(c);
    total += row_loss;
    ++counted;
  }
  const double denom = counted == 0 ? 1.0 : static_cast<double>(counted);
  std::vector<int> target_copy(targets.begin(), targets.end());
  return make_result({1}, {total / denom}, {logits},
                     [logits, r, c, denom, smoothing, ignore_id, logp = std::move(logp),
                      target_copy = std::move(target_copy)](const TensorImpl& o) {
                       auto* g = grad_of(logits);
                       if (g == nullptr) return;
                       const double scale_out = o.grad[0] / denom;
                       for (std::size_t i = 0; i < r; ++i) {
                         if (target_copy[i] == ignore_id) continue;
                         for (std::size_t j = 0; j < c; ++j) {
                           double target_prob = smoothing / static_cast<double>(c);
                           if (static_cast<int>(j) == target_copy[i]) target_prob += 1.0 - smoothing;
                           (*g)[i * c + j] += scale_out * (std::exp(logp[i * c + j]) - target_prob);
                         }
                       }
                     });
}

Tensor symmetric_kl(const Tensor& logits_p, const Tensor& logits_q, std::span<const int> targets, int ignore_id) {
  require_same_shape(logits_p, logits_q, "symmetric_kl");
  const std::size_t r = logits_p.rows(), c = logits_p.cols();
  if (targets.size() != r) throw DimensionError("symmetric_kl: one target per row required");
  auto log_probs = [c](const double* row, double* out) {
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[j] = row[j] - lse;
  };
  std::vector<double> lp(r * c), lq(r * c);
  std::size_t counted = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (targets[i] == ignore_id) continue;
    log_probs(logits_p.data().data() + i * c, lp.data() + i * c);
    log_probs(logits_q.data().data() + i * c, lq.data() + i * c);
    double row = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double diff_log = lp[i * c + j] - lq[i * c + j];
      row += (std::exp(lp[i * c + j]) - std::exp(lq[i * c + j])) * diff_log;
    }
    total += 0.5 * row;
    ++counted;
  }
  const double denom = counted == 0 ? 1.0 : static_cast<double>(counted);
  std::vector<int> target_copy(targets.begin(), targets.end());
  return make_result(
      {1}, {total / denom}, {logits_p, logits_q},
      [logits_p, logits_q, r, c, denom, ignore_id, lp = std::move(lp), lq = std::move(lq),
       target_copy = std::move(target_copy)](const TensorImpl& o) {
        auto* gp = grad_of(logits_p);
        auto* gq = grad_of(logits_q);
        const double s = 0.5 * o.grad[0] / denom;
        for (std::size_t i = 0; i < r; ++i) {
          if (target_copy[i] == ignore_id) continue;
          const double* a = lp.data() + i * c;
          const double* b = lq.data() + i * c;
          double p_dot = 0.0, q_dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            p_dot += std::exp(a[j]) * (a[j] - b[j]);
            q_dot += std::exp(b[j]) * (b[j] - a[j]);
          }
          for (std::size_t j = 0; j < c; ++j) {
            const double p = std::exp(a[j]), q = std::exp(b[j]);
            if (gp != nullptr) (*gp)[i * c + j] += s * (p * ((a[j] - b[j]) - p_dot) + p - q);
            if (gq != nullptr) (*gq)[i * c + j] += s * (q * ((b[j] - a[j]) - q_dot) + q - p);
          }
        }
      });
}

}  // namespace mplug
