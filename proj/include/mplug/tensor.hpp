#pragma once

// Dense row-major tensors of doubles with a reverse-mode autodiff tape.
//
// A Tensor is a cheap handle onto shared storage. Operations producing a
// tensor from inputs that require gradients record a Node; backward() walks
// those nodes in reverse topological order and accumulates into .grad of
// every tensor that requires gradients. Tensors built with
// requires_grad=false (frozen weights, data) never receive gradient storage.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace mplug {

using Shape = std::vector<std::size_t>;

struct TensorImpl;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // Convenience for tests: rows of equal length.
  static Tensor matrix(const std::vector<std::vector<double>>& rows, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  // 2-D helpers; a 1-D tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  // Direct mutation bypasses the tape; only valid on leaves (optimizer, init, loading).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Seeds d(this)/d(this) = 1 and propagates. Requires a scalar.
  void backward() const;

  // Same values, fresh storage, no history.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  TensorImpl* impl() const { return impl_.get(); }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_result(Shape shape, std::vector<double> values,
                            std::vector<Tensor> inputs,
                            std::function<void(const TensorImpl&)> backward);
};

struct Node {
  std::vector<Tensor> inputs;
  // Receives the output impl (its grad is populated) and accumulates into inputs.
  std::function<void(const TensorImpl&)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  // Lazily sized gradient buffer for accumulation.
  std::vector<double>& grad_buffer();
};

// Builds an op output. Records a node only if grad mode is on and some input
// requires gradients; `backward` is dropped otherwise.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl&)> backward);

bool grad_enabled();

// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

std::size_t shape_numel(const Shape& shape);

}  // namespace mplug
