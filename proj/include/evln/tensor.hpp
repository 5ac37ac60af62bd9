#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "evln/rng.hpp"

namespace evln {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
};

/// Handle to a row-major float64 array with optional gradient storage.
///
/// Copying a Tensor copies the handle; both copies refer to the same
/// storage. Use clone() for an independent deep copy. Tensors produced by
/// operations are never written to afterwards, so sharing them across
/// threads is safe as long as no gradient is accumulated into them.
class Tensor {
 public:
  Tensor();  // rank-0 tensor holding 0.0
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from(std::initializer_list<double> values);
  static Tensor from(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Direct write access. Only for leaves (parameters, inputs, finite
  // difference perturbation); never for tensors already used in a graph.
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  // Allocates zeros when absent. Const because a Tensor is a handle and
  // gradient accumulation is a side effect on the shared storage.
  std::span<double> mutable_grad() const;
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }

  Tensor clone() const;  // deep copy of data, detached, no grad
  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered log of differentiable operations for reverse-mode AD.
///
/// Each thread owns one active tape (see active_tape()). Operations record a
/// node only when recording is enabled and at least one input requires a
/// gradient.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(Tensor output, BackwardFn backward);
  // Seeds d(loss)/d(loss) = 1 and replays nodes in reverse record order.
  // Nodes whose output never received a gradient are skipped.
  void backward(const Tensor& loss);
  void reset();

  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

 private:
  struct Node {
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool recording_ = true;
};

Tape& active_tape();

// Disables recording on the active tape for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Backward on the active tape, then reset it.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. Binary elementwise ops broadcast numpy-style: shapes are
// aligned at the trailing axis, missing leading axes count as extent 1, and
// an extent-1 axis stretches to the other operand's extent. Any other
// mismatch raises DimensionError.

Shape broadcast_shapes(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
// log(0) = -inf (gradient +inf); negative input raises DomainError.
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
// log(1 + e^x); for x > 20 evaluated as x + log1p(e^-x), else log1p(e^x).
Tensor softplus(const Tensor& x);
Tensor square(const Tensor& x);
Tensor clamp_min(const Tensor& x, double floor);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);
// log(sum(exp(x))) along axis, max-shifted.
Tensor logsumexp(const Tensor& x, std::size_t axis, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
// Rows (axis-0 slices) of x picked by index, in the given order.
Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n]
Tensor transpose(const Tensor& x);                // rank 2
// Batched product [B,m,k]x[B,k,n]; either batch extent may be 1.
Tensor bmm(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& x);  // rank 3

// Softmax / log-softmax of x/tau along the last axis.
Tensor softmax_temperature(const Tensor& q, double tau);
Tensor log_softmax(const Tensor& q, double tau = 1.0);

// Cross-correlation, NCHW input, FCkhkw weights, no bias.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride,
              std::size_t pad);
// Non-overlapping k x k average pooling; H and W must divide by k.
Tensor avg_pool2d(const Tensor& x, std::size_t k);

Tensor sample_standard_normal(Rng& rng, const Shape& shape);
Tensor uniform(Rng& rng, const Shape& shape, double lo, double hi);

}  // namespace evln
