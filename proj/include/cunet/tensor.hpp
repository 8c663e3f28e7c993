#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cunet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

// One recorded operation on the autodiff tape. The backward rule receives the
// gradient flowing into the op's output together with the output values and
// accumulates into the gradients of `inputs`.
struct Node {
  using BackwardFn =
      std::function<void(std::span<const double> grad_out, std::span<const double> out)>;

  std::string op;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

// Shared handle to a dense row-major float64 array. Copies alias the same
// storage; use clone() for a detached deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access; for parameters, optimizers, and test fixtures only.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  // Gradient buffer, allocated as zeros on first access.
  std::span<double> grad_buffer();
  void zero_grad();

  const std::shared_ptr<Node>& grad_fn() const;
  bool is_leaf() const { return grad_fn() == nullptr; }

  Tensor clone() const;
  // Same values, no tape linkage, requires_grad = false.
  Tensor detach() const;

  bool same(const Tensor& other) const { return impl_ == other.impl_; }

  // Result of a differentiable op. Records a tape node when grad mode is on and
  // any input requires grad; otherwise `backward` is discarded.
  static Tensor make_result(const Shape& shape, std::vector<double> data, std::string op,
                            std::vector<Tensor> inputs, Node::BackwardFn backward);

 private:
  friend void backward(const Tensor& loss);

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  TensorImpl& impl() const;

  std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// requires_grad leaf; the tape reachable from `loss` is released afterwards.
void backward(const Tensor& loss);

// Thread-local switch for tape recording.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// When on, every op result is scanned for NaN/Inf and a NumericError thrown.
void set_finite_checks(bool enabled);
bool finite_checks();

}  // namespace cunet
