#include "cunet/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "cunet/error.hpp"

namespace cunet {

namespace {

thread_local bool t_grad_enabled = true;
std::atomic<bool> g_finite_checks{false};

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks() { return g_finite_checks.load(); }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return from_data(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw ContractError("tensor shape " + shape_str(shape) + " has a zero extent");
  }
  if (shape_numel(shape) != data.size()) {
    throw ContractError("tensor shape " + shape_str(shape) + " needs " +
                        std::to_string(shape_numel(shape)) + " values, got " +
                        std::to_string(data.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

TensorImpl& Tensor::impl() const {
  if (!impl_) throw ContractError("use of undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ContractError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<const double> Tensor::data() const { return impl().data; }
std::span<double> Tensor::mutable_data() { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool value) { impl().requires_grad = value; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }
std::span<const double> Tensor::grad() const { return impl().grad; }

std::span<double> Tensor::grad_buffer() {
  auto& im = impl();
  if (im.grad.empty()) im.grad.assign(im.data.size(), 0.0);
  return im.grad;
}

void Tensor::zero_grad() {
  auto& im = impl();
  std::vector<double>().swap(im.grad);
}

const std::shared_ptr<Node>& Tensor::grad_fn() const { return impl().grad_fn; }

Tensor Tensor::clone() const {
  return from_data(shape(), impl().data, impl().requires_grad);
}

Tensor Tensor::detach() const { return from_data(shape(), impl().data, false); }

Tensor Tensor::make_result(const Shape& shape, std::vector<double> data, std::string op,
                           std::vector<Tensor> inputs, Node::BackwardFn backward) {
  if (finite_checks()) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!std::isfinite(data[i])) {
        throw NumericError(op + " produced a non-finite value at flat index " +
                           std::to_string(i));
      }
    }
  }
  Tensor out = from_data(shape, std::move(data), false);
  if (!t_grad_enabled) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.impl_->requires_grad = true;
  out.impl_->grad_fn = std::move(node);
  return out;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!std::isfinite(loss.item())) throw NumericError("backward() on non-finite loss");
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a loss that does not require grad (tape already freed?)");
  }

  // Iterative post-order DFS yields a topological order (inputs before outputs).
  std::vector<Tensor> order;
  std::unordered_set<const Node*> visited;
  struct Frame {
    Tensor t;
    std::size_t next;
  };
  std::vector<Frame> stack;
  if (loss.grad_fn()) {
    stack.push_back({loss, 0});
    visited.insert(loss.grad_fn().get());
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    const auto& node = f.t.grad_fn();
    if (f.next < node->inputs.size()) {
      const Tensor& in = node->inputs[f.next++];
      if (in.grad_fn() && visited.insert(in.grad_fn().get()).second) {
        stack.push_back({in, 0});
      }
    } else {
      order.push_back(f.t);
      stack.pop_back();
    }
  }

  Tensor root = loss;
  root.grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor& t = *it;
    if (!t.has_grad()) continue;
    t.grad_fn()->backward(t.grad(), t.data());
  }
  // Release the tape and intermediate gradients.
  for (Tensor& t : order) {
    if (!t.same(loss)) t.zero_grad();
    t.impl().grad_fn.reset();
    t.impl().requires_grad = false;
  }
}

}  // namespace cunet
