#include "gcaps/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace gcaps {

namespace {

thread_local bool g_grad_enabled = true;

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::span<double> TensorImpl::pending_grad() {
  if (pending.empty()) pending.assign(values.size(), 0.0);
  return pending;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (numel(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() needs a one-element tensor, got " + to_string(shape()));
  return impl_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank does not match shape " + to_string(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= impl_->shape[axis]) throw ShapeError("index out of range for shape " + to_string(shape()));
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->values[flat];
}

Tensor& Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (!impl_->has_grad) return {};
  return impl_->grad;
}

void Tensor::zero_grad() {
  impl_->grad.clear();
  impl_->has_grad = false;
}

Tensor Tensor::detach() const { return from(shape(), impl_->values, false); }

Tensor Tensor::clone() const { return from(shape(), impl_->values, requires_grad()); }

GradTape GradTape::record(const Tensor& root) {
  GradTape tape;
  std::unordered_set<const TensorImpl*> visited;
  // Iterative post-order DFS; graphs from unrolled routing are deep enough
  // that recursion is uncomfortable.
  struct Frame {
    TensorImpl* impl;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  stack.push_back({root.impl().get(), 0});
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& frame = stack.back();
    const auto& node = frame.impl->grad_fn;
    if (node && frame.next_input < node->inputs.size()) {
      auto* child = node->inputs[frame.next_input++].get();
      if (visited.insert(child).second) stack.push_back({child, 0});
      continue;
    }
    tape.order_.push_back(frame.impl);
    stack.pop_back();
  }
  return tape;
}

void Tensor::backward(bool retain_intermediate) const {
  if (size() != 1) {
    throw AutodiffError("backward() needs a scalar, got shape " + to_string(shape()));
  }
  const auto tape = GradTape::record(*this);
  impl_->pending_grad()[0] += 1.0;
  const auto& order = tape.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (t->pending.empty()) continue;
    if (t->grad_fn) t->grad_fn->backward(*t);
    const bool keep = t->requires_grad && (retain_intermediate || !t->grad_fn);
    if (keep) {
      if (!t->has_grad) {
        t->grad = std::move(t->pending);
        t->has_grad = true;
      } else {
        for (std::size_t i = 0; i < t->grad.size(); ++i) t->grad[i] += t->pending[i];
      }
    }
    t->pending.clear();
    t->pending.shrink_to_fit();
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace detail {

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                   std::string op, BackwardFn backward) {
  auto out = Tensor::from(std::move(shape), std::move(values));
  const bool track = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                       return t.defined() && t.requires_grad();
                     });
  if (!track) return out;
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) node->inputs.push_back(t.impl());
  }
  node->backward = std::move(backward);
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

}  // namespace detail

}  // namespace gcaps
