#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gcaps {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TensorImpl;

// Backward closure of a recorded operation. Reads the output's upstream
// gradient (out.pending) and accumulates into the inputs' pending buffers.
using BackwardFn = std::function<void(const TensorImpl& out)>;

struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<double> grad;
  std::shared_ptr<Node> grad_fn;
  // Gradient of the scalar currently being differentiated; only live inside
  // a backward pass.
  std::vector<double> pending;

  // Zero-initialized view of `pending`, allocated on first use.
  std::span<double> pending_grad();
};

/// Dense row-major tensor of doubles. Copies share storage (handle
/// semantics); values are treated as immutable once an op has consumed them.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(int axis) const;
  std::size_t size() const { return impl_->values.size(); }

  std::span<const double> values() const { return impl_->values; }
  // Direct write access for parameters and fixtures. Never use on a tensor
  // that already feeds a recorded operation.
  std::span<double> mutable_values() { return impl_->values; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return impl_->grad_fn == nullptr; }
  bool has_grad() const { return impl_->has_grad; }
  std::span<const double> grad() const;
  void zero_grad();

  /// Reverse-mode pass from a one-element tensor. Gradients accumulate into
  /// existing grad buffers until zero_grad(). With retain_intermediate set to
  /// false only leaves keep their gradient, which halves peak memory.
  void backward(bool retain_intermediate = true) const;

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Topologically ordered view of the graph reachable from a root: every
/// entry appears after all entries producing its inputs.
class GradTape {
 public:
  static GradTape record(const Tensor& root);

  const std::vector<TensorImpl*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<TensorImpl*> order_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

bool any_requires_grad(std::initializer_list<const Tensor*> inputs);

// Wraps freshly computed values into a tensor; records `backward` when
// grad mode is on and some input participates in differentiation.
Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                   std::string op, BackwardFn backward);

}  // namespace detail

}  // namespace gcaps
