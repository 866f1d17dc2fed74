#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace avm {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Error taxonomy. Every failure raised by the library derives from Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DimensionError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class ParameterError : public Error { using Error::Error; };
class DegenerateInputError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class CorruptionError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };

namespace detail {

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until a gradient flows here
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  std::vector<S>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), S(0));
    return grad;
  }
};

}  // namespace detail

// Gradient recording is on by default; NoGradGuard disables it for the
// current thread while in scope.
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

// Dense row-major tensor with reverse-mode differentiation. Copies share the
// underlying node; use clone() for an independent value.
template <typename S>
class BasicTensor {
 public:
  using Scalar = S;
  using NodePtr = std::shared_ptr<detail::Node<S>>;

  BasicTensor();
  BasicTensor(Shape shape, std::vector<S> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, S value, bool requires_grad = false);
  static BasicTensor scalar(S value, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }
  bool defined() const { return node_ != nullptr; }

  std::span<const S> data() const { return node_->data; }
  // Direct write access, used by optimizers and parameter loading.
  std::span<S> mutable_data() { return node_->data; }
  S item() const;
  S at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const S> grad() const { return node_->grad; }
  std::span<S> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  // Populates grads of every requires_grad tensor reachable from this scalar.
  // Leaf gradients accumulate across calls.
  void backward() const;

  BasicTensor detach() const;
  BasicTensor clone() const;

  const NodePtr& node() const { return node_; }
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  template <typename T>
  BasicTensor<T> cast() const;

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

namespace detail {

// Builds an op result. When recording is enabled and any input requires
// grad, the result is wired into the graph with the given backward rule.
template <typename S>
BasicTensor<S> make_result(Shape shape, std::vector<S> data,
                           std::vector<BasicTensor<S>> inputs,
                           std::function<void(Node<S>&)> backward);

}  // namespace detail

}  // namespace avm
