#include "avm/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace avm {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename S>
BasicTensor<S>::BasicTensor() : node_(std::make_shared<detail::Node<S>>()) {}

template <typename S>
BasicTensor<S>::BasicTensor(Shape shape, std::vector<S> data, bool requires_grad)
    : node_(std::make_shared<detail::Node<S>>()) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename S>
BasicTensor<S> BasicTensor<S>::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<S>(n, S(0)), requires_grad);
}

template <typename S>
BasicTensor<S> BasicTensor<S>::full(Shape shape, S value, bool requires_grad) {
  auto n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<S>(n, value), requires_grad);
}

template <typename S>
BasicTensor<S> BasicTensor<S>::scalar(S value, bool requires_grad) {
  return BasicTensor(Shape{1}, std::vector<S>{value}, requires_grad);
}

template <typename S>
std::size_t BasicTensor<S>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return node_->shape[axis];
}

template <typename S>
S BasicTensor<S>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename S>
S BasicTensor<S>::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw ShapeError("at(row, col) needs a matrix, got " + shape_str(shape()));
  return node_->data[row * node_->shape[1] + col];
}

template <typename S>
void BasicTensor<S>::set_requires_grad(bool value) {
  node_->requires_grad = value;
}

template <typename S>
void BasicTensor<S>::zero_grad() {
  auto& g = node_->grad_buffer();
  std::fill(g.begin(), g.end(), S(0));
}

template <typename S>
void BasicTensor<S>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; the LSTM unrolls produce deep chains.
  std::vector<detail::Node<S>*> order;
  std::unordered_set<detail::Node<S>*> visited;
  std::vector<std::pair<detail::Node<S>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are recomputed from scratch on every call.
  for (auto* node : order) {
    if (node->backward) std::fill(node->grad.begin(), node->grad.end(), S(0));
  }
  node_->grad_buffer()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template <typename S>
BasicTensor<S> BasicTensor<S>::detach() const {
  return BasicTensor(node_->shape, node_->data, false);
}

template <typename S>
BasicTensor<S> BasicTensor<S>::clone() const {
  return BasicTensor(node_->shape, node_->data, node_->requires_grad);
}

template <typename S>
template <typename T>
BasicTensor<T> BasicTensor<S>::cast() const {
  std::vector<T> out(node_->data.begin(), node_->data.end());
  return BasicTensor<T>(node_->shape, std::move(out), node_->requires_grad);
}

namespace detail {

template <typename S>
BasicTensor<S> make_result(Shape shape, std::vector<S> data, std::vector<BasicTensor<S>> inputs,
                           std::function<void(Node<S>&)> backward) {
  BasicTensor<S> out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const auto& t) { return t.requires_grad(); });
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(inputs.size());
  for (auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

template BasicTensor<float> make_result(Shape, std::vector<float>, std::vector<BasicTensor<float>>,
                                        std::function<void(Node<float>&)>);
template BasicTensor<double> make_result(Shape, std::vector<double>, std::vector<BasicTensor<double>>,
                                         std::function<void(Node<double>&)>);
template BasicTensor<long double> make_result(Shape, std::vector<long double>, std::vector<BasicTensor<long double>>,
                                              std::function<void(Node<long double>&)>);

}  // namespace detail

template class BasicTensor<float>;
template class BasicTensor<double>;
template class BasicTensor<long double>;
template BasicTensor<double> BasicTensor<float>::cast<double>() const;
template BasicTensor<float> BasicTensor<double>::cast<float>() const;
template BasicTensor<float> BasicTensor<float>::cast<float>() const;
template BasicTensor<double> BasicTensor<double>::cast<double>() const;
template BasicTensor<long double> BasicTensor<double>::cast<long double>() const;

}  // namespace avm
