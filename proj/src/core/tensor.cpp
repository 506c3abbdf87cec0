#include "omae/core/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace omae {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  node_->data.assign(omae::numel(shape), fill);
  node_->shape = std::move(shape);
  set_requires_grad(requires_grad);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<Node<T>>()) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  if (omae::numel(shape) != values.size())
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  node_->data = std::move(values);
  node_->shape = std::move(shape);
  set_requires_grad(requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t i) const {
  if (i >= rank()) throw ShapeError("dimension index out of range for " + shape_str(shape()));
  return shape()[i];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return node().data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node().requires_grad = on;
  if (on) node().ensure_grad();
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  node().ensure_grad();
  return node().grad;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  node().ensure_grad();
  return node().grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  auto& n = node();
  n.grad.assign(n.data.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(shape(), values(), requires_grad());
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), values(), false);
}

template <typename T>
std::vector<Node<T>*> build_tape(const Tensor<T>& root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS over nodes that participate in differentiation.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  Node<T>* start = &root.node();
  if (!start->requires_grad) return order;
  stack.emplace_back(start, 0);
  seen.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  auto tape = build_tape(loss);
  if (tape.empty()) return;
  for (Node<T>* n : tape)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  Node<T>& root = loss.node();
  root.ensure_grad();
  root.grad[0] += T(1);
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf()) continue;
    for (auto& p : n->parents)
      if (p->requires_grad) p->ensure_grad();
    n->backward_fn(*n);
  }
}

template <typename T>
void zero_grads(std::span<Tensor<T>> tensors) {
  for (auto& t : tensors) t.zero_grad();
}

template class Tensor<float>;
template class Tensor<double>;
template std::vector<Node<float>*> build_tape(const Tensor<float>&);
template std::vector<Node<double>*> build_tape(const Tensor<double>&);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template void zero_grads(std::span<Tensor<float>>);
template void zero_grads(std::span<Tensor<double>>);

}  // namespace omae
