#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace omae {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

/// Shared handle to a node of the autodiff graph. Copies alias the same
/// storage; use clone() for a detached deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().data.size(); }

  std::span<T> data() { return node().data; }
  std::span<const T> data() const { return node().data; }
  std::vector<T>& values() { return node().data; }
  const std::vector<T>& values() const { return node().data; }
  T item() const;

  bool requires_grad() const { return node().requires_grad; }
  /// Marks a leaf as trainable and allocates a zeroed grad buffer.
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return node().grad.size() == node().data.size(); }
  std::span<T> grad();
  std::span<const T> grad() const;
  void zero_grad();

  Tensor clone() const;
  /// Same values, no graph history, no grad requirement.
  Tensor detach() const;

  Node<T>& node() const {
    if (!node_) throw std::logic_error("use of undefined tensor");
    return *node_;
  }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Disables graph recording on the current thread for its lifetime.
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

/// Topologically ordered operation list reachable from a root; every node
/// appears after all of its inputs.
template <typename T>
std::vector<Node<T>*> build_tape(const Tensor<T>& root);

/// Back-propagates d(loss)/d(x) into every reachable tensor with
/// requires_grad. Leaf grads accumulate; intermediate grads are recomputed
/// from zero on every call.
template <typename T>
void backward(const Tensor<T>& loss);

template <typename T>
void zero_grads(std::span<Tensor<T>> tensors);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace omae
