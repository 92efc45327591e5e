#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "opcrash/numcore/tensor.hpp"

namespace opcrash::numcore {

template <typename T>
struct Node {
  Tensor<T> value;
  /// Empty until the first gradient contribution arrives.
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";
  AllocTag tag = AllocTag::kGeneral;
  bool requires_grad = false;
  bool is_leaf = true;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
  // Tears down long input chains iteratively so deep unrolled graphs do not
  // overflow the stack.
  ~Node();

  /// Gradient buffer, zero-initialised on first use.
  Tensor<T>& grad_buffer();
};

/// Handle to a node in the computation graph. Cheap to copy.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  /// Leaf without gradient tracking.
  static Var constant(Tensor<T> value);
  /// Leaf whose gradient is retained across backward passes.
  static Var parameter(Tensor<T> value);

  bool valid() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  /// In-place access for optimisers and tests; do not use mid-graph.
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  void zero_grad();
  /// Constant copy of the current value, cut from the graph.
  Var detached() const;

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& share() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an interior node. `backward_fn` is dropped when no input needs a
/// gradient.
template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> inputs, const char* op,
                 std::function<void(Node<T>&)> backward_fn);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable parameter; interior gradients are released once consumed.
/// Visit order is a deterministic function of the graph.
template <typename T>
void backward(const Var<T>& loss);

extern template struct Node<float>;
extern template struct Node<double>;
extern template class Var<float>;
extern template class Var<double>;

}  // namespace opcrash::numcore
