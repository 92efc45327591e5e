#include "opcrash/numcore/autodiff.hpp"

#include <algorithm>
#include <unordered_set>

#include "opcrash/errors.hpp"

namespace opcrash::numcore {

template <typename T>
Node<T>::~Node() {
  std::vector<std::shared_ptr<Node>> pending = std::move(inputs);
  while (!pending.empty()) {
    std::shared_ptr<Node> n = std::move(pending.back());
    pending.pop_back();
    if (n && n.use_count() == 1) {
      for (auto& in : n->inputs) pending.push_back(std::move(in));
      n->inputs.clear();
    }
  }
}

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (grad.shape() != value.shape()) {
    ScopedAllocTag scoped(tag);
    grad = Tensor<T>(value.shape());
  }
  return grad;
}

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->tag = current_alloc_tag();
  return Var(std::move(n));
}

template <typename T>
Var<T> Var<T>::parameter(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->tag = current_alloc_tag();
  return Var(std::move(n));
}

template <typename T>
void Var<T>::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(T{0});
}

template <typename T>
Var<T> Var<T>::detached() const {
  return constant(node_->value);
}

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> inputs, const char* op,
                 std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  n->tag = current_alloc_tag();
  n->is_leaf = false;
  bool needs = false;
  n->inputs.reserve(inputs.size());
  for (auto& in : inputs) {
    needs = needs || in.requires_grad();
    n->inputs.push_back(in.share());
  }
  n->requires_grad = needs;
  if (needs) {
    n->backward_fn = std::move(backward_fn);
  } else {
    // Constant subgraph: nothing downstream needs the inputs.
    n->inputs.clear();
  }
  return Var<T>(std::move(n));
}

template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.valid() || loss.value().size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got " +
                         (loss.valid() ? shape_string(loss.shape()) : std::string("null")));
  }
  Node<T>* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order with inputs first.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  {
    ScopedAllocTag scoped(root->tag);
    root->grad_buffer()[0] += T{1};
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->is_leaf || !node->backward_fn) continue;
    if (node->grad.empty()) continue;
    {
      ScopedAllocTag scoped(node->tag);
      node->backward_fn(*node);
    }
    node->grad = Tensor<T>{};
  }
}

template struct Node<float>;
template struct Node<double>;
template class Var<float>;
template class Var<double>;
template Var<float> make_node(Tensor<float>, std::vector<Var<float>>, const char*,
                              std::function<void(Node<float>&)>);
template Var<double> make_node(Tensor<double>, std::vector<Var<double>>, const char*,
                               std::function<void(Node<double>&)>);
template void backward(const Var<float>&);
template void backward(const Var<double>&);

}  // namespace opcrash::numcore
