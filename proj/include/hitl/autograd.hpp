#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "hitl/tensor.hpp"

namespace hitl {

enum class OpKind : std::uint8_t {
  Leaf,
  Add,
  AddBias,
  Mul,
  Scale,
  Sum,
  Mean,
  Relu,
  Sigmoid,
  Softmax,
  BinaryCrossEntropy,
  Conv2d,
  MaxPool2d,
  GlobalAvgPool,
  Dense,
  Reshape,
  SliceBatch,
  ChannelWeightedSum,
  NormalizeMax,
  BarycenterDistance,
  MaskedSum,
  Stack,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::AddBias: return "add_bias";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softmax: return "softmax";
    case OpKind::BinaryCrossEntropy: return "binary_cross_entropy";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::MaxPool2d: return "max_pool2d";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Dense: return "dense";
    case OpKind::Reshape: return "reshape";
    case OpKind::SliceBatch: return "slice_batch";
    case OpKind::ChannelWeightedSum: return "channel_weighted_sum";
    case OpKind::NormalizeMax: return "normalize_max";
    case OpKind::BarycenterDistance: return "barycenter_distance";
    case OpKind::MaskedSum: return "masked_sum";
    case OpKind::Stack: return "stack";
  }
  return "?";
}

// grad_in[i] is pre-sized to the i-th input's shape when that input needs a
// gradient and left empty otherwise. Rules accumulate into it.
template <class T>
using BackwardFn = std::function<void(const BasicTensor<T>& grad_out, std::vector<BasicTensor<T>>& grad_in)>;

template <class T>
struct Node {
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool requires_grad = false;
  OpKind op = OpKind::Leaf;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph construction for its lifetime (inference, metric passes).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Handle to a node of the compute graph. Copies share the node.
template <class T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}
  explicit Var(BasicTensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const BasicTensor<T>& value() const { return node_->value; }
  BasicTensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  T item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  bool is_leaf() const { return node_->op == OpKind::Leaf; }
  OpKind op() const { return node_->op; }

  /// Accumulated gradient; empty until a backward pass reaches this leaf.
  const BasicTensor<T>& grad() const { return node_->grad; }
  BasicTensor<T>& mutable_grad() { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = BasicTensor<T>(); }

  Node<T>* get() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds the output node of an op. Inputs that do not require gradients are
/// not retained; with grad mode off the result is a detached constant.
template <class T>
Var<T> make_result(BasicTensor<T> value, OpKind op, std::vector<Var<T>> inputs, BackwardFn<T> fn) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op_name(op));
  }
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    node->op = op;
    node->backward = std::move(fn);
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
  }
  return Var<T>(std::move(node));
}

namespace detail {

// Post-order DFS restricted to requires_grad nodes; iterative to survive deep graphs.
template <class T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  if (!root->requires_grad) return order;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

// Runs the reverse sweep. `relevant` filters which nodes receive gradients;
// `sink` is called for every relevant leaf-or-target node with its gradient.
template <class T, class Relevant, class Sink>
void reverse_sweep(Node<T>* root, BasicTensor<T> seed, Relevant relevant, Sink sink) {
  auto order = topo_order(root);
  std::unordered_map<Node<T>*, BasicTensor<T>> grads;
  grads.emplace(root, std::move(seed));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!relevant(node)) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    BasicTensor<T> g = std::move(found->second);
    grads.erase(found);
    if (!g.all_finite()) {
      throw NumericError(std::string("non-finite gradient at ") + op_name(node->op));
    }
    sink(node, g);
    if (node->inputs.empty() || !node->backward) continue;
    std::vector<BasicTensor<T>> gin(node->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      Node<T>* in = node->inputs[i].get();
      if (in->requires_grad && relevant(in)) {
        gin[i] = BasicTensor<T>::zeros(in->value.shape());
        any = true;
      }
    }
    if (!any) continue;
    node->backward(g, gin);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      if (gin[i].empty()) continue;
      Node<T>* in = node->inputs[i].get();
      auto slot = grads.find(in);
      if (slot == grads.end()) {
        grads.emplace(in, std::move(gin[i]));
      } else {
        slot->second += gin[i];
      }
    }
  }
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls until zero_grad().
template <class T>
void backward(const Var<T>& loss) {
  if (loss.value().numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  detail::reverse_sweep<T>(
      loss.get(), BasicTensor<T>::ones(loss.shape()), [](Node<T>*) { return true; },
      [](Node<T>* node, const BasicTensor<T>& g) {
        if (node->op != OpKind::Leaf) return;
        if (node->grad.empty()) {
          node->grad = g;
        } else {
          node->grad += g;
        }
      });
}

/// Vector-Jacobian product of `output` seeded with `seed`, with respect to
/// `wrt` (any node of the graph). Stored leaf gradients are left untouched and
/// only the subgraph between the two nodes is visited.
template <class T>
BasicTensor<T> grad(const Var<T>& output, const Var<T>& wrt, BasicTensor<T> seed) {
  output.value().require_same_shape(seed, "grad seed");
  BasicTensor<T> result = BasicTensor<T>::zeros(wrt.shape());
  if (!output.requires_grad() || !wrt.requires_grad()) return result;

  // Nodes from which `wrt` is reachable.
  auto order = detail::topo_order(output.get());
  std::unordered_set<Node<T>*> reach;
  for (Node<T>* node : order) {
    if (node == wrt.get()) {
      reach.insert(node);
      continue;
    }
    for (const auto& in : node->inputs) {
      if (reach.count(in.get())) {
        reach.insert(node);
        break;
      }
    }
  }
  if (!reach.count(output.get())) return result;
  Node<T>* target = wrt.get();
  detail::reverse_sweep<T>(
      output.get(), std::move(seed), [&](Node<T>* n) { return reach.count(n) > 0; },
      [&](Node<T>* node, const BasicTensor<T>& g) {
        if (node == target) result += g;
      });
  return result;
}

}  // namespace hitl
