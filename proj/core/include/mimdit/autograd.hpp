#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mimdit/tensor.hpp"

namespace mimdit {

using NodeId = std::size_t;

enum class OpTag : std::uint8_t {
  constant,
  parameter,
  matmul,
  transpose,
  reshape,
  add,
  sub,
  mul,
  scale,
  gelu,
  sigmoid,
  softmax,
  mean,
  sum_all,
  mean_all,
  layernorm,
  concat,
  slice,
  take_rows,
  gather,
  normalize_sum,
  l2_normalize,
  conv2d,
};

std::string_view op_name(OpTag tag);

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  NodeId id() const noexcept { return id_; }
  Graph* graph() const noexcept { return graph_; }

 private:
  friend class Graph;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

/// Tape of operations in creation order, so every node's inputs precede it.
/// backward() walks the tape once in reverse and accumulates gradients.
///
/// Parameters are bound by address: gradients flow into the bound tensor's
/// grad slot, accumulated across every use in the graph. The bound tensors
/// must outlive the graph.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  struct Node {
    OpTag tag = OpTag::constant;
    std::vector<NodeId> inputs;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    Tensor* parameter = nullptr;
    BackwardFn backward;
  };

  /// With `record_gradients` false no backward closures are kept (inference).
  explicit Graph(bool record_gradients = true) : record_(record_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to `p`. Repeated calls with the same tensor return one node.
  Var parameter(Tensor& p);

  Var record(OpTag tag, std::initializer_list<Var> inputs, Tensor value, BackwardFn backward);
  Var record(OpTag tag, std::span<const Var> inputs, Tensor value, BackwardFn backward);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  bool needs_grad(NodeId id) const { return nodes_[id].needs_grad; }
  bool records_gradients() const noexcept { return record_; }

  void accumulate(NodeId id, const Tensor& delta);
  void accumulate(NodeId id, Tensor&& delta);

  /// Fills gradients for every parameter reachable from `loss`. The loss
  /// must hold exactly one element.
  void backward(Var loss);

  /// Gradient accumulated at a node during the last backward (zeros if none).
  Tensor gradient(Var v) const;

 private:
  Var push(Node node);

  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, NodeId> parameter_nodes_;
  bool record_;
};

// Differentiable operations. Each mirrors the eager kernel of the same name.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var gelu(Var x);
Var sigmoid(Var x);
Var softmax(Var x, std::size_t axis);
Var mean(Var x, std::size_t axis);
Var sum_all(Var x);
Var mean_all(Var x);
Var layernorm(Var x, Var gain, Var bias);
Var concat(std::span<const Var> parts, std::size_t axis);
Var concat(std::initializer_list<Var> parts, std::size_t axis);
std::vector<Var> split(Var x, std::span<const std::size_t> extents, std::size_t axis);
std::vector<Var> split(Var x, std::initializer_list<std::size_t> extents, std::size_t axis);
Var take_rows(Var x, std::span<const std::size_t> rows);
/// Selects flat elements by index into a rank-1 result.
Var gather(Var x, std::span<const std::size_t> indices);
/// x / sum(x) over all elements.
Var normalize_sum(Var x);
inline constexpr double kL2NormalizeEpsilon = 1e-12;
/// Each row (last axis) divided by sqrt(|row|^2 + eps).
Var l2_normalize(Var x);
Var conv2d(Var image, Var kernel);

/// x W + b with W of shape [in, out] and b of shape [out].
Var linear(Var x, Var weight, Var bias);

}  // namespace mimdit
