#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "inca/tensor.hpp"

namespace inca {

// Handle to a node of a Graph.
struct Var {
  static constexpr std::uint32_t kInvalid = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = kInvalid;
  bool valid() const noexcept { return id != kInvalid; }
};

inline constexpr double kLayerNormEps = 1e-5;

// Tape-based reverse-mode differentiation over BasicTensor<T>.
//
// Nodes are appended in creation order, which is a topological order, and
// backward walks them in reverse. A node's backward adds into its parents'
// gradient buffers in parent order, so gradients are reproducible bit for
// bit. Constants and parameters may borrow an external tensor; the borrowed
// tensor must outlive the graph and stay unchanged while it exists. A graph
// is confined to one thread.
template <typename T>
class Graph {
 public:
  using TensorT = BasicTensor<T>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  // Leaves.
  Var constant(const TensorT& t);
  Var constant(TensorT&& t);
  Var param(const TensorT& t);
  Var param(TensorT&& t);
  Var leaf(const TensorT& t, bool trainable) {
    return trainable ? param(t) : constant(t);
  }

  const TensorT& value(Var v) const;
  T scalar(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  // Null when no gradient reached the node.
  const TensorT* grad(Var v) const;
  TensorT grad_or_zero(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  // Populates gradients of every requires_grad node reachable from `loss`.
  void backward(Var loss);

  // Linear algebra.
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var transpose(Var a);

  // Elementwise.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T s);
  Var add_row(Var a, Var row);  // broadcast a 1 x q row over every row of a
  Var gelu(Var a);

  // Row-wise normalizations; rank-1 inputs are a single row.
  Var softmax_rows(Var a);
  Var layer_norm(Var a, Var gamma, Var beta, T eps = T(kLayerNormEps));

  // Reductions and reshaping.
  Var mean_rows(Var a);  // p x q -> 1 x q
  Var row_dot(Var a, Var w);  // p x q, p x q -> 1 x p
  Var sum(Var a);  // -> 1 x 1
  Var add_n(std::span<const Var> terms);
  Var slice_rows(Var a, std::size_t begin, std::size_t end);
  Var slice_cols(Var a, std::size_t begin, std::size_t end);
  Var concat_rows(std::span<const Var> parts);
  Var concat_cols(std::span<const Var> parts);

  // Losses, averaged over rows. Rows of `logits` are samples.
  Var cross_entropy(Var logits, std::span<const int> labels);
  // Per-row loss is the sum over columns of the elementwise BCE; targets are
  // 0/1 and have the shape of logits.
  Var bce_with_logits(Var logits, const TensorT& targets);

 private:
  using BackwardFn = std::function<void(Graph&, const TensorT& out_grad)>;

  struct Node {
    TensorT owned;
    const TensorT* borrowed = nullptr;
    bool requires_grad = false;
    bool has_grad = false;
    TensorT grad;
    BackwardFn backward;

    const TensorT& value() const { return borrowed ? *borrowed : owned; }
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Var push(TensorT value, bool requires_grad, BackwardFn fn);
  // Zero-initialized on first use.
  TensorT& grad_buffer(Var v);
  void accumulate(Var v, const TensorT& g);

  std::vector<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace inca
