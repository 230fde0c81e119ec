#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "defgen/rng.hpp"
#include "defgen/tensor.hpp"

namespace defgen {

using TokenId = std::int32_t;

// Handle to a node in a Graph. Only meaningful for the graph that issued it.
struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  MatMulNT,
  Transpose,
  Add,
  Sub,
  Mul,
  Scale,
  AddBias,
  Softmax,
  MaskedSoftmax,
  LayerNorm,
  Gelu,
  Relu,
  Dropout,
  GatherRows,
  SliceCols,
  ConcatCols,
  CrossEntropy,
  Sum,
  Mean,
};

enum class Reduction : std::uint8_t { Mean, Sum };

// Define-by-run reverse-mode autodiff tape.
//
// Nodes are appended in evaluation order, so inputs always precede their
// consumers and backward() is a single reverse sweep. Parameters enter through
// param(): the node reads the tensor in place, and if the tensor has
// requires_grad set, backward() adds the node's gradient into tensor.grad().
// A graph is single-use and must not be shared across threads.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Constant input; never receives gradient.
  Var input(Tensor value);
  // Leaf bound to a live tensor. The tensor must outlive the graph. Its
  // values are never written; only its gradient buffer is, by backward().
  Var param(const Tensor& tensor);

  const Tensor& value(Var v) const;
  // Gradient of the last backward() with respect to v; empty if v needs none.
  std::span<const double> grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id).op; }
  std::span<const std::uint32_t> inputs(Var v) const { return nodes_.at(v.id).inputs; }

  // a[m,k] x b[k,n] -> [m,n]
  Var matmul(Var a, Var b);
  // a[m,k] x b[n,k]^T -> [m,n]
  Var matmul_nt(Var a, Var b);
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  // x[..., n] + bias[n] broadcast over rows.
  Var add_bias(Var x, Var bias);
  // Softmax along any axis, with max subtraction.
  Var softmax(Var x, int axis = -1);
  // Row softmax of a rank-2 score matrix. key_keep (length n, or empty for
  // all) marks usable columns; causal additionally hides columns j > i.
  // Hidden entries get probability exactly 0.
  Var masked_softmax(Var scores, std::span<const std::uint8_t> key_keep, bool causal);
  // Normalizes each trailing-axis row; eps sits inside the square root.
  Var layer_norm(Var x, Var gain, Var bias, double eps);
  // tanh approximation.
  Var gelu(Var x);
  Var relu(Var x);
  // Inverted dropout; identity when rate == 0.
  Var dropout(Var x, double rate, Rng& rng);
  // Rows of table[V, d] selected by ids -> [len(ids), d].
  Var gather_rows(Var table, std::span<const TokenId> ids);
  Var slice_cols(Var x, std::size_t begin, std::size_t end);
  Var concat_cols(std::span<const Var> parts);
  // Negative log-softmax probability of each target row, over positions
  // whose target differs from ignore_id. Mean or sum reduction; scalar result.
  Var cross_entropy(Var logits, std::span<const TokenId> targets, TokenId ignore_id,
                    Reduction reduction = Reduction::Mean);
  Var sum(Var x);
  Var mean(Var x);

  // Seeds d(loss)/d(loss) = 1 and propagates. loss must hold one element.
  void backward(Var loss);

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<std::uint32_t> inputs;
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor* param = nullptr;
    bool needs_grad = false;
    std::vector<double> grad;
    // Op-specific saved intermediates.
    std::vector<double> saved;
    std::vector<std::int64_t> index;
    double scalar = 0.0;
    std::size_t a = 0;
    std::size_t b = 0;

    const Tensor& value() const { return external ? *external : owned; }
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Var push(Node n);
  std::vector<double>& ensure_grad(std::uint32_t id);
  void backward_node(std::uint32_t id);

  std::vector<Node> nodes_;
};

}  // namespace defgen
