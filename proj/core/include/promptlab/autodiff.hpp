#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "promptlab/parameter.hpp"
#include "promptlab/tensor.hpp"

namespace promptlab {

class Graph;

/// Handle to a value recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
};

/// Tape of forward operations. Nodes are appended in execution order, which is
/// a topological order, so backward walks the tape in reverse exactly once.
/// One graph per forward pass; not safe for concurrent writers.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  /// With `record_gradients == false` no node requires grad, so nothing is
  /// kept for a backward pass (inference).
  explicit Graph(bool record_gradients = true) : record_gradients_(record_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf holding a copy of `t`; never requires grad.
  Var constant(Tensor t);

  /// Leaf bound to `p` without copying. Trainable parameters receive their
  /// accumulated gradient in `p.grad` on backward. Binding the same
  /// parameter twice returns the same node.
  Var param(Parameter& p);

  /// Records an op result. `backward` runs only if some input requires grad.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  /// Reverse pass from a scalar loss. Gradients of trainable parameters are
  /// added to Parameter::grad.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.ref ? *n.ref : n.owned;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer of a node, allocated on first use.
  Tensor& grad(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool record_gradients_ = true;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline bool Var::requires_grad() const { return graph->requires_grad(id); }

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kMaskedScore = -1e30;

// Primitive set. Every op checks shapes and throws ShapeError naming the
// offending shapes.

/// a (m x k) times b (k x n).
Var matmul(Var a, Var b);
/// a (m x k) times transpose of b (n x k).
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
/// Adds a 1 x n row to every row of a (m x n).
Var add_row(Var a, Var row);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var a);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
/// Rows of `table` selected by `ids`.
Var embedding(Var table, std::span<const int> ids);
/// Normalizes each row over the last axis, then applies gain and bias rows.
Var layer_norm(Var x, Var gain, Var bias);
Var softmax_rows(Var x);
/// GELU, tanh approximation.
Var gelu(Var x);
/// Adds kMaskedScore where key column > query row + offset. Rows are queries.
Var causal_mask_add(Var scores, std::size_t offset = 0);

enum class Reduction { Mean, Sum };

/// Cross-entropy of row-wise softmax(logits) against `targets`, counted only
/// where mask[i] != 0. Rejects an empty mask.
Var cross_entropy(Var logits, std::span<const int> targets, std::span<const unsigned char> mask,
                  Reduction reduction = Reduction::Mean);

/// Non-differentiable helpers on plain tensors (used by the ops above and by
/// inference paths that do not record a graph).
Tensor softmax_rows(const Tensor& x);
double gelu(double x);

}  // namespace promptlab
