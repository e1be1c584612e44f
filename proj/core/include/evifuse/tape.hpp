#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "evifuse/tensor.hpp"

namespace evifuse {

// Reverse-mode autodiff over a dynamically built tape. Nodes are appended
// in topological order by construction, so backward is a single reverse
// sweep. Handles are indices into the tape; a handle is only meaningful
// for the tape that produced it and only until the next reset().
//
// Gradient buffers are allocated lazily by backward(); a forward-only tape
// (evaluation) never pays for them.
class Tape {
 public:
  // Leaves. `leaf` is for values gradients are wanted for (parameters,
  // op inputs under test); `constant` documents data that merely flows in.
  int leaf(Tensor value);
  int constant(Tensor value);

  // x: [n, in], w: [in, out], b: [out] -> [n, out]
  int affine(int x, int w, int b);

  int tanh(int x);
  int sigmoid(int x);
  int softplus(int x);
  int relu(int x);

  // Elementwise on identical shapes.
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int div(int a, int b);

  int add_scalar(int a, double c);
  int mul_scalar(int a, double c);

  // Elementwise scalar functions. log and log_gamma require positive
  // entries and raise NumericRangeError otherwise.
  int log(int x);
  int abs(int x);
  int square(int x);
  int log_gamma(int x);

  // [n, a] ++ [n, b] -> [n, a+b] along the feature axis.
  int concat(int a, int b);

  // Column j of [n, m] as an [n] vector.
  int column(int x, std::size_t j);

  // Mean over all entries -> [1].
  int mean(int x);

  const Tensor& value(int id) const;

  // Gradient of the last backward() root w.r.t. node `id`. Zero tensor if
  // the node was not reached.
  const Tensor& gradient(int id) const;

  // root must be a single-element node. Throws UsageError on an empty tape
  // or a dangling handle.
  void backward(int root);

  std::size_t node_count() const { return nodes_.size(); }

  // Drops all nodes, keeping buffer capacity for the next batch.
  void reset();

 private:
  enum class Op : std::uint8_t {
    kLeaf,
    kAffine,
    kTanh,
    kSigmoid,
    kSoftplus,
    kRelu,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kAddScalar,
    kMulScalar,
    kLog,
    kAbs,
    kSquare,
    kLogGamma,
    kConcat,
    kColumn,
    kMean,
  };

  struct Node {
    Op op;
    std::array<int, 3> in{-1, -1, -1};
    double aux = 0.0;
    std::size_t index_aux = 0;
    Tensor value;
    Tensor grad;  // empty until backward touches it
  };

  int push(Node n);
  const Node& node_at(int id) const;
  Tensor& grad_buffer(int id);
  int unary(Op op, int x);
  int binary(Op op, int a, int b);
  void backward_node(int id);

  std::vector<Node> nodes_;
  Tensor empty_grad_;
};

}  // namespace evifuse
