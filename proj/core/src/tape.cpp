#include "evifuse/tape.hpp"

#include <cmath>
#include <cstdio>
#include <utility>

#include "evifuse/errors.hpp"
#include "evifuse/special_functions.hpp"

namespace evifuse {

namespace {

double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Tape::Node& Tape::node_at(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
    throw UsageError("tape handle does not belong to this tape state");
  return nodes_[static_cast<std::size_t>(id)];
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.values.empty()) n.grad = Tensor::zeros(n.value.shape);
  return n.grad;
}

int Tape::leaf(Tensor value) {
  if (value.size() == 0) throw StructuralError("leaf: empty tensor");
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  return push(std::move(n));
}

int Tape::constant(Tensor value) { return leaf(std::move(value)); }

int Tape::affine(int x, int w, int b) {
  const Tensor& xv = node_at(x).value;
  const Tensor& wv = node_at(w).value;
  const Tensor& bv = node_at(b).value;
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1)
    throw StructuralError("affine: expected x [n,in], w [in,out], b [out]");
  if (xv.cols() != wv.rows() || wv.cols() != bv.size())
    throw StructuralError("affine: dimension mismatch");

  const std::size_t rows = xv.rows(), in = xv.cols(), out = wv.cols();
  Node n;
  n.op = Op::kAffine;
  n.in = {x, w, b};
  n.value = Tensor::zeros({rows, out});
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xi = &xv.values[i * in];
    double* oi = &n.value.values[i * out];
    for (std::size_t j = 0; j < out; ++j) oi[j] = bv.values[j];
    for (std::size_t k = 0; k < in; ++k) {
      const double xk = xi[k];
      const double* wk = &wv.values[k * out];
      for (std::size_t j = 0; j < out; ++j) oi[j] += xk * wk[j];
    }
  }
  return push(std::move(n));
}

int Tape::unary(Op op, int x) {
  const Tensor& xv = node_at(x).value;
  Node n;
  n.op = op;
  n.in = {x, -1, -1};
  n.value = Tensor::zeros(xv.shape);
  const std::size_t sz = xv.size();
  for (std::size_t i = 0; i < sz; ++i) {
    const double v = xv.values[i];
    double r;
    switch (op) {
      case Op::kTanh: r = std::tanh(v); break;
      case Op::kSigmoid: r = stable_sigmoid(v); break;
      case Op::kSoftplus: r = stable_softplus(v); break;
      case Op::kRelu: r = v > 0.0 ? v : 0.0; break;
      case Op::kLog:
        if (v <= 0.0) throw NumericRangeError("log of a non-positive value");
        r = std::log(v);
        break;
      case Op::kAbs: r = std::abs(v); break;
      case Op::kSquare: r = v * v; break;
      case Op::kLogGamma:
        if (v <= 0.0) throw NumericRangeError("log_gamma of a non-positive value");
        r = ::evifuse::log_gamma(v);
        break;
      default: throw UsageError("unary: bad op");
    }
    n.value.values[i] = r;
  }
  return push(std::move(n));
}

int Tape::tanh(int x) { return unary(Op::kTanh, x); }
int Tape::sigmoid(int x) { return unary(Op::kSigmoid, x); }
int Tape::softplus(int x) { return unary(Op::kSoftplus, x); }
int Tape::relu(int x) { return unary(Op::kRelu, x); }
int Tape::log(int x) { return unary(Op::kLog, x); }
int Tape::abs(int x) { return unary(Op::kAbs, x); }
int Tape::square(int x) { return unary(Op::kSquare, x); }
int Tape::log_gamma(int x) { return unary(Op::kLogGamma, x); }

int Tape::binary(Op op, int a, int b) {
  const Tensor& av = node_at(a).value;
  const Tensor& bv = node_at(b).value;
  if (!av.same_shape(bv)) throw StructuralError("elementwise op: shape mismatch");
  Node n;
  n.op = op;
  n.in = {a, b, -1};
  n.value = Tensor::zeros(av.shape);
  const std::size_t sz = av.size();
  for (std::size_t i = 0; i < sz; ++i) {
    const double x = av.values[i], y = bv.values[i];
    double r;
    switch (op) {
      case Op::kAdd: r = x + y; break;
      case Op::kSub: r = x - y; break;
      case Op::kMul: r = x * y; break;
      case Op::kDiv:
        if (y == 0.0) throw NumericRangeError("division by zero");
        r = x / y;
        break;
      default: throw UsageError("binary: bad op");
    }
    n.value.values[i] = r;
  }
  return push(std::move(n));
}

int Tape::add(int a, int b) { return binary(Op::kAdd, a, b); }
int Tape::sub(int a, int b) { return binary(Op::kSub, a, b); }
int Tape::mul(int a, int b) { return binary(Op::kMul, a, b); }
int Tape::div(int a, int b) { return binary(Op::kDiv, a, b); }

int Tape::add_scalar(int a, double c) {
  const Tensor& av = node_at(a).value;
  Node n;
  n.op = Op::kAddScalar;
  n.in = {a, -1, -1};
  n.aux = c;
  n.value = av;
  for (double& v : n.value.values) v += c;
  return push(std::move(n));
}

int Tape::mul_scalar(int a, double c) {
  const Tensor& av = node_at(a).value;
  Node n;
  n.op = Op::kMulScalar;
  n.in = {a, -1, -1};
  n.aux = c;
  n.value = av;
  for (double& v : n.value.values) v *= c;
  return push(std::move(n));
}

int Tape::concat(int a, int b) {
  const Tensor& av = node_at(a).value;
  const Tensor& bv = node_at(b).value;
  if (av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows())
    throw StructuralError("concat: expected two [n, *] tensors with equal n");
  const std::size_t rows = av.rows(), ca = av.cols(), cb = bv.cols();
  Node n;
  n.op = Op::kConcat;
  n.in = {a, b, -1};
  n.value = Tensor::zeros({rows, ca + cb});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < ca; ++j) n.value.at(i, j) = av.at(i, j);
    for (std::size_t j = 0; j < cb; ++j) n.value.at(i, ca + j) = bv.at(i, j);
  }
  return push(std::move(n));
}

int Tape::column(int x, std::size_t j) {
  const Tensor& xv = node_at(x).value;
  if (xv.rank() != 2 || j >= xv.cols()) throw StructuralError("column: index out of range");
  Node n;
  n.op = Op::kColumn;
  n.in = {x, -1, -1};
  n.index_aux = j;
  n.value = Tensor::zeros({xv.rows()});
  for (std::size_t i = 0; i < xv.rows(); ++i) n.value.values[i] = xv.at(i, j);
  return push(std::move(n));
}

int Tape::mean(int x) {
  const Tensor& xv = node_at(x).value;
  if (xv.size() == 0) throw StructuralError("mean: empty tensor");
  double acc = 0.0;
  for (double v : xv.values) acc += v;
  Node n;
  n.op = Op::kMean;
  n.in = {x, -1, -1};
  n.value = Tensor::scalar(acc / static_cast<double>(xv.size()));
  return push(std::move(n));
}

const Tensor& Tape::value(int id) const { return node_at(id).value; }

const Tensor& Tape::gradient(int id) const {
  const Node& n = node_at(id);
  if (n.grad.values.empty()) {
    // Not reached by backward: behave as an all-zero gradient.
    const_cast<Tape*>(this)->empty_grad_ = Tensor::zeros(n.value.shape);
    return empty_grad_;
  }
  return n.grad;
}

void Tape::backward(int root) {
  if (nodes_.empty()) throw UsageError("backward called before any forward pass");
  if (root < 0 || static_cast<std::size_t>(root) >= nodes_.size())
    throw UsageError("backward: dangling root handle");
  if (nodes_[static_cast<std::size_t>(root)].value.size() != 1)
    throw UsageError("backward: root must hold a single value");

  grad_buffer(root).values[0] = 1.0;
  for (int id = root; id >= 0; --id) backward_node(id);
}

void Tape::backward_node(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.values.empty()) return;  // not on any path to the root
  const Tensor& g = n.grad;

  switch (n.op) {
    case Op::kLeaf:
      return;
    case Op::kAffine: {
      const Tensor& xv = nodes_[n.in[0]].value;
      const Tensor& wv = nodes_[n.in[1]].value;
      Tensor& gx = grad_buffer(n.in[0]);
      Tensor& gw = grad_buffer(n.in[1]);
      Tensor& gb = grad_buffer(n.in[2]);
      const std::size_t rows = xv.rows(), in = xv.cols(), out = wv.cols();
      for (std::size_t i = 0; i < rows; ++i) {
        const double* gi = &g.values[i * out];
        const double* xi = &xv.values[i * in];
        double* gxi = &gx.values[i * in];
        for (std::size_t k = 0; k < in; ++k) {
          const double* wk = &wv.values[k * out];
          double acc = 0.0;
          for (std::size_t j = 0; j < out; ++j) acc += gi[j] * wk[j];
          gxi[k] += acc;
          double* gwk = &gw.values[k * out];
          const double xk = xi[k];
          for (std::size_t j = 0; j < out; ++j) gwk[j] += xk * gi[j];
        }
        for (std::size_t j = 0; j < out; ++j) gb.values[j] += gi[j];
      }
      return;
    }
    case Op::kTanh: {
      Tensor& gx = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = n.value.values[i];
        gx.values[i] += g.values[i] * (1.0 - y * y);
      }
      return;
    }
    case Op::kSigmoid: {
      Tensor& gx = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = n.value.values[i];
        gx.values[i] += g.values[i] * y * (1.0 - y);
      }
      return;
    }
    case Op::kSoftplus: {
      const Tensor& xv = nodes_[n.in[0]].value;
      Tensor& gx = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        gx.values[i] += g.values[i] * stable_sigmoid(xv.values[i]);
      return;
    }
    case Op::kRelu: {
      const Tensor& xv = nodes_[n.in[0]].value;
      Tensor& gx = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv.values[i] > 0.0) gx.values[i] += g.values[i];
      return;
    }
    case Op::kAdd: {
      Tensor& ga = grad_buffer(n.in[0]);
      Tensor& gb = grad_buffer(n.in[1]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.values[i] += g.values[i];
        gb.values[i] += g.values[i];
      }
      return;
    }
    case Op::kSub: {
      Tensor& ga = grad_buffer(n.in[0]);
      Tensor& gb = grad_buffer(n.in[1]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.values[i] += g.values[i];
        gb.values[i] -= g.values[i];
      }
      return;
    }
    case Op::kMul: {
      const Tensor& av = nodes_[n.in[0]].value;
      const Tensor& bv = nodes_[n.in[1]].value;
      Tensor& ga = grad_buffer(n.in[0]);
      Tensor& gb = grad_buffer(n.in[1]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.values[i] += g.values[i] * bv.values[i];
        gb.values[i] += g.values[i] * av.values[i];
      }
      return;
    }
    case Op::kDiv: {
      const Tensor& av = nodes_[n.in[0]].value;
      const Tensor& bv = nodes_[n.in[1]].value;
      Tensor& ga = grad_buffer(n.in[0]);
      Tensor& gb = grad_buffer(n.in[1]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double b = bv.values[i];
        ga.values[i] += g.values[i] / b;
        gb.values[i] -= g.values[i] * av.values[i] / (b * b);
      }
      return;
    }
    case Op::kAddScalar: {
      Tensor& ga = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga.values[i] += g.values[i];
      return;
    }
    case Op::kMulScalar: {
      Tensor& ga = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga.values[i] += g.values[i] * n.aux;
      return;
    }
    case Op::kLog: {
      const Tensor& xv = nodes_[n.in[0]].value;
      Tensor& gx = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx.values[i] += g.values[i] / xv.values[i];
      return;
    }
    case Op::kAbs: {
      const Tensor& xv = nodes_[n.in[0]].value;
      Tensor& gx = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = xv.values[i];
        const double sgn = (x > 0.0) - (x < 0.0);
        gx.values[i] += g.values[i] * sgn;
      }
      return;
    }
    case Op::kSquare: {
      const Tensor& xv = nodes_[n.in[0]].value;
      Tensor& gx = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        gx.values[i] += g.values[i] * 2.0 * xv.values[i];
      return;
    }
    case Op::kLogGamma: {
      const Tensor& xv = nodes_[n.in[0]].value;
      Tensor& gx = grad_buffer(n.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i)
        gx.values[i] += g.values[i] * digamma(xv.values[i]);
      return;
    }
    case Op::kConcat: {
      const Tensor& av = nodes_[n.in[0]].value;
      const Tensor& bv = nodes_[n.in[1]].value;
      Tensor& ga = grad_buffer(n.in[0]);
      Tensor& gb = grad_buffer(n.in[1]);
      const std::size_t rows = av.rows(), ca = av.cols(), cb = bv.cols();
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < ca; ++j) ga.at(i, j) += g.at(i, j);
        for (std::size_t j = 0; j < cb; ++j) gb.at(i, j) += g.at(i, ca + j);
      }
      return;
    }
    case Op::kColumn: {
      const Tensor& xv = nodes_[n.in[0]].value;
      Tensor& gx = grad_buffer(n.in[0]);
      const std::size_t cols = xv.cols();
      for (std::size_t i = 0; i < g.size(); ++i)
        gx.values[i * cols + n.index_aux] += g.values[i];
      return;
    }
    case Op::kMean: {
      const Tensor& xv = nodes_[n.in[0]].value;
      Tensor& gx = grad_buffer(n.in[0]);
      const double w = g.values[0] / static_cast<double>(xv.size());
      for (std::size_t i = 0; i < gx.size(); ++i) gx.values[i] += w;
      return;
    }
  }
}

void Tape::reset() { nodes_.clear(); }

}  // namespace evifuse
