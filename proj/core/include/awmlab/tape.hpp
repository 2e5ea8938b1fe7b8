#pragma once

#include <memory>
#include <vector>

#include "awmlab/array.hpp"

namespace awmlab {

/// Operation kinds the tape records. Unary/binary elementwise ops require exact
/// shape equality except where noted; the only broadcast anywhere is adding or
/// subtracting a rank-1 bias across the rows of a rank-2 matrix.
enum class Op : uint8_t {
  leaf,          // tracked input, no backward rule
  matmul,        // [m,k] x [k,n] -> [m,n]
  add,           // same shape, or [m,n] + [n] row broadcast
  sub,           // same shape, or [m,n] - [n] row broadcast
  mul,           // elementwise, same shape
  divide,        // elementwise, same shape
  scale,         // x * attr.c
  tanh_op,
  sigmoid,       // 1/(1+exp(-x)), computed via tanh for tail stability
  relu,
  exp_op,
  log_op,        // natural log
  sin_op,
  cos_op,
  square,
  softplus,      // log(1+exp(x)), overflow-stable
  gelu,          // exact erf form
  clamp,         // min(max(x, attr.c), attr.c2); gradient passes inside the band
  softmax_last,  // softmax along the last axis, max-subtracted rows
  layer_norm,    // rows normalized over the last axis; inputs (x, gamma, beta)
  sum_all,       // full reduction to a rank-0 scalar
  mean_all,
  concat,        // along attr.axis, rank 1 or 2
  slice_op,      // window [attr.start, attr.start+attr.len) along attr.axis
  transpose,     // rank-2
  reshape,       // same numel, new shape in attr.shape
};

const char* op_name(Op op);
constexpr int kOpCount = static_cast<int>(Op::reshape) + 1;

/// Per-node attributes for the ops that need them.
struct OpAttr {
  double c = 0.0;   // scale factor; clamp lower bound
  double c2 = 0.0;  // clamp upper bound
  int axis = 0;     // concat / slice
  int start = 0;    // slice
  int len = 0;      // slice
  Shape shape;      // reshape target
};

/// A forward result. `arr` always holds data; `node >= 0` ties the value to a
/// tape node so gradients flow. A Value with node == -1 is a constant: it takes
/// part in forward arithmetic and contributes exactly zero gradient, which is
/// all stop_grad does.
struct Value {
  std::shared_ptr<const Array> arr;
  int node = -1;

  Value() = default;
  Value(std::shared_ptr<const Array> a, int n) : arr(std::move(a)), node(n) {}

  const Array& a() const { return *arr; }
  const Shape& shape() const { return arr->shape; }
  double item() const { return arr->item(); }
  bool on_tape() const { return node >= 0; }
};

struct Node {
  Op op = Op::leaf;
  std::vector<int> in;                               // node id per input, -1 for constants
  std::vector<std::shared_ptr<const Array>> in_val;  // saved input values
  std::shared_ptr<const Array> out;                  // saved output value
  std::shared_ptr<const Array> aux;                  // extra forward state some backward rules need
  OpAttr attr;
};

class Tape;

/// Result of a backward pass: one gradient accumulator per tape node, indexed
/// by node id. Nodes the output does not depend on read as zeros.
class Gradients {
 public:
  Gradients(const Tape* tape, std::vector<std::unique_ptr<Array>> g)
      : tape_(tape), g_(std::move(g)) {}

  /// Gradient of the backward output with respect to this value. The value must
  /// be on tape; constants hold no gradient by construction.
  const Array& wrt(const Value& v) const;
  const Array& at(int node) const;
  bool all_finite() const;

 private:
  const Tape* tape_;
  std::vector<std::unique_ptr<Array>> g_;
  mutable std::vector<std::unique_ptr<Array>> zeros_;  // lazily materialized
};

/// Append-only record of a forward computation. Build values with leaf() /
/// constant() and the op methods, then call backward() on a scalar output (or
/// vjp() with an explicit seed). Cleared between optimization steps; nothing
/// here persists across steps.
class Tape {
 public:
  Value leaf(Array v);
  static Value constant(Array v);
  static Value constant_scalar(double v) { return constant(Array::scalar(v)); }
  /// Copies the data, records no node: gradients stop here.
  static Value stop_grad(const Value& v) { return Value(v.arr, -1); }

  /// Generic dispatcher: validates shapes (throwing diagnostics that name the
  /// op and offending shapes), computes forward, records one node.
  Value forward(Op op, const std::vector<Value>& in, const OpAttr& attr = {});

  Value matmul(const Value& a, const Value& b) { return forward(Op::matmul, {a, b}); }
  Value add(const Value& a, const Value& b) { return forward(Op::add, {a, b}); }
  Value sub(const Value& a, const Value& b) { return forward(Op::sub, {a, b}); }
  Value mul(const Value& a, const Value& b) { return forward(Op::mul, {a, b}); }
  Value divide(const Value& a, const Value& b) { return forward(Op::divide, {a, b}); }
  Value scale(const Value& x, double c) {
    OpAttr at; at.c = c; return forward(Op::scale, {x}, at);
  }
  Value neg(const Value& x) { return scale(x, -1.0); }
  Value tanh(const Value& x) { return forward(Op::tanh_op, {x}); }
  Value sigmoid(const Value& x) { return forward(Op::sigmoid, {x}); }
  Value relu(const Value& x) { return forward(Op::relu, {x}); }
  Value exp(const Value& x) { return forward(Op::exp_op, {x}); }
  Value log(const Value& x) { return forward(Op::log_op, {x}); }
  Value sin(const Value& x) { return forward(Op::sin_op, {x}); }
  Value cos(const Value& x) { return forward(Op::cos_op, {x}); }
  Value square(const Value& x) { return forward(Op::square, {x}); }
  Value softplus(const Value& x) { return forward(Op::softplus, {x}); }
  Value gelu(const Value& x) { return forward(Op::gelu, {x}); }
  Value clamp(const Value& x, double lo, double hi) {
    OpAttr at; at.c = lo; at.c2 = hi; return forward(Op::clamp, {x}, at);
  }
  Value softmax_last(const Value& x) { return forward(Op::softmax_last, {x}); }
  Value layer_norm(const Value& x, const Value& gamma, const Value& beta) {
    return forward(Op::layer_norm, {x, gamma, beta});
  }
  Value sum(const Value& x) { return forward(Op::sum_all, {x}); }
  Value mean(const Value& x) { return forward(Op::mean_all, {x}); }
  Value concat(const std::vector<Value>& parts, int axis) {
    OpAttr at; at.axis = axis; return forward(Op::concat, parts, at);
  }
  Value slice(const Value& x, int axis, int start, int len) {
    OpAttr at; at.axis = axis; at.start = start; at.len = len;
    return forward(Op::slice_op, {x}, at);
  }
  Value transpose(const Value& x) { return forward(Op::transpose, {x}); }
  Value reshape(const Value& x, Shape s) {
    OpAttr at; at.shape = std::move(s); return forward(Op::reshape, {x}, at);
  }

  /// Reverse pass from a one-element output, seeded with 1.
  Gradients backward(const Value& out) const;
  /// Reverse pass with an explicit seed of the output's shape (vector-Jacobian
  /// product). Repeated calls on one tape are independent.
  Gradients vjp(const Value& out, const Array& seed) const;

  size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

}  // namespace awmlab
