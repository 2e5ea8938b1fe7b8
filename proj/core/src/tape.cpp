#include "awmlab/tape.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace awmlab {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

[[noreturn]] void fail(Op op, const std::string& msg) {
  throw std::invalid_argument(std::string(op_name(op)) + ": " + msg);
}

void need_inputs(Op op, const std::vector<Value>& in, size_t n) {
  if (in.size() != n)
    fail(op, "expects " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
  for (const Value& v : in)
    if (!v.arr) fail(op, "input holds no data");
}

void need_same_shape(Op op, const Array& a, const Array& b) {
  if (!shape_eq(a.shape, b.shape))
    fail(op, "shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// add/sub accept equal shapes or a rank-1 bias against the rows of a rank-2
// matrix. Returns true in the broadcast case.
bool check_addlike(Op op, const Array& a, const Array& b) {
  if (shape_eq(a.shape, b.shape)) return false;
  if (a.rank() == 2 && b.rank() == 1 && a.shape[1] == b.shape[0]) return true;
  fail(op, "shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape) +
               " (only [m,n] op [n] broadcasts)");
}

double stable_sigmoid(double x) { return 0.5 * (1.0 + std::tanh(0.5 * x)); }
double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

int last_dim(const Array& a) {
  if (a.rank() == 0) return 1;
  return a.shape[static_cast<size_t>(a.rank() - 1)];
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::divide: return "divide";
    case Op::scale: return "scale";
    case Op::tanh_op: return "tanh";
    case Op::sigmoid: return "sigmoid";
    case Op::relu: return "relu";
    case Op::exp_op: return "exp";
    case Op::log_op: return "log";
    case Op::sin_op: return "sin";
    case Op::cos_op: return "cos";
    case Op::square: return "square";
    case Op::softplus: return "softplus";
    case Op::gelu: return "gelu";
    case Op::clamp: return "clamp";
    case Op::softmax_last: return "softmax-last-axis";
    case Op::layer_norm: return "layer-norm";
    case Op::sum_all: return "sum";
    case Op::mean_all: return "mean";
    case Op::concat: return "concatenate";
    case Op::slice_op: return "slice";
    case Op::transpose: return "transpose";
    case Op::reshape: return "reshape";
  }
  return "?";
}

Value Tape::leaf(Array v) {
  Node n;
  n.op = Op::leaf;
  n.out = std::make_shared<Array>(std::move(v));
  nodes_.push_back(std::move(n));
  return Value(nodes_.back().out, static_cast<int>(nodes_.size()) - 1);
}

Value Tape::constant(Array v) {
  return Value(std::make_shared<Array>(std::move(v)), -1);
}

const Array& Gradients::wrt(const Value& v) const {
  if (!v.on_tape())
    throw std::invalid_argument("gradient requested for a constant value (no tape node)");
  return at(v.node);
}

const Array& Gradients::at(int node) const {
  auto id = static_cast<size_t>(node);
  if (id >= g_.size()) throw std::invalid_argument("gradient for unknown node id");
  if (g_[id]) return *g_[id];
  if (zeros_.size() < g_.size()) zeros_.resize(g_.size());
  if (!zeros_[id]) zeros_[id] = std::make_unique<Array>(tape_->node(node).out->shape);
  return *zeros_[id];
}

bool Gradients::all_finite() const {
  for (const auto& a : g_)
    if (a && !a->all_finite()) return false;
  return true;
}

Value Tape::forward(Op op, const std::vector<Value>& in, const OpAttr& attr) {
  Node n;
  n.op = op;
  n.attr = attr;
  Array out;

  switch (op) {
    case Op::leaf:
      fail(op, "leaves are created with leaf(), not forward()");

    case Op::matmul: {
      need_inputs(op, in, 2);
      const Array &a = in[0].a(), &b = in[1].a();
      if (a.rank() != 2 || b.rank() != 2)
        fail(op, "needs rank-2 operands, got " + shape_str(a.shape) + " x " + shape_str(b.shape));
      if (a.shape[1] != b.shape[0])
        fail(op, "inner dimensions differ: " + shape_str(a.shape) + " x " + shape_str(b.shape));
      out = Array(Shape{a.shape[0], b.shape[1]});
      MapC ma(a.data.data(), a.shape[0], a.shape[1]);
      MapC mb(b.data.data(), b.shape[0], b.shape[1]);
      MapM mo(out.data.data(), out.shape[0], out.shape[1]);
      mo.noalias() = ma * mb;
      break;
    }

    case Op::add:
    case Op::sub: {
      need_inputs(op, in, 2);
      const Array &a = in[0].a(), &b = in[1].a();
      const double sign = (op == Op::add) ? 1.0 : -1.0;
      if (check_addlike(op, a, b)) {
        out = a;
        const int c = a.shape[1];
        for (int r = 0; r < a.shape[0]; ++r)
          for (int j = 0; j < c; ++j) out.at2(r, j) += sign * b.at(j);
      } else {
        out = a;
        for (int64_t i = 0; i < out.numel(); ++i) out.at(i) += sign * b.at(i);
      }
      break;
    }

    case Op::mul:
    case Op::divide: {
      need_inputs(op, in, 2);
      const Array &a = in[0].a(), &b = in[1].a();
      need_same_shape(op, a, b);
      out = a;
      if (op == Op::mul)
        for (int64_t i = 0; i < out.numel(); ++i) out.at(i) *= b.at(i);
      else
        for (int64_t i = 0; i < out.numel(); ++i) out.at(i) /= b.at(i);
      break;
    }

    case Op::scale: {
      need_inputs(op, in, 1);
      out = in[0].a();
      out *= attr.c;
      break;
    }

    case Op::tanh_op:
    case Op::sigmoid:
    case Op::relu:
    case Op::exp_op:
    case Op::log_op:
    case Op::sin_op:
    case Op::cos_op:
    case Op::square:
    case Op::softplus:
    case Op::gelu:
    case Op::clamp: {
      need_inputs(op, in, 1);
      out = in[0].a();
      for (int64_t i = 0; i < out.numel(); ++i) {
        double& x = out.at(i);
        switch (op) {
          case Op::tanh_op: x = std::tanh(x); break;
          case Op::sigmoid: x = stable_sigmoid(x); break;
          case Op::relu: x = x > 0.0 ? x : 0.0; break;
          case Op::exp_op: x = std::exp(x); break;
          case Op::log_op: x = std::log(x); break;
          case Op::sin_op: x = std::sin(x); break;
          case Op::cos_op: x = std::cos(x); break;
          case Op::square: x = x * x; break;
          case Op::softplus: x = stable_softplus(x); break;
          case Op::gelu: x = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); break;
          case Op::clamp: x = std::min(std::max(x, attr.c), attr.c2); break;
          default: break;
        }
      }
      break;
    }

    case Op::softmax_last: {
      need_inputs(op, in, 1);
      const Array& a = in[0].a();
      if (a.rank() < 1) fail(op, "needs rank >= 1, got " + shape_str(a.shape));
      out = a;
      const int d = last_dim(a);
      if (d == 0) fail(op, "empty last axis in " + shape_str(a.shape));
      const int64_t rows = a.numel() / d;
      for (int64_t r = 0; r < rows; ++r) {
        double* p = out.data.data() + r * d;
        double m = p[0];
        for (int j = 1; j < d; ++j) m = std::max(m, p[j]);
        double s = 0.0;
        for (int j = 0; j < d; ++j) { p[j] = std::exp(p[j] - m); s += p[j]; }
        for (int j = 0; j < d; ++j) p[j] /= s;
      }
      break;
    }

    case Op::layer_norm: {
      need_inputs(op, in, 3);
      const Array &a = in[0].a(), &ga = in[1].a(), &be = in[2].a();
      if (a.rank() < 1 || a.rank() > 2)
        fail(op, "input must be rank 1 or 2, got " + shape_str(a.shape));
      const int d = last_dim(a);
      if (ga.rank() != 1 || ga.shape[0] != d || be.rank() != 1 || be.shape[0] != d)
        fail(op, "gamma/beta must be shape [" + std::to_string(d) + "], got " +
                     shape_str(ga.shape) + " / " + shape_str(be.shape));
      const int64_t rows = a.numel() / d;
      out = a;
      Array aux(Shape{static_cast<int>(rows), 2});  // per row: mean, 1/std
      constexpr double eps = 1e-5;
      for (int64_t r = 0; r < rows; ++r) {
        const double* x = a.data.data() + r * d;
        double* y = out.data.data() + r * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += x[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= d;
        const double rstd = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) y[j] = (x[j] - mu) * rstd * ga.at(j) + be.at(j);
        aux.at2(static_cast<int>(r), 0) = mu;
        aux.at2(static_cast<int>(r), 1) = rstd;
      }
      n.aux = std::make_shared<Array>(std::move(aux));
      break;
    }

    case Op::sum_all:
    case Op::mean_all: {
      need_inputs(op, in, 1);
      const Array& a = in[0].a();
      if (a.numel() == 0) fail(op, "empty input " + shape_str(a.shape));
      double s = 0.0;
      for (double x : a.data) s += x;
      if (op == Op::mean_all) s /= static_cast<double>(a.numel());
      out = Array::scalar(s);
      break;
    }

    case Op::concat: {
      if (in.empty()) fail(op, "needs at least one input");
      for (const Value& v : in)
        if (!v.arr) fail(op, "input holds no data");
      const int rank = in[0].a().rank();
      const int axis = attr.axis;
      if (rank < 1 || rank > 2 || axis < 0 || axis >= rank)
        fail(op, "axis " + std::to_string(axis) + " invalid for rank-" + std::to_string(rank));
      Shape s = in[0].a().shape;
      for (size_t i = 1; i < in.size(); ++i) {
        const Array& b = in[i].a();
        if (b.rank() != rank)
          fail(op, "rank mismatch " + shape_str(in[0].shape()) + " vs " + shape_str(b.shape));
        for (int dd = 0; dd < rank; ++dd)
          if (dd != axis && b.shape[dd] != s[dd])
            fail(op, "off-axis dims differ: " + shape_str(s) + " vs " + shape_str(b.shape));
        s[axis] += b.shape[axis];
      }
      out = Array(s);
      if (rank == 1 || axis == 0) {
        int64_t off = 0;
        for (const Value& v : in) {
          const Array& b = v.a();
          std::copy(b.data.begin(), b.data.end(), out.data.begin() + off);
          off += b.numel();
        }
      } else {  // rank 2, axis 1
        int coff = 0;
        for (const Value& v : in) {
          const Array& b = v.a();
          for (int r = 0; r < s[0]; ++r)
            for (int j = 0; j < b.shape[1]; ++j) out.at2(r, coff + j) = b.at2(r, j);
          coff += b.shape[1];
        }
      }
      break;
    }

    case Op::slice_op: {
      need_inputs(op, in, 1);
      const Array& a = in[0].a();
      const int rank = a.rank(), axis = attr.axis;
      if (rank < 1 || rank > 2 || axis < 0 || axis >= rank)
        fail(op, "axis " + std::to_string(axis) + " invalid for rank-" + std::to_string(rank));
      if (attr.len <= 0 || attr.start < 0 || attr.start + attr.len > a.shape[axis])
        fail(op, "window [" + std::to_string(attr.start) + ", " +
                     std::to_string(attr.start + attr.len) + ") out of range for " +
                     shape_str(a.shape) + " axis " + std::to_string(axis));
      Shape s = a.shape;
      s[axis] = attr.len;
      out = Array(s);
      if (rank == 1) {
        std::copy(a.data.begin() + attr.start, a.data.begin() + attr.start + attr.len,
                  out.data.begin());
      } else if (axis == 0) {
        std::copy(a.data.begin() + static_cast<int64_t>(attr.start) * a.shape[1],
                  a.data.begin() + static_cast<int64_t>(attr.start + attr.len) * a.shape[1],
                  out.data.begin());
      } else {
        for (int r = 0; r < s[0]; ++r)
          for (int j = 0; j < attr.len; ++j) out.at2(r, j) = a.at2(r, attr.start + j);
      }
      break;
    }

    case Op::transpose: {
      need_inputs(op, in, 1);
      const Array& a = in[0].a();
      if (a.rank() != 2) fail(op, "needs rank-2, got " + shape_str(a.shape));
      out = Array(Shape{a.shape[1], a.shape[0]});
      for (int r = 0; r < a.shape[0]; ++r)
        for (int j = 0; j < a.shape[1]; ++j) out.at2(j, r) = a.at2(r, j);
      break;
    }

    case Op::reshape: {
      need_inputs(op, in, 1);
      const Array& a = in[0].a();
      if (shape_numel(attr.shape) != a.numel())
        fail(op, "cannot reshape " + shape_str(a.shape) + " to " + shape_str(attr.shape));
      out = Array(attr.shape, a.data);
      break;
    }
  }

  n.in.reserve(in.size());
  n.in_val.reserve(in.size());
  for (const Value& v : in) {
    n.in.push_back(v.node);
    n.in_val.push_back(v.arr);
  }
  n.out = std::make_shared<Array>(std::move(out));
  nodes_.push_back(std::move(n));
  return Value(nodes_.back().out, static_cast<int>(nodes_.size()) - 1);
}

namespace {

Array& acc(std::vector<std::unique_ptr<Array>>& g, int id, const Shape& shape) {
  auto& slot = g[static_cast<size_t>(id)];
  if (!slot) slot = std::make_unique<Array>(shape);
  return *slot;
}

// Accumulates input-gradients of one node given the gradient at its output.
void backward_op(const Node& n, const Array& go, std::vector<std::unique_ptr<Array>>& g) {
  auto want = [&](size_t k) { return n.in[k] >= 0; };
  const Array& out = *n.out;

  switch (n.op) {
    case Op::leaf:
      break;

    case Op::matmul: {
      const Array &a = *n.in_val[0], &b = *n.in_val[1];
      MapC mg(go.data.data(), go.shape[0], go.shape[1]);
      if (want(0)) {
        Array& ga = acc(g, n.in[0], a.shape);
        MapM mga(ga.data.data(), a.shape[0], a.shape[1]);
        MapC mb(b.data.data(), b.shape[0], b.shape[1]);
        mga.noalias() += mg * mb.transpose();
      }
      if (want(1)) {
        Array& gb = acc(g, n.in[1], b.shape);
        MapM mgb(gb.data.data(), b.shape[0], b.shape[1]);
        MapC ma(a.data.data(), a.shape[0], a.shape[1]);
        mgb.noalias() += ma.transpose() * mg;
      }
      break;
    }

    case Op::add:
    case Op::sub: {
      const Array &a = *n.in_val[0], &b = *n.in_val[1];
      const double sign = (n.op == Op::add) ? 1.0 : -1.0;
      if (want(0)) acc(g, n.in[0], a.shape) += go;
      if (want(1)) {
        Array& gb = acc(g, n.in[1], b.shape);
        if (shape_eq(a.shape, b.shape)) {
          for (int64_t i = 0; i < gb.numel(); ++i) gb.at(i) += sign * go.at(i);
        } else {  // bias row broadcast: column sums
          for (int r = 0; r < a.shape[0]; ++r)
            for (int j = 0; j < a.shape[1]; ++j) gb.at(j) += sign * go.at2(r, j);
        }
      }
      break;
    }

    case Op::mul: {
      const Array &a = *n.in_val[0], &b = *n.in_val[1];
      if (want(0)) {
        Array& ga = acc(g, n.in[0], a.shape);
        for (int64_t i = 0; i < ga.numel(); ++i) ga.at(i) += go.at(i) * b.at(i);
      }
      if (want(1)) {
        Array& gb = acc(g, n.in[1], b.shape);
        for (int64_t i = 0; i < gb.numel(); ++i) gb.at(i) += go.at(i) * a.at(i);
      }
      break;
    }

    case Op::divide: {
      const Array &a = *n.in_val[0], &b = *n.in_val[1];
      if (want(0)) {
        Array& ga = acc(g, n.in[0], a.shape);
        for (int64_t i = 0; i < ga.numel(); ++i) ga.at(i) += go.at(i) / b.at(i);
      }
      if (want(1)) {
        Array& gb = acc(g, n.in[1], b.shape);
        for (int64_t i = 0; i < gb.numel(); ++i)
          gb.at(i) -= go.at(i) * a.at(i) / (b.at(i) * b.at(i));
      }
      break;
    }

    case Op::scale: {
      if (want(0)) {
        Array& ga = acc(g, n.in[0], n.in_val[0]->shape);
        for (int64_t i = 0; i < ga.numel(); ++i) ga.at(i) += n.attr.c * go.at(i);
      }
      break;
    }

    case Op::tanh_op:
    case Op::sigmoid:
    case Op::relu:
    case Op::exp_op:
    case Op::log_op:
    case Op::sin_op:
    case Op::cos_op:
    case Op::square:
    case Op::softplus:
    case Op::gelu:
    case Op::clamp: {
      if (!want(0)) break;
      const Array& x = *n.in_val[0];
      Array& ga = acc(g, n.in[0], x.shape);
      for (int64_t i = 0; i < ga.numel(); ++i) {
        const double xi = x.at(i), yi = out.at(i), gi = go.at(i);
        double d = 0.0;
        switch (n.op) {
          case Op::tanh_op: d = 1.0 - yi * yi; break;
          case Op::sigmoid: d = yi * (1.0 - yi); break;
          case Op::relu: d = xi > 0.0 ? 1.0 : 0.0; break;
          case Op::exp_op: d = yi; break;
          case Op::log_op: d = 1.0 / xi; break;
          case Op::sin_op: d = std::cos(xi); break;
          case Op::cos_op: d = -std::sin(xi); break;
          case Op::square: d = 2.0 * xi; break;
          case Op::softplus: d = stable_sigmoid(xi); break;
          case Op::gelu:
            d = 0.5 * (1.0 + std::erf(xi * kInvSqrt2)) +
                xi * kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
            break;
          case Op::clamp: d = (xi >= n.attr.c && xi <= n.attr.c2) ? 1.0 : 0.0; break;
          default: break;
        }
        ga.at(i) += d * gi;
      }
      break;
    }

    case Op::softmax_last: {
      // Row rule diag(p) - p p^T applied to the incoming row:
      // dx = p * (dy - <dy, p>).
      if (!want(0)) break;
      const Array& x = *n.in_val[0];
      Array& ga = acc(g, n.in[0], x.shape);
      const int d = last_dim(x);
      const int64_t rows = x.numel() / d;
      for (int64_t r = 0; r < rows; ++r) {
        const double* p = out.data.data() + r * d;
        const double* dy = go.data.data() + r * d;
        double* dx = ga.data.data() + r * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += dy[j] * p[j];
        for (int j = 0; j < d; ++j) dx[j] += p[j] * (dy[j] - dot);
      }
      break;
    }

    case Op::layer_norm: {
      const Array& x = *n.in_val[0];
      const Array& ga_w = *n.in_val[1];
      const Array& aux = *n.aux;
      const int d = last_dim(x);
      const int64_t rows = x.numel() / d;
      Array* dx = want(0) ? &acc(g, n.in[0], x.shape) : nullptr;
      Array* dgamma = want(1) ? &acc(g, n.in[1], ga_w.shape) : nullptr;
      Array* dbeta = want(2) ? &acc(g, n.in[2], n.in_val[2]->shape) : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const double mu = aux.at2(static_cast<int>(r), 0);
        const double rstd = aux.at2(static_cast<int>(r), 1);
        const double* xr = x.data.data() + r * d;
        const double* gr = go.data.data() + r * d;
        double m1 = 0.0, m2 = 0.0;  // mean(dy), mean(dy * xhat)
        for (int j = 0; j < d; ++j) {
          const double xh = (xr[j] - mu) * rstd;
          const double dy = gr[j] * ga_w.at(j);
          m1 += dy;
          m2 += dy * xh;
        }
        m1 /= d;
        m2 /= d;
        for (int j = 0; j < d; ++j) {
          const double xh = (xr[j] - mu) * rstd;
          if (dx) {
            const double dy = gr[j] * ga_w.at(j);
            dx->data[r * d + j] += rstd * (dy - m1 - xh * m2);
          }
          if (dgamma) dgamma->at(j) += gr[j] * xh;
          if (dbeta) dbeta->at(j) += gr[j];
        }
      }
      break;
    }

    case Op::sum_all:
    case Op::mean_all: {
      if (!want(0)) break;
      const Array& x = *n.in_val[0];
      Array& ga = acc(g, n.in[0], x.shape);
      const double s =
          go.item() * (n.op == Op::mean_all ? 1.0 / static_cast<double>(x.numel()) : 1.0);
      for (int64_t i = 0; i < ga.numel(); ++i) ga.at(i) += s;
      break;
    }

    case Op::concat: {
      const int axis = n.attr.axis;
      const int rank = n.in_val[0]->rank();
      if (rank == 1 || axis == 0) {
        int64_t off = 0;
        for (size_t k = 0; k < n.in.size(); ++k) {
          const Array& part = *n.in_val[k];
          if (want(k)) {
            Array& gp = acc(g, n.in[k], part.shape);
            for (int64_t i = 0; i < part.numel(); ++i) gp.at(i) += go.at(off + i);
          }
          off += part.numel();
        }
      } else {
        int coff = 0;
        for (size_t k = 0; k < n.in.size(); ++k) {
          const Array& part = *n.in_val[k];
          if (want(k)) {
            Array& gp = acc(g, n.in[k], part.shape);
            for (int r = 0; r < part.shape[0]; ++r)
              for (int j = 0; j < part.shape[1]; ++j) gp.at2(r, j) += go.at2(r, coff + j);
          }
          coff += part.shape[1];
        }
      }
      break;
    }

    case Op::slice_op: {
      if (!want(0)) break;
      const Array& x = *n.in_val[0];
      Array& ga = acc(g, n.in[0], x.shape);
      const int axis = n.attr.axis, start = n.attr.start, len = n.attr.len;
      if (x.rank() == 1) {
        for (int j = 0; j < len; ++j) ga.at(start + j) += go.at(j);
      } else if (axis == 0) {
        for (int r = 0; r < len; ++r)
          for (int j = 0; j < x.shape[1]; ++j) ga.at2(start + r, j) += go.at2(r, j);
      } else {
        for (int r = 0; r < x.shape[0]; ++r)
          for (int j = 0; j < len; ++j) ga.at2(r, start + j) += go.at2(r, j);
      }
      break;
    }

    case Op::transpose: {
      if (!want(0)) break;
      const Array& x = *n.in_val[0];
      Array& ga = acc(g, n.in[0], x.shape);
      for (int r = 0; r < x.shape[0]; ++r)
        for (int j = 0; j < x.shape[1]; ++j) ga.at2(r, j) += go.at2(j, r);
      break;
    }

    case Op::reshape: {
      if (!want(0)) break;
      const Array& x = *n.in_val[0];
      Array& ga = acc(g, n.in[0], x.shape);
      for (int64_t i = 0; i < ga.numel(); ++i) ga.at(i) += go.at(i);
      break;
    }
  }
}

}  // namespace

Gradients Tape::vjp(const Value& out, const Array& seed) const {
  if (!out.on_tape())
    throw std::invalid_argument("backward: output is a constant (no tape node)");
  if (!shape_eq(seed.shape, out.shape()))
    throw std::invalid_argument("backward: seed shape " + shape_str(seed.shape) +
                                " does not match output " + shape_str(out.shape()));
  std::vector<std::unique_ptr<Array>> g(nodes_.size());
  g[static_cast<size_t>(out.node)] = std::make_unique<Array>(seed);
  for (int id = out.node; id >= 0; --id) {
    if (!g[static_cast<size_t>(id)]) continue;
    backward_op(nodes_[static_cast<size_t>(id)], *g[static_cast<size_t>(id)], g);
  }
  return Gradients(this, std::move(g));
}

Gradients Tape::backward(const Value& out) const {
  if (!out.arr)
    throw std::invalid_argument("backward: output holds no data");
  if (out.a().numel() != 1)
    throw std::invalid_argument("backward: output must be scalar-shaped, got " +
                                shape_str(out.shape()));
  return vjp(out, Array::full(out.shape(), 1.0));
}

}  // namespace awmlab
