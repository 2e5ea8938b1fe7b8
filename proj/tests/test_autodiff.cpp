#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "awmlab/grad_check.hpp"
#include "awmlab/tape.hpp"

using namespace awmlab;

namespace {

// Draws values bounded away from a set of kink points so central differences
// with step 1e-5 stay on one smooth piece.
double draw_away(RngStream& rng, double lo, double hi, std::initializer_list<double> kinks) {
  for (int tries = 0; tries < 100; ++tries) {
    double x = rng.uniform(lo, hi);
    bool ok = true;
    for (double k : kinks)
      if (std::fabs(x - k) < 5e-2) ok = false;
    if (ok) return x;
  }
  return (lo + hi) / 2 + 0.11;
}

Array draw_away_array(RngStream& rng, Shape s, double lo, double hi,
                      std::initializer_list<double> kinks) {
  Array a(std::move(s));
  for (double& x : a.data) x = draw_away(rng, lo, hi, kinks);
  return a;
}

bool bit_equal(const Array& a, const Array& b) {
  return shape_eq(a.shape, b.shape) &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("matmul by identity returns the operand") {
  RngStream rng(7);
  Tape t;
  Array a = rng.normal_array({3, 3});
  Array eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at2(i, i) = 1.0;
  Value out = t.matmul(t.leaf(a), Tape::constant(eye));
  CHECK(bit_equal(out.a(), a));
}

TEST_CASE("softmax of a constant row is uniform") {
  Tape t;
  Value out = t.softmax_last(Tape::constant(Array::full({4}, 2.5)));
  for (int i = 0; i < 4; ++i) CHECK(out.a().at(i) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("softmax backward equals the diag(p) - p p^T Jacobian rule") {
  RngStream rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const int d = 2 + static_cast<int>(rng.index(6));
    Array logits = rng.normal_array({d}, 0.0, 3.0);
    Array seed = rng.normal_array({d});
    Tape t;
    Value x = t.leaf(logits);
    Value p = t.softmax_last(x);
    Array got = t.vjp(p, seed).wrt(x);
    // Explicit Jacobian-transpose-vector product from the forward probabilities.
    std::vector<double> want(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        const double jac =
            p.a().at(j) * ((i == j ? 1.0 : 0.0) - p.a().at(i));  // dp_j/dx_i
        want[static_cast<size_t>(i)] += jac * seed.at(j);
      }
    for (int i = 0; i < d; ++i)
      CHECK(std::fabs(got.at(i) - want[static_cast<size_t>(i)]) <= 1e-12);
  }
}

TEST_CASE("stop-gradient passes values and contributes exactly zero gradient") {
  RngStream rng(3);
  Array xa = rng.normal_array({2, 2});
  Tape t;
  Value x = t.leaf(xa);
  Value through = t.mul(x, Tape::stop_grad(x));  // d/dx (x * sg[x]) = sg[x]
  Value loss = t.sum(through);
  Array g = t.backward(loss).wrt(x);
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(g.at(i) == xa.at(i));

  // A fully detached branch gives bit-zero gradients.
  Tape t2;
  Value y = t2.leaf(xa);
  Value detached = t2.sum(t2.square(Tape::stop_grad(y)));
  Array gz = t2.backward(detached).wrt(y);
  for (int64_t i = 0; i < gz.numel(); ++i) CHECK(gz.at(i) == 0.0);
}

TEST_CASE("gradient of a constant-only computation is zero for unused leaves") {
  Tape t;
  Value unused = t.leaf(Array::full({3}, 1.0));
  Value out = t.sum(t.square(Tape::constant(Array::row({1.0, 2.0}))));
  Array g = t.backward(out).wrt(unused);
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(g.at(i) == 0.0);
}

TEST_CASE("sum of squares has gradient 2x") {
  RngStream rng(5);
  Array x = rng.normal_array({7});
  const double err = grad_check([](Tape& t, const Value& v) { return t.sum(t.square(v)); }, x);
  CHECK(err <= 1e-6);
}

TEST_CASE("softmax cross-entropy composite matches finite differences") {
  RngStream rng(13);
  Array x = rng.normal_array({6});
  Array target = rng.uniform_array({6}, 0.05, 1.0);
  double z = 0.0;
  for (double v : target.data) z += v;
  for (double& v : target.data) v /= z;
  const double err = grad_check(
      [&](Tape& t, const Value& v) {
        Value p = t.softmax_last(v);
        return t.neg(t.sum(t.mul(Tape::constant(target), t.log(p))));
      },
      x);
  CHECK(err <= 1e-4);
}

// Reduces a graph's output against a fixed tiny random readout so every
// output coordinate contributes to the checked scalar. The readout array is
// sampled once from the unperturbed output and held constant across the
// finite-difference perturbations; its scale keeps the loss near 1e-3 so
// central-difference rounding noise stays inside the checker tolerance at
// every gradient magnitude, including coordinates that cross zero.
static double readout_err(const std::function<Value(Tape&, const Value&)>& graph,
                          const Array& x, RngStream& rng) {
  Tape probe;
  const Value out0 = graph(probe, probe.leaf(x));
  Array w = rng.uniform_array(out0.shape(), 0.5, 1.5);
  w *= 2e-4 / (1.0 + out0.a().l2());
  const Value wv = Tape::constant(w);
  return grad_check(
      [&](Tape& t, const Value& v) { return t.sum(t.mul(graph(t, v), wv)); }, x);
}

// One gradient-check instance per op kind; the leaf kind has no backward rule.
// Inputs are packed into one flat leaf so every differentiable operand is
// covered, which also exercises slice and reshape on every instance.
static double op_instance_err(Op op, RngStream& rng) {
  const int m = 2 + static_cast<int>(rng.index(3));
  const int k = 2 + static_cast<int>(rng.index(3));
  const int n = 2 + static_cast<int>(rng.index(3));

  switch (op) {
    case Op::leaf:
      return 0.0;
    case Op::matmul: {
      Array flat = pack_flat({rng.normal_array({m, k}), rng.normal_array({k, n})});
      return readout_err(
          [&](Tape& t, const Value& v) {
            auto p = split_flat(t, v, {{m, k}, {k, n}});
            return t.matmul(p[0], p[1]);
          },
          flat, rng);
    }
    case Op::add:
    case Op::sub: {
      const bool broadcast = rng.index(2) == 0;
      Shape bshape = broadcast ? Shape{n} : Shape{m, n};
      Array flat = pack_flat({rng.normal_array({m, n}), rng.normal_array(bshape)});
      return readout_err(
          [&, bshape](Tape& t, const Value& v) {
            auto p = split_flat(t, v, {{m, n}, bshape});
            return t.forward(op, {p[0], p[1]});
          },
          flat, rng);
    }
    case Op::mul: {
      Array flat = pack_flat({rng.normal_array({m, n}), rng.normal_array({m, n})});
      return readout_err(
          [&](Tape& t, const Value& v) {
            auto p = split_flat(t, v, {{m, n}, {m, n}});
            return t.mul(p[0], p[1]);
          },
          flat, rng);
    }
    case Op::divide: {
      Array num = rng.normal_array({m, n});
      Array den({m, n});
      for (double& x : den.data) x = (rng.index(2) ? 1.0 : -1.0) * rng.uniform(0.5, 2.0);
      Array flat = pack_flat({num, den});
      return readout_err(
          [&](Tape& t, const Value& v) {
            auto p = split_flat(t, v, {{m, n}, {m, n}});
            return t.divide(p[0], p[1]);
          },
          flat, rng);
    }
    case Op::scale: {
      const double c = rng.uniform(-3.0, 3.0);
      return readout_err(
          [&](Tape& t, const Value& v) { return t.scale(v, c); },
          rng.normal_array({m, n}), rng);
    }
    case Op::tanh_op:
    case Op::sigmoid:
    case Op::exp_op:
    case Op::sin_op:
    case Op::cos_op:
    case Op::square:
    case Op::softplus:
    case Op::gelu:
      return readout_err(
          [&](Tape& t, const Value& v) { return t.forward(op, {v}); },
          rng.normal_array({m, n}), rng);
    case Op::relu:
      return readout_err([](Tape& t, const Value& v) { return t.relu(v); },
                         draw_away_array(rng, {m, n}, -2.0, 2.0, {0.0}), rng);
    case Op::log_op:
      return readout_err([](Tape& t, const Value& v) { return t.log(v); },
                         rng.uniform_array({m, n}, 0.2, 3.0), rng);
    case Op::clamp:
      return readout_err(
          [](Tape& t, const Value& v) { return t.clamp(v, -0.8, 0.8); },
          draw_away_array(rng, {m, n}, -2.0, 2.0, {-0.8, 0.8}), rng);
    case Op::softmax_last:
      return readout_err(
          [](Tape& t, const Value& v) { return t.softmax_last(v); },
          rng.normal_array({m, n}), rng);
    case Op::layer_norm: {
      Array flat = pack_flat({rng.normal_array({m, n}), rng.uniform_array({n}, 0.5, 1.5),
                              rng.normal_array({n})});
      return readout_err(
          [&](Tape& t, const Value& v) {
            auto p = split_flat(t, v, {{m, n}, {n}, {n}});
            return t.layer_norm(p[0], p[1], p[2]);
          },
          flat, rng);
    }
    case Op::sum_all:
      return grad_check([](Tape& t, const Value& v) { return t.sum(v); },
                        rng.normal_array({m, n}));
    case Op::mean_all:
      return grad_check([](Tape& t, const Value& v) { return t.mean(v); },
                        rng.normal_array({m, n}));
    case Op::concat: {
      const int axis = static_cast<int>(rng.index(2));
      Shape s2 = axis == 0 ? Shape{k, n} : Shape{m, k};
      Array flat = pack_flat({rng.normal_array({m, n}), rng.normal_array(s2)});
      return readout_err(
          [&, s2, axis](Tape& t, const Value& v) {
            auto p = split_flat(t, v, {{m, n}, s2});
            return t.concat({p[0], p[1]}, axis);
          },
          flat, rng);
    }
    case Op::slice_op: {
      const int axis = static_cast<int>(rng.index(2));
      const int extent = axis == 0 ? m : n;
      const int len = 1 + static_cast<int>(rng.index(extent));
      const int start = static_cast<int>(rng.index(extent - len + 1));
      return readout_err(
          [&](Tape& t, const Value& v) { return t.slice(v, axis, start, len); },
          rng.normal_array({m, n}), rng);
    }
    case Op::transpose:
      return readout_err([](Tape& t, const Value& v) { return t.transpose(v); },
                         rng.normal_array({m, n}), rng);
    case Op::reshape:
      return readout_err(
          [&](Tape& t, const Value& v) { return t.reshape(v, Shape{n, m}); },
          rng.normal_array({m, n}), rng);
  }
  return 1.0;
}

TEST_CASE("every op kind passes gradient checking on random instances") {
  int covered = 0;
  for (int code = 0; code < kOpCount; ++code) {
    const Op op = static_cast<Op>(code);
    if (op == Op::leaf) continue;
    RngStream rng(1000 + static_cast<uint64_t>(code));
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) worst = std::max(worst, op_instance_err(op, rng));
    INFO("op ", std::string(op_name(op)), " worst rel err ", worst);
    CHECK(worst <= 1e-5);
    ++covered;
  }
  CHECK(covered == kOpCount - 1);  // every kind except leaf
}

TEST_CASE("random composite graphs pass gradient checking") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    RngStream rng(40000 + seed);
    const int m = 2 + static_cast<int>(rng.index(3));
    const int k = 2 + static_cast<int>(rng.index(3));
    const int n = 2 + static_cast<int>(rng.index(3));
    const int variant = static_cast<int>(rng.index(4));
    Array wa = rng.normal_array({m, k});
    Array wb = rng.normal_array({k, n});
    Array bias = rng.normal_array({n});
    Array gamma = rng.uniform_array({k}, 0.5, 1.5);
    Array flat = pack_flat({wa, wb, bias});
    auto body = [&](Tape& t, const Value& v) -> Value {
      auto p = split_flat(t, v, {{m, k}, {k, n}, {n}});
      switch (variant) {
        case 0: {  // dense layer with tanh then softmax head
          Value h = t.tanh(t.add(t.matmul(p[0], p[1]), p[2]));
          return t.mean(t.square(t.softmax_last(h)));
        }
        case 1: {  // normalized trig chain
          Value ln = t.layer_norm(p[0], Tape::constant(gamma),
                                  Tape::constant(Array(Shape{k})));
          Value h = t.matmul(t.sin(ln), t.cos(p[1]));
          return t.sum(t.mul(h, t.sub(h, p[2])));
        }
        case 2: {  // concat/slice/transpose shuffle
          Value cat = t.concat({p[0], t.transpose(p[1])}, 0);
          Value cut = t.slice(cat, 0, 1, m);
          Value h = t.matmul(cut, p[1]);
          return t.mean(t.gelu(t.add(h, p[2])));
        }
        default: {  // gated rational with softplus and exp
          Value h = t.matmul(t.sigmoid(p[0]), t.softplus(p[1]));
          Value ratio =
              t.divide(h, t.add(t.square(h), Tape::constant(Array::full({m, n}, 1.0))));
          return t.add(t.sum(ratio), t.sum(t.exp(t.scale(p[2], 0.3))));
        }
      }
    };
    // Shrinking the loss by a constant sampled from the unperturbed value
    // keeps finite-difference noise inside tolerance without touching the
    // graph under test.
    Tape probe;
    const double scale = 2e-4 / (1.0 + std::abs(body(probe, probe.leaf(flat)).item()));
    const double err = grad_check(
        [&](Tape& t, const Value& v) { return t.scale(body(t, v), scale); }, flat);
    INFO("composite seed ", seed, " variant ", variant);
    CHECK(err <= 1e-5);
  }
}

TEST_CASE("backward is deterministic and tapes replay bit-identically") {
  RngStream rng(77);
  Array xa = rng.normal_array({4, 4});
  auto build = [&](Tape& t, const Value& x) {
    Value h = t.softmax_last(t.matmul(x, t.transpose(x)));
    return t.mean(t.mul(h, t.tanh(x)));
  };
  Tape t1;
  Value x1 = t1.leaf(xa);
  Array g1 = t1.backward(build(t1, x1)).wrt(x1);

  Tape t2;
  Value x2 = t2.leaf(xa);
  Array g2 = t2.backward(build(t2, x2)).wrt(x2);
  CHECK(bit_equal(g1, g2));

  // Clearing and rebuilding on the same tape object replays identically.
  t2.clear();
  CHECK(t2.size() == 0);
  Value x3 = t2.leaf(xa);
  Array g3 = t2.backward(build(t2, x3)).wrt(x3);
  CHECK(bit_equal(g1, g3));
}

TEST_CASE("repeated backward passes on one tape are independent") {
  Tape t;
  Value x = t.leaf(Array::row({1.0, 2.0, 3.0}));
  Value y = t.sum(t.square(x));
  Array g1 = t.backward(y).wrt(x);
  Array g2 = t.backward(y).wrt(x);
  CHECK(bit_equal(g1, g2));
  // Seeding a vjp from a different node shares no state with earlier passes.
  Value z = t.tanh(x);
  Array gz = t.vjp(z, Array::row({1.0, 0.0, 0.0})).wrt(x);
  CHECK(gz.at(1) == 0.0);
  CHECK(gz.at(2) == 0.0);
}

TEST_CASE("gradient of a node with respect to itself is the seed") {
  Tape t;
  Value x = t.leaf(Array::row({4.0, -2.0}));
  Array seed = Array::row({0.5, 3.0});
  Array g = t.vjp(x, seed).wrt(x);
  CHECK(bit_equal(g, seed));
}

TEST_CASE("shape errors carry the op name and the shapes") {
  Tape t;
  Value a = t.leaf(Array({2, 3}));
  Value b = t.leaf(Array({2, 3}));
  CHECK_THROWS_WITH_AS(t.matmul(a, b),
                       doctest::Contains("matmul"), std::invalid_argument);
  try {
    t.matmul(a, b);
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("[2, 3]") != std::string::npos);
  }
  CHECK_THROWS_AS(t.add(a, t.leaf(Array({3, 2}))), std::invalid_argument);
  CHECK_THROWS_AS(t.slice(a, 1, 2, 5), std::invalid_argument);
  CHECK_THROWS_AS(t.reshape(a, Shape{4, 4}), std::invalid_argument);
  CHECK_THROWS_AS(t.concat({a, t.leaf(Array({4, 4}))}, 0), std::invalid_argument);
}

TEST_CASE("backward rejects non-scalar outputs; vjp accepts them with a seed") {
  Tape t;
  Value x = t.leaf(Array({2, 2}));
  Value y = t.tanh(x);
  CHECK_THROWS_AS(t.backward(y), std::invalid_argument);
  CHECK_NOTHROW(t.vjp(y, Array({2, 2})));
  CHECK_THROWS_AS(t.backward(Tape::constant(Array::scalar(1.0))), std::invalid_argument);
}

TEST_CASE("sum and mean agree with hand values") {
  Tape t;
  Value x = Tape::constant(Array({2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK(t.sum(x).item() == 21.0);
  CHECK(t.mean(x).item() == 3.5);
}

TEST_CASE("concat, slice and transpose agree with hand values") {
  Tape t;
  Value a = Tape::constant(Array({2, 2}, {1, 2, 3, 4}));
  Value b = Tape::constant(Array({2, 1}, {5, 6}));
  Value cat = t.concat({a, b}, 1);
  CHECK(cat.a().shape == Shape{2, 3});
  CHECK(cat.a().at2(0, 2) == 5.0);
  CHECK(cat.a().at2(1, 2) == 6.0);
  Value cut = t.slice(cat, 1, 1, 2);
  CHECK(cut.a().at2(0, 0) == 2.0);
  CHECK(cut.a().at2(1, 1) == 6.0);
  Value tr = t.transpose(a);
  CHECK(tr.a().at2(0, 1) == 3.0);
  CHECK(tr.a().at2(1, 0) == 2.0);
}

TEST_CASE("bias broadcast adds per row and accumulates per column in backward") {
  Tape t;
  Value m = t.leaf(Array({2, 2}, {1, 2, 3, 4}));
  Value b = t.leaf(Array::row({10, 20}));
  Value out = t.add(m, b);
  CHECK(out.a().at2(0, 0) == 11.0);
  CHECK(out.a().at2(1, 1) == 24.0);
  Array gb = t.backward(t.sum(out)).wrt(b);
  CHECK(gb.at(0) == 2.0);  // column count of the matrix
  CHECK(gb.at(1) == 2.0);
}
