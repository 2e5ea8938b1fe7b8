#include "awmlab/grad_check.hpp"

#include <cmath>
#include <stdexcept>

namespace awmlab {

static double check_coords(const ScalarFn& f, const Array& x,
                           const std::vector<int64_t>& coords, double eps) {
  Array analytic;
  {
    Tape t;
    Value vx = t.leaf(x);
    Value y = f(t, vx);
    if (y.a().numel() != 1)
      throw std::invalid_argument("grad_check: f must return a scalar, got " +
                                  shape_str(y.shape()));
    analytic = t.backward(y).wrt(vx);
  }

  auto eval = [&](const Array& xp) {
    Tape t;
    return f(t, t.leaf(xp)).a().item();
  };

  double worst = 0.0;
  Array xp = x;
  for (int64_t i : coords) {
    const double xi = x.at(i);
    xp.at(i) = xi + eps;
    const double up = eval(xp);
    xp.at(i) = xi - eps;
    const double dn = eval(xp);
    xp.at(i) = xi;
    const double numeric = (up - dn) / (2.0 * eps);
    const double err = std::fabs(analytic.at(i) - numeric) / (std::fabs(analytic.at(i)) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

double grad_check(const ScalarFn& f, const Array& x, double eps) {
  std::vector<int64_t> coords(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) coords[static_cast<size_t>(i)] = i;
  return check_coords(f, x, coords, eps);
}

double grad_check_sampled(const ScalarFn& f, const Array& x, int64_t max_coords,
                          RngStream& rng, double eps) {
  if (x.numel() <= max_coords) return grad_check(f, x, eps);
  // Partial Fisher-Yates: the first max_coords entries form a uniform sample
  // without replacement.
  std::vector<int64_t> coords(static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) coords[static_cast<size_t>(i)] = i;
  for (int64_t i = 0; i < max_coords; ++i) {
    const int64_t j = i + rng.index(x.numel() - i);
    std::swap(coords[static_cast<size_t>(i)], coords[static_cast<size_t>(j)]);
  }
  coords.resize(static_cast<size_t>(max_coords));
  return check_coords(f, x, coords, eps);
}

std::vector<Value> split_flat(Tape& t, const Value& flat, const std::vector<Shape>& shapes) {
  if (flat.a().rank() != 1)
    throw std::invalid_argument("split_flat: input must be rank-1, got " +
                                shape_str(flat.shape()));
  std::vector<Value> out;
  out.reserve(shapes.size());
  int off = 0;
  for (const Shape& s : shapes) {
    const int len = static_cast<int>(shape_numel(s));
    out.push_back(t.reshape(t.slice(flat, 0, off, len), s));
    off += len;
  }
  if (off != flat.a().numel())
    throw std::invalid_argument("split_flat: shapes cover " + std::to_string(off) +
                                " of " + std::to_string(flat.a().numel()) + " elements");
  return out;
}

Array pack_flat(const std::vector<Array>& parts) {
  int64_t n = 0;
  for (const Array& p : parts) n += p.numel();
  Array flat(Shape{static_cast<int>(n)});
  int64_t off = 0;
  for (const Array& p : parts) {
    std::copy(p.data.begin(), p.data.end(), flat.data.begin() + off);
    off += p.numel();
  }
  return flat;
}

}  // namespace awmlab
