#pragma once

#include <functional>

#include "awmlab/array.hpp"
#include "awmlab/tape.hpp"

namespace awmlab {

/// Builds a scalar-valued computation from one tracked input. The function must
/// be deterministic: it is re-run many times during checking.
using ScalarFn = std::function<Value(Tape&, const Value& x)>;

/// Compares reverse-mode gradients of f at x against central finite
/// differences with step eps. Returns the max over coordinates of
///   |analytic - numeric| / (|analytic| + 1e-8).
double grad_check(const ScalarFn& f, const Array& x, double eps = 1e-5);

/// grad_check restricted to max_coords coordinates sampled without
/// replacement (all coordinates when x has at most max_coords elements).
/// The analytic gradient is still the full reverse-mode pass.
double grad_check_sampled(const ScalarFn& f, const Array& x, int64_t max_coords,
                          RngStream& rng, double eps = 1e-5);

/// Splits a flat rank-1 leaf into tape values of the given shapes (slice +
/// reshape), so multi-parameter functions can be gradient-checked through a
/// single input vector.
std::vector<Value> split_flat(Tape& t, const Value& flat, const std::vector<Shape>& shapes);

/// Packs arrays into one flat rank-1 array, matching split_flat's layout.
Array pack_flat(const std::vector<Array>& parts);

}  // namespace awmlab
