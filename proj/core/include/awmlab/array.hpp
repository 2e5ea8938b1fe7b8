#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace awmlab {

/// Row-major dense shape. Rank 0 (empty shape) is a scalar with one element.
using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shape_eq(const Shape& a, const Shape& b);

/// Dense row-major array of 64-bit floats. All tape values are Arrays; there is
/// no other element type anywhere in the library.
struct Array {
  Shape shape;
  std::vector<double> data;

  Array() = default;
  explicit Array(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}
  Array(Shape s, std::vector<double> d);

  static Array scalar(double v);
  static Array zeros(Shape s) { return Array(std::move(s)); }
  static Array full(Shape s, double v);
  /// 1-D array from an initializer-style vector.
  static Array row(std::vector<double> d);

  int rank() const { return static_cast<int>(shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  /// Rank-2 accessors; rank-1 counts as a single row.
  int rows() const;
  int cols() const;
  double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return data[static_cast<size_t>(i)]; }
  double& at2(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  double at2(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }
  /// Sole element of a one-element array; throws otherwise.
  double item() const;

  double l2() const;
  double max_abs() const;
  bool all_finite() const;

  Array& operator+=(const Array& o);
  Array& operator*=(double c);
};

/// Deterministic stream: a seeded mt19937_64 plus draw helpers. Every random
/// draw in the library goes through one of these; streams for sub-components
/// are derived, never shared.
struct RngStream {
  std::mt19937_64 eng;

  explicit RngStream(uint64_t seed) : eng(seed) {}
  double uniform(double lo, double hi);
  double normal(double mean = 0.0, double stddev = 1.0);
  int64_t index(int64_t n);  // uniform in [0, n)
  Array uniform_array(Shape s, double lo, double hi);
  Array normal_array(Shape s, double mean = 0.0, double stddev = 1.0);
};

/// Splits a master seed into a named sub-stream (splitmix64 over seed and a
/// stream id), so adding a consumer never perturbs existing streams.
uint64_t derive_seed(uint64_t master, uint64_t stream);

/// Largest singular value of a rank-1 or rank-2 array (operator 2-norm).
double spectral_norm(const Array& a);

}  // namespace awmlab
