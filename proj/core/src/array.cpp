#include "awmlab/array.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace awmlab {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

Array::Array(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape))
    throw std::invalid_argument("array data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
}

Array Array::scalar(double v) {
  Array a{Shape{}};
  a.data[0] = v;
  return a;
}

Array Array::full(Shape s, double v) {
  Array a(std::move(s));
  for (double& x : a.data) x = v;
  return a;
}

Array Array::row(std::vector<double> d) {
  Shape s{static_cast<int>(d.size())};
  return Array(std::move(s), std::move(d));
}

int Array::rows() const {
  if (rank() == 2) return shape[0];
  if (rank() <= 1) return 1;
  throw std::invalid_argument("rows() on rank-" + std::to_string(rank()) + " array");
}

int Array::cols() const {
  if (rank() == 2) return shape[1];
  if (rank() == 1) return shape[0];
  if (rank() == 0) return 1;
  throw std::invalid_argument("cols() on rank-" + std::to_string(rank()) + " array");
}

double Array::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item() on array of shape " + shape_str(shape));
  return data[0];
}

double Array::l2() const {
  double s = 0.0;
  for (double x : data) s += x * x;
  return std::sqrt(s);
}

double Array::max_abs() const {
  double m = 0.0;
  for (double x : data) m = std::max(m, std::fabs(x));
  return m;
}

bool Array::all_finite() const {
  for (double x : data)
    if (!std::isfinite(x)) return false;
  return true;
}

Array& Array::operator+=(const Array& o) {
  if (!shape_eq(shape, o.shape))
    throw std::invalid_argument("+= shape mismatch " + shape_str(shape) + " vs " + shape_str(o.shape));
  for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
  return *this;
}

Array& Array::operator*=(double c) {
  for (double& x : data) x *= c;
  return *this;
}

double RngStream::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(eng);
}

double RngStream::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(eng);
}

int64_t RngStream::index(int64_t n) {
  return std::uniform_int_distribution<int64_t>(0, n - 1)(eng);
}

Array RngStream::uniform_array(Shape s, double lo, double hi) {
  Array a(std::move(s));
  for (double& x : a.data) x = uniform(lo, hi);
  return a;
}

Array RngStream::normal_array(Shape s, double mean, double stddev) {
  Array a(std::move(s));
  for (double& x : a.data) x = normal(mean, stddev);
  return a;
}

static uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t master, uint64_t stream) {
  return splitmix64(splitmix64(master) ^ splitmix64(stream * 0x2545f4914f6cdd1dull + 1));
}

double spectral_norm(const Array& a) {
  if (a.rank() > 2) throw std::invalid_argument("spectral_norm: rank > 2: " + shape_str(a.shape));
  if (a.numel() == 0) return 0.0;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      a.data.data(), a.rows(), a.cols());
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

}  // namespace awmlab
