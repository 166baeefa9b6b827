#include "mbdl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mbdl/error.hpp"

namespace mbdl {

std::string shape_string(const Tensor::Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_size(const Tensor::Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor({}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

Tensor Tensor::zeros_like(const Tensor& other) { return Tensor(other.shape()); }

Tensor Tensor::from_external(Shape shape, std::vector<double> data) {
  Tensor out(std::move(shape), std::move(data));
  if (!out.all_finite()) throw ConfigError("tensor input contains NaN or Inf");
  return out;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) throw ShapeError("axis out of range for shape " + shape_string(shape_));
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 1;
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() < 2) return 1;
  return shape_[1];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::as_column() const {
  if (is_matrix()) return *this;
  if (is_vector()) return Tensor({shape_[0], 1}, data_);
  if (is_scalar()) return Tensor({1, 1}, data_);
  throw ShapeError("as_column on tensor of shape " + shape_string(shape_));
}

Tensor Tensor::slice(std::size_t i) const {
  if (shape_.empty() || i >= shape_[0]) throw ShapeError("slice index out of range for " + shape_string(shape_));
  Shape sub(shape_.begin() + 1, shape_.end());
  const std::size_t stride = shape_size(sub);
  return Tensor(std::move(sub),
                std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(i * stride),
                                    data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride)));
}

Tensor Tensor::column(std::size_t c) const {
  if (!is_matrix() || c >= cols()) throw ShapeError("column index out of range for " + shape_string(shape_));
  Tensor out({rows()});
  for (std::size_t r = 0; r < rows(); ++r) out[r] = (*this)(r, c);
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_same_shape(a, b, op);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool vec_rhs = b.is_vector();
  if (!a.is_matrix() || !(b.is_matrix() || vec_rhs)) {
    throw ShapeError("matmul needs matrix operands, got " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t kb = b.rows();
  const std::size_t n = vec_rhs ? 1 : b.cols();
  if (k != kb) {
    throw ShapeError("matmul inner extents differ: " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  Tensor out = vec_rhs ? Tensor({m}) : Tensor({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.is_vector()) return Tensor({1, a.size()}, a.values());
  if (!a.is_matrix()) throw ShapeError("transpose of " + shape_string(a.shape()));
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, "subtract", [](double x, double y) { return x - y; });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  return zip(a, b, "elementwise-multiply", [](double x, double y) { return x * y; });
}

Tensor scale(double factor, const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = factor * a[i];
  return out;
}

Tensor axpy(const Tensor& a, double factor, const Tensor& b) {
  return zip(a, b, "axpy", [factor](double x, double y) { return x + factor * y; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(double factor, const Tensor& a) { return scale(factor, a); }

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double squared_norm(const Tensor& a) { return dot(a, a); }
double norm(const Tensor& a) { return std::sqrt(squared_norm(a)); }

double l1_norm(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += std::abs(v);
  return acc;
}

double sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return acc;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor soft_threshold(const Tensor& x, double beta) {
  if (!(beta >= 0.0)) throw std::invalid_argument("soft_threshold: beta must be non-negative");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double mag = std::max(0.0, std::abs(x[i]) - beta);
    out[i] = mag == 0.0 ? 0.0 : std::copysign(mag, x[i]);
  }
  return out;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  Tensor::Shape shape = items.front().shape();
  std::vector<double> data;
  data.reserve(items.size() * items.front().size());
  for (const Tensor& t : items) {
    if (t.shape() != shape) throw ShapeError("stack: mixed shapes");
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  shape.insert(shape.begin(), items.size());
  return Tensor(std::move(shape), std::move(data));
}

Tensor concat_rows(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("concatenate of zero tensors");
  Tensor::Shape tail(items.front().shape().begin() + (items.front().rank() > 0 ? 1 : 0), items.front().shape().end());
  std::size_t rows = 0;
  std::vector<double> data;
  for (const Tensor& t : items) {
    if (t.rank() == 0) throw ShapeError("concatenate of scalars");
    Tensor::Shape t_tail(t.shape().begin() + 1, t.shape().end());
    if (t_tail != tail) {
      throw ShapeError("concatenate: trailing extents differ " + shape_string(items.front().shape()) + " vs " +
                       shape_string(t.shape()));
    }
    rows += t.shape()[0];
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  tail.insert(tail.begin(), rows);
  return Tensor(std::move(tail), std::move(data));
}

Cholesky::Cholesky(const Tensor& a) : n_(a.rows()), lower_({a.rows(), a.rows()}) {
  if (!a.is_matrix() || a.rows() != a.cols()) throw ShapeError("Cholesky of non-square " + shape_string(a.shape()));
  double scale_ref = 1.0;
  for (std::size_t i = 0; i < n_; ++i) scale_ref = std::max(scale_ref, std::abs(a(i, i)));
  for (std::size_t i = 0; i < n_; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(a(i, j) - a(j, i)) > kSymmetryTol * scale_ref) {
        throw NumericalError("matrix is not symmetric within tolerance");
      }
  for (std::size_t j = 0; j < n_; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= lower_(j, k) * lower_(j, k);
    if (!(d > kMinPivot)) {
      throw NumericalError("matrix is not positive definite (pivot " + std::to_string(d) + " at " +
                           std::to_string(j) + ")");
    }
    const double ljj = std::sqrt(d);
    lower_(j, j) = ljj;
    for (std::size_t i = j + 1; i < n_; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= lower_(i, k) * lower_(j, k);
      lower_(i, j) = s / ljj;
    }
  }
}

Tensor Cholesky::solve(const Tensor& b) const {
  if (b.rows() != n_ || !(b.is_vector() || b.is_matrix())) {
    throw ShapeError("spd solve: rhs " + shape_string(b.shape()) + " does not match factor of order " +
                     std::to_string(n_));
  }
  const std::size_t m = b.is_vector() ? 1 : b.cols();
  Tensor x = b;
  // forward: L y = b
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < n_; ++i) {
      double s = x[i * m + c];
      for (std::size_t k = 0; k < i; ++k) s -= lower_(i, k) * x[k * m + c];
      x[i * m + c] = s / lower_(i, i);
    }
    // backward: L^T x = y
    for (std::size_t ii = n_; ii-- > 0;) {
      double s = x[ii * m + c];
      for (std::size_t k = ii + 1; k < n_; ++k) s -= lower_(k, ii) * x[k * m + c];
      x[ii * m + c] = s / lower_(ii, ii);
    }
  }
  return x;
}

Tensor Cholesky::inverse() const { return solve(Tensor::identity(n_)); }

double Cholesky::log_det() const {
  double acc = 0.0;
  for (std::size_t i = 0; i < n_; ++i) acc += 2.0 * std::log(lower_(i, i));
  return acc;
}

Tensor solve_spd(const Tensor& a, const Tensor& b) { return Cholesky(a).solve(b); }

Tensor psd_factor(const Tensor& a, double tol) {
  if (!a.is_matrix() || a.rows() != a.cols()) throw ShapeError("psd_factor of non-square " + shape_string(a.shape()));
  const std::size_t n = a.rows();
  Tensor l({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (d <= tol) continue;
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

Tensor symmetrize(const Tensor& a) { return scale(0.5, add(a, transpose(a))); }

double spectral_norm(const Tensor& a, int iterations) {
  if (!a.is_matrix()) throw ShapeError("spectral_norm of " + shape_string(a.shape()));
  const std::size_t n = a.cols();
  Tensor v({n});
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
  v = scale(1.0 / norm(v), v);
  const Tensor at = transpose(a);
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    Tensor w = matmul(at, matmul(a, v));
    const double nw = norm(w);
    if (nw == 0.0) return 0.0;
    sigma = std::sqrt(nw);
    v = scale(1.0 / nw, w);
  }
  return sigma;
}

std::vector<double> symmetric_eigenvalues(const Tensor& a_in) {
  if (!a_in.is_matrix() || a_in.rows() != a_in.cols()) throw ShapeError("eigenvalues of non-square matrix");
  Tensor a = symmetrize(a_in);
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  std::sort(eig.begin(), eig.end());
  return eig;
}

}  // namespace mbdl
