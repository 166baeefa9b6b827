#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mbdl {

/// Dense row-major array of doubles. An empty shape is a scalar.
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);
  static Tensor zeros_like(const Tensor& other);
  /// Same as the shape/data constructor but rejects NaN and Inf.
  static Tensor from_external(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return shape_.empty(); }
  bool is_vector() const { return shape_.size() == 1; }
  bool is_matrix() const { return shape_.size() == 2; }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  /// Value of a single-element tensor of any rank.
  double item() const;

  Tensor reshaped(Shape shape) const;
  /// View a vector as an n x 1 matrix; matrices pass through.
  Tensor as_column() const;
  /// Row i of a rank >= 2 tensor, dropping the leading axis.
  Tensor slice(std::size_t i) const;
  Tensor column(std::size_t c) const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::string shape_string(const Tensor::Shape& shape);
std::size_t shape_size(const Tensor::Shape& shape);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(double factor, const Tensor& a);
/// a + factor * b
Tensor axpy(const Tensor& a, double factor, const Tensor& b);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double factor, const Tensor& a);

double dot(const Tensor& a, const Tensor& b);
double squared_norm(const Tensor& a);
double norm(const Tensor& a);
double l1_norm(const Tensor& a);
double sum(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Elementwise sign(x) * max(0, |x| - beta). Exactly zero at |x| == beta.
Tensor soft_threshold(const Tensor& x, double beta);

/// Stack same-shape tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);
/// Concatenate along axis 0.
Tensor concat_rows(std::span<const Tensor> items);

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Construct once, reuse across many right-hand sides.
class Cholesky {
 public:
  static constexpr double kMinPivot = 1e-12;
  static constexpr double kSymmetryTol = 1e-10;

  explicit Cholesky(const Tensor& a);

  std::size_t dim() const { return n_; }
  const Tensor& factor() const { return lower_; }
  /// Solves a x = b for a vector or an n x m matrix b.
  Tensor solve(const Tensor& b) const;
  Tensor inverse() const;
  double log_det() const;

 private:
  std::size_t n_;
  Tensor lower_;
};

Tensor solve_spd(const Tensor& a, const Tensor& b);

/// Lower factor L with L L^T = a for symmetric PSD a; zero pivots produce zero columns.
Tensor psd_factor(const Tensor& a, double tol = 1e-14);

Tensor symmetrize(const Tensor& a);

/// Largest singular value by power iteration on a^T a.
double spectral_norm(const Tensor& a, int iterations = 100);

/// Symmetric eigenvalues by cyclic Jacobi rotations, ascending.
std::vector<double> symmetric_eigenvalues(const Tensor& a);

}  // namespace mbdl
