#pragma once
// Reference computations used only to check the library. Nothing here calls
// into the solver code it verifies.

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "mbdl/tensor.hpp"

namespace mbdl::oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_rows(const Tensor& t) {
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.data()[i * t.cols() + j];
  return m;
}

inline Tensor from_rows(const Matrix& m) {
  Tensor t({m.size(), m.empty() ? 0 : m[0].size()});
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) t(i, j) = m[i][j];
  return t;
}

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor out({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a.data()[i * a.cols() + k] * b.data()[k * b.cols() + j];
      out(i, j) = acc;
    }
  return out;
}

/// Gauss-Jordan inverse with partial pivoting.
inline Tensor gauss_jordan_inverse(const Tensor& a) {
  const std::size_t n = a.rows();
  Matrix m = to_rows(a);
  for (std::size_t i = 0; i < n; ++i) {
    m[i].resize(2 * n, 0.0);
    m[i][n + i] = 1.0;
  }
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
    if (m[piv][c] == 0.0) throw std::runtime_error("singular");
    std::swap(m[c], m[piv]);
    const double d = m[c][c];
    for (double& v : m[c]) v /= d;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = m[r][c];
      if (f == 0.0) continue;
      for (std::size_t k = 0; k < 2 * n; ++k) m[r][k] -= f * m[c][k];
    }
  }
  Tensor inv({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) inv(i, j) = m[i][n + j];
  return inv;
}

/// Central differences of a scalar function of one tensor argument.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// max |a - b| / max(1, max|b|): relative error with an absolute floor for tiny gradients.
inline double relative_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0;
  double ref = 1.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    ref = std::max(ref, std::abs(b[i]));
  }
  return diff / ref;
}

/// Cyclic coordinate descent for 0.5||x - H s||^2 + rho ||s||_1, run to a tight fixed point.
inline std::vector<double> lasso_coordinate_descent(const Tensor& h, const Tensor& x, double rho,
                                                    int max_sweeps = 200000, double tol = 1e-15) {
  const std::size_t m = h.rows();
  const std::size_t n = h.cols();
  std::vector<double> s(n, 0.0);
  std::vector<double> resid(x.data().begin(), x.data().end());
  std::vector<double> col_sq(n, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < m; ++i) col_sq[j] += h(i, j) * h(i, j);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double max_change = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (col_sq[j] == 0.0) continue;
      double corr = 0.0;
      for (std::size_t i = 0; i < m; ++i) corr += h(i, j) * resid[i];
      const double z = s[j] + corr / col_sq[j];
      const double thr = rho / col_sq[j];
      const double updated = z > thr ? z - thr : (z < -thr ? z + thr : 0.0);
      const double delta = updated - s[j];
      if (delta != 0.0) {
        for (std::size_t i = 0; i < m; ++i) resid[i] -= h(i, j) * delta;
        s[j] = updated;
        max_change = std::max(max_change, std::abs(delta));
      }
    }
    if (max_change < tol) break;
  }
  return s;
}

/// 0.5||x - H s||^2 + rho ||s||_1 written out element by element.
inline double lasso_value(const Tensor& h, const Tensor& x, const std::vector<double>& s, double rho) {
  double fit = 0.0;
  for (std::size_t i = 0; i < h.rows(); ++i) {
    double r = x[i];
    for (std::size_t j = 0; j < h.cols(); ++j) r -= h(i, j) * s[j];
    fit += r * r;
  }
  double l1 = 0.0;
  for (double v : s) l1 += std::abs(v);
  return 0.5 * fit + rho * l1;
}

/// Scalar backward Riccati recursion run for `steps` steps; returns the gain of the last step.
inline double scalar_lqr_gain(double a, double b, double q, double r, int steps) {
  double P = q, k = 0.0;
  for (int i = 0; i < steps; ++i) {
    k = a * b * P / (r + b * b * P);
    P = q + a * a * P - (a * b * P) * (a * b * P) / (r + b * b * P);
  }
  return k;
}

// Lorenz flow (sigma 10, rho 28, beta 8/3) by classical RK4 with `steps` substeps.
inline std::vector<double> lorenz_flow(std::vector<double> z, double dt, int steps) {
  auto f = [](const std::vector<double>& u) {
    return std::vector<double>{10.0 * (u[1] - u[0]), u[0] * (28.0 - u[2]) - u[1], u[0] * u[1] - 8.0 / 3.0 * u[2]};
  };
  const double h = dt / steps;
  for (int s = 0; s < steps; ++s) {
    auto shifted = [&](const std::vector<double>& k, double c) {
      return std::vector<double>{z[0] + c * k[0], z[1] + c * k[1], z[2] + c * k[2]};
    };
    const auto k1 = f(z);
    const auto k2 = f(shifted(k1, h / 2));
    const auto k3 = f(shifted(k2, h / 2));
    const auto k4 = f(shifted(k3, h));
    for (int i = 0; i < 3; ++i) z[i] += h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
  }
  return z;
}

/// argmin_z 0.5||x - H G z||^2 + lambda ||z||^2 by the normal equations.
inline Tensor ridge_latent(const Tensor& G, const Tensor& H, const Tensor& x, double lambda) {
  const Tensor A = naive_matmul(H, G);
  Tensor gram({A.cols(), A.cols()});
  Tensor rhs({A.cols(), 1});
  for (std::size_t i = 0; i < A.cols(); ++i) {
    for (std::size_t j = 0; j < A.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < A.rows(); ++r) acc += A(r, i) * A(r, j);
      gram(i, j) = acc + (i == j ? 2.0 * lambda : 0.0);
    }
    double acc = 0.0;
    for (std::size_t r = 0; r < A.rows(); ++r) acc += A(r, i) * x[r];
    rhs(i, 0) = acc;
  }
  const Tensor z = naive_matmul(gauss_jordan_inverse(gram), rhs);
  return z.reshaped({A.cols()});
}

}  // namespace mbdl::oracle
