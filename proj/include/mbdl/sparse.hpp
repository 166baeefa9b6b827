#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mbdl/tensor.hpp"

namespace mbdl {

/// Linear measurement model x = H Psi r + w with an l1 weight on r.
struct SparseProblem {
  Tensor H;                   // m x n measurement operator
  std::optional<Tensor> Psi;  // n x n dictionary; identity when absent
  double rho = 0.0;           // sparsity weight
  double sigma2 = 0.0;        // noise variance, informational

  std::size_t measurements() const { return H.rows(); }
  std::size_t dim() const { return H.cols(); }
  /// H Psi, the operator acting on the sparse coefficients.
  Tensor effective_operator() const;
  /// Coefficients r to signal s = Psi r.
  Tensor synthesize(const Tensor& r) const;
  void validate() const;
};

/// Load {"H": path, "Psi": path | "identity", "rho": x, "sigma2": y}; paths
/// are resolved relative to `base`.
SparseProblem load_problem(const std::filesystem::path& descriptor);
void save_problem(const std::filesystem::path& descriptor, const SparseProblem& p);

struct AdmmHyper {
  double lambda = 1.0;
  double mu = 1.0;
  int max_iter = 5000;
  double tol = 1e-8;

  void validate() const;
};

/// Regularizer phi through its proximal map: prox(v, w) = argmin_z w*phi(z) + 0.5||z - v||^2.
struct Prior {
  std::string name;
  std::function<Tensor(const Tensor& v, double weight)> prox;
  std::function<double(const Tensor& s)> value;  // may be empty
};

/// prox of weight*||.||_1, i.e. soft thresholding at `weight`.
Tensor l1_prior_prox(const Tensor& v, double weight);
/// phi = rho ||.||_1.
Prior l1_prior(double rho);

struct IterationRecord {
  int iter = 0;
  double objective = 0.0;
  double residual = 0.0;
  std::int64_t wall_ns = 0;
};

struct SolverOptions {
  bool record_trace = false;
  /// Randomized u0, v0 for ADMM when set; zeros otherwise.
  std::optional<std::uint64_t> init_seed;
};

struct SolverResult {
  Tensor coefficients;  // r
  Tensor signal;        // s = Psi r
  int iterations = 0;
  bool converged = false;
  double final_residual = 0.0;
  std::vector<IterationRecord> trace;
};

/// 0.5||x - H Psi r||^2 + rho ||r||_1.
double lasso_objective(const SparseProblem& p, const Tensor& x, const Tensor& r);

/// Default step 0.9 / sigma_max(H Psi)^2.
double default_step(const SparseProblem& p);

/// Proximal gradient: r_{k+1} = T_{mu rho}(r_k + mu A^T (x - A r_k)), r_0 = 0.
SolverResult ista(const SparseProblem& p, const Tensor& x, double mu, int iterations, const SolverOptions& opts = {});

/// ISTA with Nesterov momentum, t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2.
SolverResult fista(const SparseProblem& p, const Tensor& x, double mu, int iterations, const SolverOptions& opts = {});

/// Scaled-form ADMM splitting s = v:
///   s+ = (A^T A + 2 lambda I)^{-1} (A^T x + 2 lambda (v - u))
///   v+ = prox_{phi / (2 lambda)}(s+ + u)
///   u+ = u + mu (s+ - v+)
/// Stops when max(||s - v||, ||v - v_prev||) <= tol or after max_iter.
SolverResult admm(const SparseProblem& p, const Tensor& x, const AdmmHyper& hyper, const Prior& prior,
                  const SolverOptions& opts = {});
/// ADMM with the l1 prior at the problem's rho.
SolverResult admm(const SparseProblem& p, const Tensor& x, const AdmmHyper& hyper, const SolverOptions& opts = {});

/// Generic ADMM loop with a caller-supplied v-update; shared with plug-and-play.
using VUpdate = std::function<Tensor(const Tensor& s_plus_u, int k)>;
SolverResult admm_with(const SparseProblem& p, const Tensor& x, const AdmmHyper& hyper, const VUpdate& v_update,
                       const std::function<double(const Tensor&)>& objective, const SolverOptions& opts);

}  // namespace mbdl
