#include "mbdl/sparse.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mbdl/error.hpp"
#include "mbdl/random.hpp"
#include "mbdl/tensor_io.hpp"

namespace mbdl {

namespace {

using Clock = std::chrono::steady_clock;

std::int64_t elapsed_ns(Clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count();
}

void check_measurement(const SparseProblem& p, const Tensor& x) {
  if (!x.is_vector() || x.size() != p.measurements()) {
    throw ShapeError("measurement " + shape_string(x.shape()) + " does not match operator " +
                     shape_string(p.H.shape()));
  }
}

}  // namespace

Tensor SparseProblem::effective_operator() const { return Psi ? matmul(H, *Psi) : H; }

Tensor SparseProblem::synthesize(const Tensor& r) const { return Psi ? matmul(*Psi, r) : r; }

void SparseProblem::validate() const {
  if (!H.is_matrix()) throw ShapeError("H must be a matrix, got " + shape_string(H.shape()));
  if (max_abs(H) == 0.0) throw std::invalid_argument("H must be nonzero");
  if (Psi && (Psi->shape() != Tensor::Shape{H.cols(), H.cols()})) {
    throw ShapeError("Psi " + shape_string(Psi->shape()) + " must be n x n for H " + shape_string(H.shape()));
  }
  if (!(rho >= 0.0)) throw std::invalid_argument("rho must be non-negative");
  if (!(sigma2 >= 0.0)) throw std::invalid_argument("sigma2 must be non-negative");
}

SparseProblem load_problem(const std::filesystem::path& descriptor) {
  std::ifstream in(descriptor);
  if (!in) throw ConfigError("cannot open problem descriptor " + descriptor.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("problem descriptor " + descriptor.string() + ": " + e.what());
  }
  const auto base = descriptor.parent_path();
  SparseProblem p;
  try {
    p.H = read_tensor(base / j.at("H").get<std::string>());
    const std::string psi = j.value("Psi", std::string("identity"));
    if (psi != "identity") p.Psi = read_tensor(base / psi);
    p.rho = j.at("rho").get<double>();
    p.sigma2 = j.value("sigma2", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("problem descriptor " + descriptor.string() + ": " + e.what());
  }
  p.validate();
  return p;
}

void save_problem(const std::filesystem::path& descriptor, const SparseProblem& p) {
  const auto base = descriptor.parent_path();
  const std::string stem = descriptor.stem().string();
  nlohmann::json j;
  j["H"] = stem + "_H.bin";
  write_tensor(base / (stem + "_H.bin"), p.H);
  if (p.Psi) {
    j["Psi"] = stem + "_Psi.bin";
    write_tensor(base / (stem + "_Psi.bin"), *p.Psi);
  } else {
    j["Psi"] = "identity";
  }
  j["rho"] = p.rho;
  j["sigma2"] = p.sigma2;
  std::ofstream out(descriptor);
  if (!out) throw ConfigError("cannot write " + descriptor.string());
  out << j.dump(2) << '\n';
}

void AdmmHyper::validate() const {
  if (!(lambda > 0.0)) throw std::invalid_argument("ADMM lambda must be positive");
  if (!(mu > 0.0)) throw std::invalid_argument("ADMM mu must be positive");
  if (max_iter <= 0) throw std::invalid_argument("ADMM max_iter must be positive");
  if (!(tol >= 0.0)) throw std::invalid_argument("ADMM tol must be non-negative");
}

Tensor l1_prior_prox(const Tensor& v, double weight) { return soft_threshold(v, weight); }

Prior l1_prior(double rho) {
  return Prior{"l1", [rho](const Tensor& v, double weight) { return soft_threshold(v, rho * weight); },
               [rho](const Tensor& s) { return rho * l1_norm(s); }};
}

double lasso_objective(const SparseProblem& p, const Tensor& x, const Tensor& r) {
  check_measurement(p, x);
  if (!r.is_vector() || r.size() != p.dim()) {
    throw ShapeError("coefficients " + shape_string(r.shape()) + " do not match operator " + shape_string(p.H.shape()));
  }
  const Tensor resid = x - matmul(p.effective_operator(), r);
  return 0.5 * squared_norm(resid) + p.rho * l1_norm(r);
}

double default_step(const SparseProblem& p) {
  const double sigma = spectral_norm(p.effective_operator(), 100);
  return 0.9 / (sigma * sigma);
}

namespace {

SolverResult proximal_gradient(const SparseProblem& p, const Tensor& x, double mu, int iterations,
                               const SolverOptions& opts, bool accelerate) {
  p.validate();
  check_measurement(p, x);
  if (!(mu > 0.0)) throw std::invalid_argument("step size mu must be positive");
  if (iterations < 0) throw std::invalid_argument("iteration count must be non-negative");
  const Tensor a = p.effective_operator();
  const Tensor at = transpose(a);
  const auto start = Clock::now();

  SolverResult res;
  Tensor r({p.dim()});
  Tensor y = r;  // extrapolated point for FISTA
  double t = 1.0;
  auto objective = [&](const Tensor& v) { return 0.5 * squared_norm(x - matmul(a, v)) + p.rho * l1_norm(v); };
  if (opts.record_trace) res.trace.push_back({0, objective(r), 0.0, elapsed_ns(start)});
  for (int k = 0; k < iterations; ++k) {
    const Tensor& base = accelerate ? y : r;
    Tensor next = soft_threshold(axpy(base, mu, matmul(at, x - matmul(a, base))), mu * p.rho);
    const double change = norm(next - r);
    if (accelerate) {
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      y = axpy(next, (t - 1.0) / t_next, next - r);
      t = t_next;
    }
    r = std::move(next);
    res.final_residual = change;
    if (opts.record_trace) res.trace.push_back({k + 1, objective(r), change, elapsed_ns(start)});
  }
  res.iterations = iterations;
  res.converged = true;
  res.signal = p.synthesize(r);
  res.coefficients = std::move(r);
  return res;
}

}  // namespace

SolverResult ista(const SparseProblem& p, const Tensor& x, double mu, int iterations, const SolverOptions& opts) {
  return proximal_gradient(p, x, mu, iterations, opts, false);
}

SolverResult fista(const SparseProblem& p, const Tensor& x, double mu, int iterations, const SolverOptions& opts) {
  return proximal_gradient(p, x, mu, iterations, opts, true);
}

SolverResult admm_with(const SparseProblem& p, const Tensor& x, const AdmmHyper& hyper, const VUpdate& v_update,
                       const std::function<double(const Tensor&)>& objective, const SolverOptions& opts) {
  p.validate();
  hyper.validate();
  check_measurement(p, x);
  const Tensor a = p.effective_operator();
  const Tensor at = transpose(a);
  const std::size_t n = p.dim();
  const double two_lambda = 2.0 * hyper.lambda;
  const auto start = Clock::now();

  Tensor gram = matmul(at, a);
  for (std::size_t i = 0; i < n; ++i) gram(i, i) += two_lambda;
  // Positive definite for any lambda > 0; a failure here means non-finite input.
  const Cholesky factor(gram);
  const Tensor atx = matmul(at, x);

  Tensor u({n});
  Tensor v({n});
  if (opts.init_seed) {
    Rng rng(*opts.init_seed);
    u = rng.normal_tensor({n});
    v = rng.normal_tensor({n});
  }
  Tensor s({n});

  SolverResult res;
  int k = 0;
  while (k < hyper.max_iter) {
    s = factor.solve(axpy(atx, two_lambda, v - u));
    Tensor v_next = v_update(s + u, k);
    if (v_next.shape() != s.shape()) throw ShapeError("v-update changed the iterate shape");
    u = axpy(u, hyper.mu, s - v_next);
    const double change = norm(v_next - v);
    v = std::move(v_next);
    ++k;
    const double residual = std::max(norm(s - v), change);
    res.final_residual = residual;
    if (!std::isfinite(residual)) throw NumericalError("ADMM iterates became non-finite at iteration " + std::to_string(k));
    if (opts.record_trace) res.trace.push_back({k, objective ? objective(s) : 0.0, residual, elapsed_ns(start)});
    if (residual <= hyper.tol) {
      res.converged = true;
      break;
    }
  }
  res.iterations = k;
  res.signal = p.synthesize(s);
  res.coefficients = std::move(s);
  return res;
}

SolverResult admm(const SparseProblem& p, const Tensor& x, const AdmmHyper& hyper, const Prior& prior,
                  const SolverOptions& opts) {
  if (!prior.prox) throw std::invalid_argument("prior has no proximal map");
  const double weight = 1.0 / (2.0 * hyper.lambda);
  const Tensor a = p.effective_operator();
  auto objective = [&](const Tensor& r) {
    const double fit = 0.5 * squared_norm(x - matmul(a, r));
    return prior.value ? fit + prior.value(r) : fit;
  };
  return admm_with(
      p, x, hyper, [&](const Tensor& w, int) { return prior.prox(w, weight); }, objective, opts);
}

SolverResult admm(const SparseProblem& p, const Tensor& x, const AdmmHyper& hyper, const SolverOptions& opts) {
  return admm(p, x, hyper, l1_prior(p.rho), opts);
}

}  // namespace mbdl
