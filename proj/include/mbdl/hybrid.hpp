#pragma once

#include <filesystem>
#include <cstdint>
#include <functional>
#include <optional>

#include "mbdl/nn.hpp"
#include "mbdl/sparse.hpp"
#include "mbdl/train.hpp"

namespace mbdl {

enum class DenoiserKind { shrinkage, learned_mlp, external };

/// denoise(v, alpha) with alpha the noise level (the threshold for shrinkage).
struct Denoiser {
  DenoiserKind kind = DenoiserKind::shrinkage;
  Mlp net;  // learned_mlp: v + net([v; alpha])
  std::function<Tensor(const Tensor& v, double alpha)> external;

  static Denoiser shrinkage();
  static Denoiser learned(Mlp net);
  static Denoiser from_function(std::function<Tensor(const Tensor&, double)> fn);

  Tensor denoise(const Tensor& v, double alpha) const;
  /// Batched: columns of v [n x B], one alpha per column.
  Tensor denoise_columns(const Tensor& v, std::span<const double> alpha) const;
};

std::string denoiser_kind_name(DenoiserKind k);

struct AlphaSchedule {
  enum class Kind { constant, geometric };
  Kind kind = Kind::constant;
  std::optional<double> alpha0;  // defaults to rho / (2 lambda)
  double decay = 0.97;

  double at(int k, double rho, double lambda) const;
};

/// ADMM with the prox step replaced by the denoiser. Weights are never updated.
SolverResult pnp_admm(const SparseProblem& p, const Tensor& x, const AdmmHyper& hyper, const Denoiser& denoiser,
                      const AlphaSchedule& schedule = {}, const SolverOptions& opts = {});

struct DenoiserTraining {
  std::vector<std::size_t> hidden{128, 128};
  double sigma_min = 0.0;
  double sigma_max = 0.5;
  std::size_t copies = 4;  // noisy copies per clean signal
  std::uint64_t seed = 0;
};

struct DenoiserFit {
  Denoiser denoiser;
  TrainResult report;
};

/// Noisy copies of the clean signals (rows of `clean`) at noise levels drawn
/// uniformly from [sigma_min, sigma_max]; the MLP learns the residual.
DenoiserFit train_denoiser(const Tensor& clean, const DenoiserTraining& setup, const TrainConfig& config);
/// Initial network of train_denoiser, output layer near zero.
Denoiser initial_denoiser(std::size_t n, const DenoiserTraining& setup);

/// 10 log10(peak^2 / mse) with the peak taken from `clean`.
double psnr(const Tensor& clean, const Tensor& estimate);

enum class GeneratorKind { linear, mlp };

/// s = G z (linear) or s = net(z).
struct Generator {
  GeneratorKind kind = GeneratorKind::linear;
  Tensor G;  // [n x d]
  Mlp net;

  static Generator linear(Tensor G);
  static Generator decoder(Mlp net);

  std::size_t latent_dim() const;
  std::size_t output_dim() const;
  Tensor generate(const Tensor& z) const;
  /// Weights enter as constants.
  ad::Var generate(ad::Tape& tape, const ad::Var& z) const;
};

/// s = A2 tanh(A1 z), z ~ N(0, I_d): signals on a d-dimensional manifold, rows [N x n].
Tensor gen_manifold_signals(std::size_t n, std::size_t latent, std::size_t count, std::uint64_t seed);

struct GeneratorFit {
  Generator generator;
  Mlp encoder;
  TrainResult report;
};

/// Autoencoder on rows of `signals`; encoder n -> hidden -> d, decoder d -> hidden -> n.
GeneratorFit train_generator(const Tensor& signals, std::size_t latent, std::size_t hidden, const TrainConfig& config);

struct InversionOptions {
  int max_steps = 5000;
  double initial_step = 1.0;
  double armijo = 1e-4;
  double grad_tol = 1e-10;
  int restarts = 0;  // extra seeded Gaussian starts, best objective kept
  std::uint64_t seed = 0;
};

struct InversionResult {
  Tensor z;
  Tensor signal;
  double objective = 0.0;
  int steps = 0;
  std::vector<double> trace;  // objective per accepted step, starting at z0
  std::vector<double> grad_norm;
  std::vector<std::int64_t> wall_ns;  // since the start of the winning run
};

/// 0.5 ||x - H G(z)||^2 + lambda ||z||^2
double deep_prior_objective(const Generator& g, const Tensor& H, const Tensor& x, double lambda, const Tensor& z,
                            Tensor* grad = nullptr);

/// Gradient descent from z = 0 with Armijo backtracking (halving).
InversionResult deep_prior_invert(const Generator& g, const Tensor& H, const Tensor& x, double lambda,
                                  const InversionOptions& opts = {});

/// Directory + manifest.json with a kind tag.
void save_denoiser(const std::filesystem::path& dir, const Denoiser& d);
Denoiser load_denoiser(const std::filesystem::path& dir);
void save_generator(const std::filesystem::path& dir, const Generator& g);
Generator load_generator(const std::filesystem::path& dir);

}  // namespace mbdl
