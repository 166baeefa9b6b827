#pragma once

#include <filesystem>
#include <vector>

#include "mbdl/autodiff.hpp"
#include "mbdl/sparse.hpp"
#include "mbdl/train.hpp"

namespace mbdl {

enum class UnfoldedKind { lista, admm };

struct UnfoldedLayer {
  Tensor W1;  // n x m
  Tensor W2;  // n x n
  double lambda = 0.0;
  double mu = 1.0;
};

/// K solver iterations turned into layers. With `tied` a single layer is
/// shared by every iteration.
///   lista: s+ = T_lambda(W1 x + mu W2 s)
///   admm:  s+ = W1 x + W2 (v - u); v+ = prox(s+ + u) at weight 1/(2 lambda); u+ = u + mu (s+ - v+)
struct UnfoldedParams {
  UnfoldedKind kind = UnfoldedKind::lista;
  std::size_t K = 0;
  bool tied = false;
  std::vector<UnfoldedLayer> layers;
  double rho = 0.0;  // l1 weight of the ADMM prior
  Tensor A;          // effective operator, kept so ADMM weights can be rebuilt from lambda

  const UnfoldedLayer& layer(std::size_t k) const { return tied ? layers.at(0) : layers.at(k); }
  std::size_t input_dim() const { return layers.at(0).W1.cols(); }
  std::size_t output_dim() const { return layers.at(0).W1.rows(); }
  void validate() const;
};

/// W1 = mu A^T, W2 = I - mu A^T A, mu_k = 1, lambda_k = mu rho.
UnfoldedParams lista_init(const SparseProblem& p, double mu, std::size_t K, bool tied = false);
/// x is [m] or [m x B] (one sample per column). Returns coefficients.
Tensor lista_forward(const UnfoldedParams& params, const Tensor& x);

/// W1 = (A^T A + 2 lambda I)^{-1} A^T, W2 = 2 lambda (A^T A + 2 lambda I)^{-1}.
UnfoldedParams unfolded_admm_init(const SparseProblem& p, const AdmmHyper& hyper, std::size_t K, bool tied = false);
/// Rebuild each layer's W1, W2 from its lambda.
void rebuild_admm_weights(UnfoldedParams& params);
Tensor unfolded_admm_forward(const UnfoldedParams& params, const Tensor& x, const Prior& prior);
/// l1 prior at params.rho.
Tensor unfolded_admm_forward(const UnfoldedParams& params, const Tensor& x);

/// Forward for either kind.
Tensor unfolded_forward(const UnfoldedParams& params, const Tensor& x);

/// full trains W1, W2, lambda, mu; hyper_only trains lambda, mu (ADMM weights
/// are recomputed from lambda on the tape, LISTA weights stay fixed).
enum class TrainMode { full, hyper_only };

/// Trainable tensors. Scalars are stored through the inverse softplus so
/// positivity survives unconstrained updates.
std::vector<Tensor> pack_unfolded(const UnfoldedParams& params, TrainMode mode);
UnfoldedParams unpack_unfolded(const UnfoldedParams& like, const std::vector<Tensor>& packed, TrainMode mode);

/// Differentiable forward over packed leaves; x is [m x B].
ad::Var unfolded_forward(ad::Tape& tape, const UnfoldedParams& like, std::span<const ad::Var> packed, const ad::Var& x,
                         TrainMode mode);

/// Mean over columns of ||f(x_b) - s_b||^2 and, optionally, gradients w.r.t. the packed tensors.
double unfolded_loss(const UnfoldedParams& like, const std::vector<Tensor>& packed, const Tensor& X, const Tensor& S,
                     TrainMode mode, std::vector<Tensor>* grads);

struct UnfoldedTrainResult {
  UnfoldedParams params;
  TrainResult report;
};

UnfoldedTrainResult train_unfolded(const UnfoldedParams& init, const Dataset& data, const TrainConfig& config,
                                   TrainMode mode = TrainMode::full);

/// Mean per-sample squared error of a rule over a split.
double unfolded_mse(const UnfoldedParams& params, const Dataset& data, Split split);

struct TuneResult {
  AdmmHyper hyper;
  TrainResult report;
};

/// Tune [lambda, mu] of a tied ADMM by BPTT through `budget` unrolled iterations.
TuneResult learned_admm_tune(const SparseProblem& p, const AdmmHyper& hyper0, const Dataset& data,
                             const TrainConfig& config, std::size_t budget = 100);

/// Loss of `budget` ADMM iterations at (lambda, mu) and its gradient w.r.t. (lambda, mu).
double admm_unrolled_loss(const SparseProblem& p, const AdmmHyper& hyper, const Tensor& X, const Tensor& S,
                          std::size_t budget, double* d_lambda = nullptr, double* d_mu = nullptr);

/// Directory of tensor files plus manifest.json {K, tied, kind, lambda[], mu[], rho}.
void save_unfolded(const std::filesystem::path& dir, const UnfoldedParams& params);
UnfoldedParams load_unfolded(const std::filesystem::path& dir);

}  // namespace mbdl
