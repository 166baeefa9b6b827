#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mbdl/tensor.hpp"

namespace mbdl {

enum class Split { train, validation, test };

/// Paired samples stacked on the leading axis with a fixed split.
struct Dataset {
  Tensor inputs;   // [N x ...]
  Tensor targets;  // [N x ...]
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
  std::optional<Tensor> H;  // measurement operator for synthetic sparse data

  std::size_t size() const { return inputs.rank() == 0 ? 0 : inputs.extent(0); }
  const std::vector<std::size_t>& indices(Split s) const;
  Tensor input(std::size_t i) const { return inputs.slice(i); }
  Tensor target(std::size_t i) const { return targets.slice(i); }
  /// Samples of `idx` as columns: [features x |idx|]. Inputs must be rank 2.
  Tensor input_columns(std::span<const std::size_t> idx) const;
  Tensor target_columns(std::span<const std::size_t> idx) const;
  void validate() const;
};

/// Shuffled 70/15/15 split (or the given fractions) of 0..n-1.
void assign_splits(Dataset& d, std::uint64_t seed, double train_fraction = 0.7, double validation_fraction = 0.15);

enum class Loss { l2, zero_one };

using Rule = std::function<Tensor(const Tensor&)>;

/// Mean per-sample loss of `rule` over a split. l2 is ||f(x) - s||^2; zero-one
/// counts samples whose prediction differs from the target anywhere.
double empirical_risk(const Rule& rule, const Dataset& d, Split split, Loss loss = Loss::l2);
double empirical_risk(const Rule& rule, const Dataset& d, std::span<const std::size_t> idx, Loss loss = Loss::l2);

inline double to_db(double mse) { return 10.0 * std::log10(mse); }

enum class Schedule { constant, step_decay };
enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  double learning_rate = 1e-2;
  Schedule schedule = Schedule::constant;
  double decay_factor = 0.5;
  int decay_every = 50;  // epochs
  std::size_t batch_size = 32;
  int epochs = 100;
  double momentum = 0.0;
  std::uint64_t seed = 0;
  std::optional<double> clip_norm;
  OptimizerKind optimizer = OptimizerKind::sgd;
  bool keep_best_validation = true;

  double rate(int epoch) const;
  void validate(std::size_t train_size) const;
};

/// Mini-batch SGD with heavy-ball momentum: v <- m v + g, theta <- theta - lr v.
/// With OptimizerKind::adam the update is Adam (beta 0.9/0.999).
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config) : config_(config) {}

  /// In-place update of `params`. Throws NumericalError on non-finite gradients.
  void step(std::vector<Tensor>& params, std::vector<Tensor> grads, int epoch);
  int steps() const { return steps_; }

 private:
  TrainConfig config_;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
  int steps_ = 0;
};

/// Plain function form of one SGD step.
std::vector<Tensor> sgd_step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr);

/// Mean loss over `batch` and, when `grads` is non-null, its gradient w.r.t. params.
using BatchObjective = std::function<double(const std::vector<Tensor>& params, std::span<const std::size_t> batch,
                                            std::vector<Tensor>* grads)>;

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double learning_rate = 0.0;
};

struct TrainResult {
  std::vector<Tensor> params;
  std::vector<EpochRecord> trace;  // entry 0 is the initial evaluation
  int best_epoch = 0;
  bool diverged = false;
  std::string message;
};

/// Generic epoch loop shared by every trainer. Returns the best-validation
/// parameters (or the last ones), and stops at the last finite iterate when
/// the loss or a gradient turns non-finite.
TrainResult train_loop(std::vector<Tensor> params, const BatchObjective& objective,
                       std::span<const std::size_t> train_idx, std::span<const std::size_t> validation_idx,
                       const TrainConfig& config);

/// x = H s + sigma w with column-normalized Gaussian H and k-sparse N(0,1) s.
/// inputs [N x m], targets [N x n]; H kept on the dataset.
Dataset gen_sparse_dataset(std::size_t m, std::size_t n, std::size_t sparsity, double sigma, std::size_t count,
                           std::uint64_t seed);
/// Same construction but with a caller-fixed H.
Dataset gen_sparse_dataset(const Tensor& H, std::size_t sparsity, double sigma, std::size_t count, std::uint64_t seed);

/// Worker count from MBDL_THREADS, defaulting to hardware concurrency.
unsigned worker_threads();

/// Calls fn(i) for i in [0, count) on up to worker_threads() threads. The
/// first exception is rethrown after all workers finish.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace mbdl
