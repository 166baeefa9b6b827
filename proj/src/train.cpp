#include "mbdl/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "mbdl/error.hpp"
#include "mbdl/random.hpp"

namespace mbdl {

const std::vector<std::size_t>& Dataset::indices(Split s) const {
  switch (s) {
    case Split::train:
      return train;
    case Split::validation:
      return validation;
    case Split::test:
      return test;
  }
  throw std::invalid_argument("unknown split");
}

namespace {

Tensor columns_of(const Tensor& stacked, std::span<const std::size_t> idx) {
  if (stacked.rank() != 2) throw ShapeError("column view needs [N x d] samples, got " + shape_string(stacked.shape()));
  const std::size_t d = stacked.cols();
  Tensor out({d, idx.size()});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    if (idx[b] >= stacked.rows()) throw std::out_of_range("sample index out of range");
    for (std::size_t r = 0; r < d; ++r) out(r, b) = stacked(idx[b], r);
  }
  return out;
}

}  // namespace

Tensor Dataset::input_columns(std::span<const std::size_t> idx) const { return columns_of(inputs, idx); }
Tensor Dataset::target_columns(std::span<const std::size_t> idx) const { return columns_of(targets, idx); }

void Dataset::validate() const {
  if (inputs.rank() == 0 || targets.rank() == 0 || inputs.extent(0) != targets.extent(0)) {
    throw ShapeError("inputs " + shape_string(inputs.shape()) + " and targets " + shape_string(targets.shape()) +
                     " must share the sample axis");
  }
  std::vector<int> seen(size(), 0);
  for (const auto* part : {&train, &validation, &test}) {
    for (std::size_t i : *part) {
      if (i >= seen.size() || seen[i]++) throw std::invalid_argument("dataset splits overlap or are out of range");
    }
  }
  if (std::count(seen.begin(), seen.end(), 0) != 0) throw std::invalid_argument("dataset splits do not cover all samples");
}

void assign_splits(Dataset& d, std::uint64_t seed, double train_fraction, double validation_fraction) {
  if (train_fraction < 0 || validation_fraction < 0 || train_fraction + validation_fraction > 1.0) {
    throw std::invalid_argument("split fractions must be non-negative and sum to at most 1");
  }
  const std::size_t n = d.size();
  Rng rng = Rng(seed).split(0x5b1175);
  const auto perm = rng.permutation(n);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n))));
  d.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  d.validation.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                      perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  d.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
  d.seed = seed;
}

double empirical_risk(const Rule& rule, const Dataset& d, Split split, Loss loss) {
  return empirical_risk(rule, d, d.indices(split), loss);
}

double empirical_risk(const Rule& rule, const Dataset& d, std::span<const std::size_t> idx, Loss loss) {
  if (idx.empty()) throw std::invalid_argument("empirical risk over an empty split");
  double total = 0.0;
  for (std::size_t i : idx) {
    const Tensor pred = rule(d.input(i));
    const Tensor target = d.target(i);
    if (pred.size() != target.size()) {
      throw ShapeError("prediction " + shape_string(pred.shape()) + " vs target " + shape_string(target.shape()));
    }
    if (loss == Loss::l2) {
      total += squared_norm(pred.reshaped(target.shape()) - target);
    } else {
      bool wrong = false;
      for (std::size_t k = 0; k < pred.size(); ++k) wrong = wrong || pred[k] != target[k];
      total += wrong ? 1.0 : 0.0;
    }
  }
  return total / static_cast<double>(idx.size());
}

double TrainConfig::rate(int epoch) const {
  if (schedule == Schedule::constant || decay_every <= 0) return learning_rate;
  return learning_rate * std::pow(decay_factor, epoch / decay_every);
}

void TrainConfig::validate(std::size_t train_size) const {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (batch_size > train_size) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds train split of " + std::to_string(train_size));
  }
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
}

void Optimizer::step(std::vector<Tensor>& params, std::vector<Tensor> grads, int epoch) {
  if (grads.size() != params.size()) throw std::invalid_argument("gradient list does not match parameters");
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].shape() != params[i].shape()) {
      throw ShapeError("gradient " + shape_string(grads[i].shape()) + " for parameter " + shape_string(params[i].shape()));
    }
    if (!grads[i].all_finite()) throw NumericalError("non-finite gradient for parameter " + std::to_string(i));
    sq += squared_norm(grads[i]);
  }
  if (config_.clip_norm && std::sqrt(sq) > *config_.clip_norm) {
    const double f = *config_.clip_norm / std::sqrt(sq);
    for (auto& g : grads) g = scale(f, g);
  }
  const double lr = config_.rate(epoch);
  ++steps_;
  if (first_.empty()) {
    for (const auto& p : params) first_.push_back(Tensor::zeros_like(p));
    if (config_.optimizer == OptimizerKind::adam) second_ = first_;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto v = first_[i].data();
    auto p = params[i].data();
    const auto g = std::as_const(grads[i]).data();
    if (config_.optimizer == OptimizerKind::sgd) {
      for (std::size_t k = 0; k < p.size(); ++k) {
        v[k] = config_.momentum * v[k] + g[k];
        p[k] -= lr * v[k];
      }
    } else {
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      auto w = second_[i].data();
      const double c1 = 1.0 - std::pow(b1, steps_);
      const double c2 = 1.0 - std::pow(b2, steps_);
      for (std::size_t k = 0; k < p.size(); ++k) {
        v[k] = b1 * v[k] + (1.0 - b1) * g[k];
        w[k] = b2 * w[k] + (1.0 - b2) * g[k] * g[k];
        p[k] -= lr * (v[k] / c1) / (std::sqrt(w[k] / c2) + eps);
      }
    }
  }
}

std::vector<Tensor> sgd_step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
  TrainConfig cfg;
  cfg.learning_rate = lr;
  Optimizer opt(cfg);
  std::vector<Tensor> out = params;
  opt.step(out, grads, 0);
  return out;
}

TrainResult train_loop(std::vector<Tensor> params, const BatchObjective& objective,
                       std::span<const std::size_t> train_idx, std::span<const std::size_t> validation_idx,
                       const TrainConfig& config) {
  config.validate(train_idx.size());
  const bool have_validation = !validation_idx.empty();
  auto evaluate = [&](const std::vector<Tensor>& p) {
    return objective(p, have_validation ? validation_idx : train_idx, nullptr);
  };

  TrainResult res;
  const double initial_train = objective(params, train_idx, nullptr);
  const double initial_val = evaluate(params);
  if (!std::isfinite(initial_train) || !std::isfinite(initial_val)) {
    throw NumericalError("initial loss is not finite");
  }
  res.trace.push_back({0, initial_train, initial_val, config.rate(0)});
  std::vector<Tensor> best = params;
  double best_val = initial_val;

  Optimizer opt(config);
  const Rng base(config.seed);
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  std::vector<Tensor> grads;
  for (int epoch = 1; epoch <= config.epochs && !res.diverged; ++epoch) {
    Rng rng = base.split(static_cast<std::uint64_t>(epoch));
    const auto perm = rng.permutation(order.size());
    std::vector<std::size_t> shuffled(order.size());
    for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = order[perm[i]];

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    // a trailing partial batch is dropped so every step sees batch_size samples
    for (std::size_t start = 0; start + config.batch_size <= shuffled.size(); start += config.batch_size) {
      const std::span<const std::size_t> batch(shuffled.data() + start, config.batch_size);
      grads.clear();
      const double loss = objective(params, batch, &grads);
      if (!std::isfinite(loss)) {
        res.diverged = true;
        res.message = "loss became non-finite at epoch " + std::to_string(epoch);
        break;
      }
      std::vector<Tensor> candidate = params;
      try {
        opt.step(candidate, grads, epoch - 1);
      } catch (const NumericalError& e) {
        res.diverged = true;
        res.message = std::string(e.what()) + " at epoch " + std::to_string(epoch);
        break;
      }
      bool finite = true;
      for (const auto& p : candidate) finite = finite && p.all_finite();
      if (!finite) {
        res.diverged = true;
        res.message = "parameters became non-finite at epoch " + std::to_string(epoch);
        break;
      }
      params = std::move(candidate);
      epoch_loss += loss;
      ++batches;
    }
    if (res.diverged) break;
    const double val = evaluate(params);
    if (!std::isfinite(val)) {
      res.diverged = true;
      res.message = "validation loss became non-finite at epoch " + std::to_string(epoch);
      break;
    }
    res.trace.push_back({epoch, batches ? epoch_loss / static_cast<double>(batches) : 0.0, val, config.rate(epoch - 1)});
    if (val < best_val) {
      best_val = val;
      best = params;
      res.best_epoch = epoch;
    }
  }
  if (config.keep_best_validation) {
    res.params = std::move(best);
  } else {
    res.params = std::move(params);
    res.best_epoch = res.trace.back().epoch;
  }
  return res;
}

Dataset gen_sparse_dataset(const Tensor& H, std::size_t sparsity, double sigma, std::size_t count, std::uint64_t seed) {
  if (!H.is_matrix()) throw ShapeError("H must be a matrix");
  const std::size_t m = H.rows(), n = H.cols();
  if (sparsity > n) throw std::invalid_argument("sparsity exceeds signal dimension");
  if (!(sigma >= 0.0)) throw std::invalid_argument("noise level must be non-negative");
  Dataset d;
  d.inputs = Tensor({count, m});
  d.targets = Tensor({count, n});
  d.H = H;
  const Rng base = Rng(seed).split(2);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = base.split(i);
    Tensor s({n});
    const auto perm = rng.permutation(n);
    for (std::size_t j = 0; j < sparsity; ++j) s[perm[j]] = rng.normal();
    const Tensor x = matmul(H, s);
    for (std::size_t r = 0; r < m; ++r) d.inputs(i, r) = x[r] + sigma * rng.normal();
    for (std::size_t c = 0; c < n; ++c) d.targets(i, c) = s[c];
  }
  assign_splits(d, seed);
  return d;
}

Dataset gen_sparse_dataset(std::size_t m, std::size_t n, std::size_t sparsity, double sigma, std::size_t count,
                           std::uint64_t seed) {
  Rng rng = Rng(seed).split(1);
  Tensor h = rng.normal_tensor({m, n});
  for (std::size_t j = 0; j < n; ++j) {
    double c = 0.0;
    for (std::size_t i = 0; i < m; ++i) c += h(i, j) * h(i, j);
    c = std::sqrt(c);
    if (c == 0.0) continue;
    for (std::size_t i = 0; i < m; ++i) h(i, j) /= c;
  }
  return gen_sparse_dataset(h, sparsity, sigma, count, seed);
}

unsigned worker_threads() {
  if (const char* env = std::getenv("MBDL_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(worker_threads(), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex guard;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(guard);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace mbdl
