#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mbdl/error.hpp"
#include "mbdl/random.hpp"
#include "mbdl/unfolded.hpp"
#include "support/instances.hpp"
#include "support/oracles.hpp"

using namespace mbdl;

namespace {

// finite differences of the packed loss, compared leaf by leaf
double worst_packed_gradient_error(const UnfoldedParams& like, const std::vector<Tensor>& packed, const Tensor& X,
                                   const Tensor& S, TrainMode mode) {
  std::vector<Tensor> grads;
  unfolded_loss(like, packed, X, S, mode, &grads);
  double worst = 0.0;
  for (std::size_t k = 0; k < packed.size(); ++k) {
    auto f = [&](const Tensor& t) {
      auto p = packed;
      p[k] = t;
      return unfolded_loss(like, p, X, S, mode, nullptr);
    };
    worst = std::max(worst, oracle::relative_error(grads[k], oracle::finite_difference(f, packed[k])));
  }
  return worst;
}

Tensor batch_of(Rng& rng, std::size_t rows, std::size_t cols) { return rng.normal_tensor({rows, cols}); }

}  // namespace

TEST_CASE("lista init reproduces ista") {
  const auto inst = oracle::random_lasso(50);
  const double mu = default_step(inst.problem);
  const auto params = lista_init(inst.problem, mu, 25);
  Rng rng(51);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = rng.normal_tensor({32});
    const Tensor ref = ista(inst.problem, x, mu, 25).coefficients;
    CHECK(max_abs_diff(lista_forward(params, x), ref) <= 1e-12);
  }
  CHECK(lista_forward(lista_init(inst.problem, mu, 0), inst.x) == Tensor({64}));
}

TEST_CASE("lista trivial networks") {
  SparseProblem p;
  p.H = Tensor::identity(3);
  p.rho = 0.0;
  const Tensor x = Tensor::vector({1.0, -2.0, 0.5});
  CHECK(max_abs_diff(lista_forward(lista_init(p, 1.0, 1), x), x) == 0.0);

  auto zero = lista_init(p, 1.0, 4);
  for (auto& l : zero.layers) {
    l.W1 = Tensor({3, 3});
    l.W2 = Tensor({3, 3});
  }
  CHECK(lista_forward(zero, x) == Tensor({3}));
  CHECK_THROWS_AS(lista_forward(zero, Tensor({4})), ShapeError);
}

TEST_CASE("unfolded admm init reproduces admm") {
  const auto inst = oracle::random_lasso(52);
  AdmmHyper hyper;
  hyper.lambda = 0.7;
  hyper.mu = 1.3;
  const auto params = unfolded_admm_init(inst.problem, hyper, 30);
  AdmmHyper fixed = hyper;
  fixed.max_iter = 30;
  fixed.tol = 0.0;
  Rng rng(53);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = rng.normal_tensor({32});
    CHECK(max_abs_diff(unfolded_admm_forward(params, x), admm(inst.problem, x, fixed).coefficients) <= 1e-12);
  }
  CHECK(max_abs(unfolded_admm_forward(params, Tensor({32}))) == 0.0);
}

TEST_CASE("batched forward equals per-column forward") {
  const auto inst = oracle::random_lasso(54);
  const auto lista = lista_init(inst.problem, default_step(inst.problem), 7);
  const auto admm_net = unfolded_admm_init(inst.problem, AdmmHyper{}, 7);
  Rng rng(55);
  const Tensor X = batch_of(rng, 32, 5);
  const Tensor out_l = lista_forward(lista, X);
  const Tensor out_a = unfolded_admm_forward(admm_net, X);
  for (std::size_t b = 0; b < 5; ++b) {
    CHECK(max_abs_diff(out_l.column(b), lista_forward(lista, X.column(b))) <= 1e-14);
    CHECK(max_abs_diff(out_a.column(b), unfolded_admm_forward(admm_net, X.column(b))) <= 1e-14);
  }
}

TEST_CASE("tape forward matches tensor forward at initialization") {
  const auto inst = oracle::random_lasso(56, 12, 20, 3);
  Rng rng(57);
  const Tensor X = batch_of(rng, 12, 4);
  for (TrainMode mode : {TrainMode::full, TrainMode::hyper_only}) {
    for (const auto& net :
         {lista_init(inst.problem, default_step(inst.problem), 6), unfolded_admm_init(inst.problem, AdmmHyper{}, 6)}) {
      ad::Tape tape;
      std::vector<ad::Var> leaves;
      for (const auto& t : pack_unfolded(net, mode)) leaves.push_back(tape.leaf(t));
      const ad::Var out = unfolded_forward(tape, net, leaves, tape.constant(X), mode);
      CHECK(max_abs_diff(out.value(), unfolded_forward(net, X)) <= 1e-10);
    }
  }
}

TEST_CASE("bptt through 20 lista layers matches finite differences on every leaf") {
  const auto inst = oracle::random_lasso(58, 6, 10, 2, 0.05, 0.05);
  Rng rng(59);
  auto net = lista_init(inst.problem, default_step(inst.problem), 20);
  // perturb so layers differ and the thresholds sit away from the data
  for (auto& l : net.layers) {
    l.W1 = l.W1 + rng.normal_tensor(l.W1.shape(), 0.01);
    l.lambda += 0.01 * rng.uniform();
  }
  const Tensor X = batch_of(rng, 6, 3);
  const Tensor S = batch_of(rng, 10, 3);
  CHECK(worst_packed_gradient_error(net, pack_unfolded(net, TrainMode::full), X, S, TrainMode::full) <= 1e-4);
  CHECK(worst_packed_gradient_error(net, pack_unfolded(net, TrainMode::hyper_only), X, S, TrainMode::hyper_only) <=
        1e-4);
}

TEST_CASE("bptt through unfolded admm matches finite differences") {
  const auto inst = oracle::random_lasso(60, 6, 10, 2, 0.05, 0.2);
  Rng rng(61);
  AdmmHyper hyper;
  hyper.lambda = 0.8;
  hyper.mu = 0.9;
  const auto net = unfolded_admm_init(inst.problem, hyper, 12);
  const Tensor X = batch_of(rng, 6, 3);
  const Tensor S = batch_of(rng, 10, 3);
  CHECK(worst_packed_gradient_error(net, pack_unfolded(net, TrainMode::full), X, S, TrainMode::full) <= 1e-4);
  CHECK(worst_packed_gradient_error(net, pack_unfolded(net, TrainMode::hyper_only), X, S, TrainMode::hyper_only) <=
        1e-4);
}

TEST_CASE("unrolled admm gradient on lambda in one dimension") {
  SparseProblem p;
  p.H = Tensor::matrix({{1.3}});
  p.rho = 0.4;
  const Tensor X = Tensor::matrix({{2.0}});
  const Tensor S = Tensor::matrix({{1.9}});
  AdmmHyper h;
  h.lambda = 0.6;
  h.mu = 0.8;
  double dl = 0.0, dm = 0.0;
  admm_unrolled_loss(p, h, X, S, 100, &dl, &dm);
  const double eps = 1e-6;
  auto at = [&](double lam, double mu) {
    AdmmHyper q = h;
    q.lambda = lam;
    q.mu = mu;
    return admm_unrolled_loss(p, q, X, S, 100);
  };
  const double fd_l = (at(h.lambda + eps, h.mu) - at(h.lambda - eps, h.mu)) / (2 * eps);
  const double fd_m = (at(h.lambda, h.mu + eps) - at(h.lambda, h.mu - eps)) / (2 * eps);
  CHECK(std::abs(dl - fd_l) <= 1e-4 * std::max(1.0, std::abs(fd_l)));
  CHECK(std::abs(dm - fd_m) <= 1e-4 * std::max(1.0, std::abs(fd_m)));
}

TEST_CASE("gradient vanishes when targets are the converged admm output") {
  const auto inst = oracle::random_lasso(62, 8, 12, 2);
  AdmmHyper h;
  h.lambda = 0.5;
  h.mu = 1.0;
  Rng rng(63);
  const Tensor X = batch_of(rng, 8, 4);
  AdmmHyper converged = h;
  converged.max_iter = 20000;
  converged.tol = 1e-14;
  Tensor S({12, 4});
  for (std::size_t b = 0; b < 4; ++b) {
    const Tensor s = admm(inst.problem, X.column(b), converged).coefficients;
    for (std::size_t i = 0; i < 12; ++i) S(i, b) = s[i];
  }
  double dl = 1.0, dm = 1.0;
  admm_unrolled_loss(inst.problem, h, X, S, 2000, &dl, &dm);
  CHECK(std::abs(dl) <= 1e-3);
  CHECK(std::abs(dm) <= 1e-3);
}

TEST_CASE("training with zero or vanishing learning rate") {
  const Dataset data = gen_sparse_dataset(8, 16, 2, 0.05, 200, 3);
  SparseProblem p;
  p.H = *data.H;
  p.rho = 0.05;
  const auto init = lista_init(p, default_step(p), 5);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.epochs = 3;
  cfg.keep_best_validation = false;
  const auto frozen = train_unfolded(init, data, cfg);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(frozen.params.layers[k].W1 == init.layers[k].W1);
    CHECK(frozen.params.layers[k].W2 == init.layers[k].W2);
  }

  const std::vector<std::size_t> batch(data.train.begin(), data.train.begin() + 32);
  const Tensor X = data.input_columns(batch), S = data.target_columns(batch);
  auto packed = pack_unfolded(init, TrainMode::full);
  std::vector<Tensor> grads;
  const double before = unfolded_loss(init, packed, X, S, TrainMode::full, &grads);
  const auto stepped = sgd_step(packed, grads, 1e-8);
  const double after = unfolded_loss(init, stepped, X, S, TrainMode::full, nullptr);
  CHECK(after <= before);
  CHECK(before - after <= 1e-10 + 1e-6 * before);
}

TEST_CASE("lista training lowers the training loss") {
  const Dataset data = gen_sparse_dataset(10, 20, 2, 0.02, 400, 4);
  SparseProblem p;
  p.H = *data.H;
  p.rho = 0.05;
  const auto init = lista_init(p, default_step(p), 5);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.momentum = 0.9;
  cfg.epochs = 30;
  const auto trained = train_unfolded(init, data, cfg);
  CHECK_FALSE(trained.report.diverged);
  CHECK(unfolded_mse(trained.params, data, Split::train) < unfolded_mse(init, data, Split::train));
  CHECK(unfolded_mse(trained.params, data, Split::validation) <= unfolded_mse(init, data, Split::validation));
}

TEST_CASE("tied single layer is one shared iteration map") {
  const auto inst = oracle::random_lasso(64);
  const auto tied = lista_init(inst.problem, default_step(inst.problem), 1, true);
  const auto untied = lista_init(inst.problem, default_step(inst.problem), 1, false);
  CHECK(tied.layers.size() == 1);
  CHECK(lista_forward(tied, inst.x) == lista_forward(untied, inst.x));
  const auto tied10 = lista_init(inst.problem, default_step(inst.problem), 10, true);
  CHECK(pack_unfolded(tied10, TrainMode::full).size() == 4);
  CHECK(max_abs_diff(lista_forward(tied10, inst.x), lista_forward(lista_init(inst.problem, default_step(inst.problem), 10), inst.x)) == 0.0);
}

TEST_CASE("learned admm tuning improves bad hyperparameters") {
  const Dataset data = gen_sparse_dataset(10, 20, 2, 0.02, 200, 5);
  SparseProblem p;
  p.H = *data.H;
  p.rho = 0.02;
  AdmmHyper bad;
  bad.lambda = 10.0;
  bad.mu = 0.01;
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.epochs = 10;
  cfg.optimizer = OptimizerKind::adam;
  const auto tuned = learned_admm_tune(p, bad, data, cfg, 30);
  CHECK(tuned.report.trace.back().validation_loss < tuned.report.trace.front().validation_loss);
  CHECK(tuned.hyper.lambda > 0.0);
  CHECK(tuned.hyper.mu > 0.0);
}

TEST_CASE("manifest round trip") {
  const auto inst = oracle::random_lasso(65, 8, 12, 2);
  const auto dir = std::filesystem::temp_directory_path() / "mbdl_unfolded_manifest";
  std::filesystem::remove_all(dir);
  const auto net = unfolded_admm_init(inst.problem, AdmmHyper{}, 4);
  save_unfolded(dir, net);
  const auto back = load_unfolded(dir);
  CHECK(back.K == 4);
  CHECK(back.kind == UnfoldedKind::admm);
  CHECK(unfolded_forward(back, inst.x) == unfolded_forward(net, inst.x));
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_unfolded(dir), ConfigError);
}
