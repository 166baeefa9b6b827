#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "mbdl/error.hpp"
#include "mbdl/random.hpp"
#include "mbdl/train.hpp"

using namespace mbdl;

namespace {

Dataset small_regression(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.inputs = rng.normal_tensor({n, 3});
  d.targets = rng.normal_tensor({n, 2});
  assign_splits(d, seed);
  return d;
}

}  // namespace

TEST_CASE("splits are disjoint and cover everything") {
  for (std::size_t n : {1u, 7u, 100u, 1001u}) {
    Dataset d = small_regression(n, n);
    d.validate();
    std::set<std::size_t> all;
    for (auto* part : {&d.train, &d.validation, &d.test}) all.insert(part->begin(), part->end());
    CHECK(all.size() == n);
    CHECK(d.train.size() + d.validation.size() + d.test.size() == n);
  }
  Dataset d = small_regression(100, 1);
  CHECK(d.train.size() == 70);
  CHECK(d.validation.size() == 15);
  CHECK(d.test.size() == 15);
  d.test.push_back(d.train.front());
  CHECK_THROWS(d.validate());
}

TEST_CASE("empirical risk trivial cases") {
  Dataset d = small_regression(20, 2);
  d.targets = Tensor(d.targets.shape());
  auto zero_rule = [](const Tensor&) { return Tensor({2}); };
  CHECK(empirical_risk(zero_rule, d, Split::train) == 0.0);

  Dataset cls;
  cls.inputs = Tensor({10, 1});
  cls.targets = Tensor({10, 1}, 1.0);
  assign_splits(cls, 0, 1.0, 0.0);
  auto wrong = [](const Tensor&) { return Tensor({1}, 0.0); };
  CHECK(empirical_risk(wrong, cls, Split::train, Loss::zero_one) == 1.0);
  CHECK(empirical_risk([](const Tensor&) { return Tensor({1}, 1.0); }, cls, Split::train, Loss::zero_one) == 0.0);
  CHECK_THROWS(empirical_risk(wrong, cls, Split::test));
}

TEST_CASE("empirical risk matches a hand loop and decomposes over splits") {
  const Dataset d = small_regression(10, 3);
  const Tensor w = Tensor::matrix({{0.5, -1.0, 0.2}, {0.1, 0.3, -0.7}});
  auto rule = [&](const Tensor& x) { return matmul(w, x); };
  std::vector<std::size_t> all(10);
  for (std::size_t i = 0; i < 10; ++i) all[i] = i;
  double hand = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t r = 0; r < 2; ++r) {
      double p = 0.0;
      for (std::size_t c = 0; c < 3; ++c) p += w(r, c) * d.inputs(i, c);
      hand += (p - d.targets(i, r)) * (p - d.targets(i, r));
    }
  }
  CHECK(std::abs(empirical_risk(rule, d, all) - hand / 10.0) <= 1e-12);

  double weighted = 0.0;
  for (Split s : {Split::train, Split::validation, Split::test}) {
    const auto& idx = d.indices(s);
    if (!idx.empty()) weighted += empirical_risk(rule, d, s) * static_cast<double>(idx.size());
  }
  CHECK(std::abs(weighted / 10.0 - empirical_risk(rule, d, all)) <= 1e-12);
}

TEST_CASE("sgd step closed forms") {
  const std::vector<Tensor> p{Tensor::vector({1.0, -2.0})};
  CHECK(sgd_step(p, {Tensor::vector({3.0, 4.0})}, 0.0)[0] == p[0]);

  // f = theta^2, gradient 2 theta
  std::vector<Tensor> theta{Tensor::scalar(1.0)};
  for (int j = 1; j <= 30; ++j) {
    theta = sgd_step(theta, {Tensor::scalar(2.0 * theta[0].item())}, 0.1);
    CHECK(theta[0].item() == doctest::Approx(std::pow(0.8, j)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(sgd_step(p, {Tensor::vector({NAN, 0.0})}, 0.1), NumericalError);
}

TEST_CASE("momentum follows the scripted recursion") {
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.momentum = 0.9;
  Optimizer opt(cfg);
  std::vector<Tensor> theta{Tensor::vector({1.0, -0.5})};
  double a = 1.0, b = -0.5, va = 0.0, vb = 0.0;
  for (int j = 0; j < 20; ++j) {
    // f = 1.5 a^2 + 0.5 b^2
    const Tensor g = Tensor::vector({3.0 * theta[0][0], theta[0][1]});
    opt.step(theta, {g}, 0);
    va = 0.9 * va + 3.0 * a;
    vb = 0.9 * vb + b;
    a -= 0.05 * va;
    b -= 0.05 * vb;
    CHECK(std::abs(theta[0][0] - a) <= 1e-12);
    CHECK(std::abs(theta[0][1] - b) <= 1e-12);
  }
}

TEST_CASE("gradient clipping and schedules") {
  TrainConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.clip_norm = 1.0;
  Optimizer opt(cfg);
  std::vector<Tensor> theta{Tensor::vector({0.0, 0.0})};
  opt.step(theta, {Tensor::vector({3.0, 4.0})}, 0);
  CHECK(theta[0][0] == doctest::Approx(-0.6));
  CHECK(theta[0][1] == doctest::Approx(-0.8));

  TrainConfig decay;
  decay.learning_rate = 1.0;
  decay.schedule = Schedule::step_decay;
  decay.decay_every = 10;
  decay.decay_factor = 0.5;
  CHECK(decay.rate(9) == 1.0);
  CHECK(decay.rate(10) == 0.5);
  CHECK(decay.rate(25) == 0.25);
}

TEST_CASE("train loop fits least squares and keeps the best checkpoint") {
  Rng rng(4);
  Dataset d;
  d.inputs = rng.normal_tensor({200, 2});
  d.targets = Tensor({200, 1});
  for (std::size_t i = 0; i < 200; ++i) d.targets(i, 0) = 2.0 * d.inputs(i, 0) - d.inputs(i, 1);
  assign_splits(d, 4);
  BatchObjective obj = [&](const std::vector<Tensor>& p, std::span<const std::size_t> batch, std::vector<Tensor>* g) {
    double loss = 0.0;
    Tensor grad({2});
    for (std::size_t i : batch) {
      const double r = p[0][0] * d.inputs(i, 0) + p[0][1] * d.inputs(i, 1) - d.targets(i, 0);
      loss += r * r;
      grad[0] += 2.0 * r * d.inputs(i, 0);
      grad[1] += 2.0 * r * d.inputs(i, 1);
    }
    const double nb = static_cast<double>(batch.size());
    if (g) g->push_back((1.0 / nb) * grad);
    return loss / nb;
  };
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.epochs = 30;
  cfg.batch_size = 10;
  const auto res = train_loop({Tensor({2})}, obj, d.train, d.validation, cfg);
  CHECK_FALSE(res.diverged);
  CHECK(res.trace.size() == 31);
  CHECK(res.params[0][0] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(res.params[0][1] == doctest::Approx(-1.0).epsilon(1e-6));

  cfg.learning_rate = 0.0;
  const auto frozen = train_loop({Tensor::vector({0.3, 0.1})}, obj, d.train, d.validation, cfg);
  CHECK(frozen.params[0] == Tensor::vector({0.3, 0.1}));

  cfg.epochs = 0;
  const auto none = train_loop({Tensor::vector({0.3, 0.1})}, obj, d.train, d.validation, cfg);
  CHECK(none.trace.size() == 1);

  cfg.epochs = 5;
  cfg.batch_size = 1000;
  CHECK_THROWS_AS(train_loop({Tensor({2})}, obj, d.train, d.validation, cfg), ConfigError);
}

TEST_CASE("train loop stops at the last finite iterate") {
  int calls = 0;
  BatchObjective obj = [&](const std::vector<Tensor>& p, std::span<const std::size_t>, std::vector<Tensor>* g) {
    if (g) {
      ++calls;
      g->push_back(calls >= 3 ? Tensor::scalar(std::numeric_limits<double>::quiet_NaN()) : Tensor::scalar(1.0));
    }
    return p[0].item() * p[0].item();
  };
  std::vector<std::size_t> idx{0, 1, 2, 3};
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.batch_size = 4;
  cfg.epochs = 10;
  cfg.keep_best_validation = false;
  const auto res = train_loop({Tensor::scalar(1.0)}, obj, idx, {}, cfg);
  CHECK(res.diverged);
  CHECK(res.params[0].item() == doctest::Approx(0.8));
  CHECK(res.message.find("non-finite") != std::string::npos);
}

TEST_CASE("sparse dataset generator") {
  const Dataset zero = gen_sparse_dataset(8, 16, 0, 0.0, 20, 1);
  CHECK(max_abs(zero.inputs) == 0.0);

  const Dataset clean = gen_sparse_dataset(8, 16, 3, 0.0, 50, 2);
  REQUIRE(clean.H.has_value());
  for (std::size_t j = 0; j < 16; ++j) CHECK(norm(clean.H->column(j)) == doctest::Approx(1.0));
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(max_abs_diff(matmul(*clean.H, clean.target(i)), clean.input(i)) <= 1e-14);
    const Tensor s = clean.target(i);
    std::size_t nnz = 0;
    for (double v : s.data()) nnz += v != 0.0;
    CHECK(nnz == 3);
  }
  const Dataset again = gen_sparse_dataset(8, 16, 3, 0.0, 50, 2);
  CHECK(again.inputs == clean.inputs);
  CHECK(again.train == clean.train);
  CHECK_THROWS(gen_sparse_dataset(8, 16, 17, 0.0, 5, 2));
}

TEST_CASE("sparse dataset noise variance") {
  const double sigma = 0.3;
  const Dataset d = gen_sparse_dataset(4, 8, 2, sigma, 10000, 9);
  double sq = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) sq += squared_norm(d.input(i) - matmul(*d.H, d.target(i)));
  const double var = sq / static_cast<double>(d.size() * 4);
  CHECK(std::abs(var - sigma * sigma) / (sigma * sigma) <= 0.05);
}
