#include "mbdl/state_space.hpp"

#include <cmath>
#include <memory>

#include "mbdl/error.hpp"
#include "mbdl/random.hpp"

namespace mbdl {

namespace {

constexpr double kCovEps = 1e-8;

void require_shape(const Tensor& t, const Tensor::Shape& shape, const char* name) {
  if (t.shape() != shape) {
    throw ShapeError(std::string(name) + " has shape " + shape_string(t.shape()) + ", expected " + shape_string(shape));
  }
}

void require_psd(const Tensor& t, const char* name, bool strict) {
  const Tensor sym = symmetrize(t);
  if (max_abs_diff(sym, t) > 1e-10 * std::max(1.0, max_abs(t))) throw std::invalid_argument(std::string(name) + " is not symmetric");
  if (t.size() == 0) return;
  const double lo = symmetric_eigenvalues(sym).front();
  if (strict ? !(lo > 1e-10) : lo < -1e-10) {
    throw std::invalid_argument(std::string(name) + (strict ? " is not positive definite" : " is not positive semidefinite"));
  }
}

Tensor gaussian(Rng& rng, const Tensor& factor) {
  return matmul(factor, rng.normal_tensor({factor.cols()}));
}

// rows t of the [T x d] matrix
Tensor row(const Tensor& m, std::size_t t) { return m.slice(t); }

void set_row(Tensor& m, std::size_t t, const Tensor& v) {
  for (std::size_t j = 0; j < v.size(); ++j) m(t, j) = v[j];
}

Tensor riccati_step(const StateSpaceModel& m, const Tensor& P, Tensor* gain) {
  const Tensor bt = transpose(m.B);
  const Tensor pb = matmul(P, m.B);
  const Tensor K = solve_spd(symmetrize(m.R + matmul(bt, pb)), matmul(transpose(pb), m.A));
  if (gain) *gain = K;
  return symmetrize(m.Q + matmul(transpose(m.A), matmul(P, m.A - matmul(m.B, K))));
}

}  // namespace

void StateSpaceModel::validate(bool strict) const {
  const std::size_t n = A.rows();
  require_shape(A, {n, n}, "A");
  if (!B.is_matrix() || B.rows() != n) throw ShapeError("B must have " + std::to_string(n) + " rows");
  const std::size_t p = B.cols();
  if (!C.is_matrix() || C.cols() != n) throw ShapeError("C must have " + std::to_string(n) + " columns");
  const std::size_t q = C.rows();
  require_shape(Q, {n, n}, "Q");
  require_shape(R, {p, p}, "R");
  require_shape(V, {n, n}, "V");
  require_shape(W, {q, q}, "W");
  require_shape(z0, {n}, "z0");
  require_shape(P0, {n, n}, "P0");
  require_psd(Q, "Q", false);
  require_psd(V, "V", false);
  require_psd(P0, "P0", false);
  require_psd(R, "R", strict);
  require_psd(W, "W", strict);
}

StateSpaceModel StateSpaceModel::scalar(double a, double b, double c, double q, double r, double v, double w) {
  StateSpaceModel m;
  m.A = Tensor::matrix({{a}});
  m.B = Tensor::matrix({{b}});
  m.C = Tensor::matrix({{c}});
  m.Q = Tensor::matrix({{q}});
  m.R = Tensor::matrix({{r}});
  m.V = Tensor::matrix({{v}});
  m.W = Tensor::matrix({{w}});
  m.z0 = Tensor::vector({0.0});
  m.P0 = Tensor::matrix({{0.0}});
  return m;
}

Policy zero_policy(std::size_t action_dim) {
  return [action_dim](std::size_t, const Tensor&) { return Tensor({action_dim}); };
}

Trajectory simulate(const StateSpaceModel& model, const Policy& policy, std::size_t T, std::uint64_t seed) {
  model.validate();
  if (T == 0) throw std::invalid_argument("trajectory length must be at least 1");
  const std::size_t n = model.state_dim(), p = model.action_dim(), q = model.obs_dim();
  const Tensor fv = psd_factor(model.V), fw = psd_factor(model.W), f0 = psd_factor(model.P0);
  Rng rng(seed);
  Trajectory traj{Tensor({T, n}), Tensor({T, q}), Tensor({T, p})};
  Tensor z = model.z0 + gaussian(rng, f0);
  Tensor s({p});
  for (std::size_t t = 0; t < T; ++t) {
    z = matmul(model.A, z) + matmul(model.B, s) + gaussian(rng, fv);
    const Tensor x = matmul(model.C, z) + gaussian(rng, fw);
    s = policy(t + 1, x);
    if (s.size() != p) throw ShapeError("policy returned " + shape_string(s.shape()) + " for action dim " + std::to_string(p));
    set_row(traj.Z, t, z);
    set_row(traj.X, t, x);
    set_row(traj.S, t, s);
  }
  return traj;
}

FilterState initial_filter_state(const StateSpaceModel& model) {
  return {model.z0, model.P0, Tensor({model.state_dim(), model.obs_dim()}), 0};
}

namespace {

Tensor predicted_mean(const StateSpaceModel& m, const FilterState& s, const Tensor& s_prev) {
  return matmul(m.A, s.z_hat) + matmul(m.B, s_prev.reshaped({m.action_dim()}));
}

Tensor joseph(const StateSpaceModel& m, const Tensor& Pm, const Tensor& gain) {
  const Tensor ikc = Tensor::identity(m.state_dim()) - matmul(gain, m.C);
  return symmetrize(matmul(ikc, matmul(Pm, transpose(ikc))) + matmul(gain, matmul(m.W, transpose(gain))));
}

}  // namespace

FilterState kalman_step(const StateSpaceModel& model, const FilterState& state, const Tensor& x_t, const Tensor& s_prev) {
  const Tensor Pm = symmetrize(matmul(model.A, matmul(state.P, transpose(model.A))) + model.V);
  const Tensor S = symmetrize(matmul(model.C, matmul(Pm, transpose(model.C))) + model.W);
  Tensor gain({model.state_dim(), model.obs_dim()});
  if (max_abs(S) > 0.0) {
    // L = Pm C^T S^{-1} = (S^{-1} C Pm)^T
    gain = transpose(solve_spd(S, matmul(model.C, Pm)));
  }
  return kalman_step_with_gain(model, state, x_t, s_prev, gain);
}

FilterState kalman_step_with_gain(const StateSpaceModel& model, const FilterState& state, const Tensor& x_t,
                                  const Tensor& s_prev, const Tensor& gain) {
  if (x_t.size() != model.obs_dim()) throw ShapeError("observation " + shape_string(x_t.shape()) + " vs C " + shape_string(model.C.shape()));
  const Tensor zp = predicted_mean(model, state, s_prev);
  const Tensor Pm = symmetrize(matmul(model.A, matmul(state.P, transpose(model.A))) + model.V);
  const Tensor innov = x_t.reshaped({model.obs_dim()}) - matmul(model.C, zp);
  return {zp + matmul(gain, innov), joseph(model, Pm, gain), gain, state.t + 1};
}

Tensor kalman_filter(const StateSpaceModel& model, const Trajectory& traj) {
  const std::size_t T = traj.length();
  Tensor out({T, model.state_dim()});
  FilterState st = initial_filter_state(model);
  Tensor s_prev({model.action_dim()});
  for (std::size_t t = 0; t < T; ++t) {
    st = kalman_step(model, st, row(traj.X, t), s_prev);
    set_row(out, t, st.z_hat);
    s_prev = row(traj.S, t);
  }
  return out;
}

std::vector<Tensor> kalman_gains(const StateSpaceModel& model, std::size_t T) {
  std::vector<Tensor> gains;
  FilterState st = initial_filter_state(model);
  const Tensor x({model.obs_dim()}), s({model.action_dim()});
  for (std::size_t t = 0; t < T; ++t) {
    st = kalman_step(model, st, x, s);
    gains.push_back(st.gain);
  }
  return gains;
}

double state_mse(const Tensor& estimates, const Tensor& truth) {
  if (estimates.size() != truth.size() || truth.size() == 0) throw ShapeError("estimate and truth sizes differ");
  double acc = 0.0;
  const auto a = estimates.data(), b = truth.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

std::vector<Tensor> lqr_gains(const StateSpaceModel& model, std::size_t horizon) {
  model.validate(false);
  std::vector<Tensor> gains(horizon);
  Tensor P = model.Q;
  for (std::size_t k = horizon; k-- > 0;) P = riccati_step(model, P, &gains[k]);
  return gains;
}

Tensor lqr_stationary_cost(const StateSpaceModel& model, double tol, int max_iter) {
  model.validate(false);
  Tensor P = model.Q;
  for (int it = 0; it < max_iter; ++it) {
    const Tensor next = riccati_step(model, P, nullptr);
    if (!next.all_finite()) break;
    const double change = max_abs_diff(next, P);
    P = next;
    if (change <= tol * std::max(1.0, max_abs(P))) return P;
  }
  throw NumericalError("Riccati iteration did not converge in " + std::to_string(max_iter) +
                       " iterations; (A, B) may not be stabilizable");
}

Tensor lqr_stationary_gain(const StateSpaceModel& model, double tol, int max_iter) {
  Tensor K;
  riccati_step(model, lqr_stationary_cost(model, tol, max_iter), &K);
  return K;
}

Tensor lqg_action(const Tensor& gain, const FilterState& state) { return scale(-1.0, matmul(gain, state.z_hat)); }

Policy lqg_policy(const StateSpaceModel& model, std::size_t horizon) {
  std::vector<Tensor> gains = horizon ? lqr_gains(model, horizon) : std::vector<Tensor>{lqr_stationary_gain(model)};
  struct Controller {
    StateSpaceModel model;
    std::vector<Tensor> gains;
    FilterState st;
    Tensor s_prev;
  };
  auto c = std::make_shared<Controller>(Controller{model, std::move(gains), initial_filter_state(model),
                                                   Tensor({model.action_dim()})});
  return [c](std::size_t t, const Tensor& x) {
    c->st = kalman_step(c->model, c->st, x, c->s_prev);
    const Tensor& K = c->gains.size() == 1 ? c->gains[0] : c->gains.at(std::min(t - 1, c->gains.size() - 1));
    c->s_prev = lqg_action(K, c->st);
    return c->s_prev;
  };
}

double quadratic_cost(const StateSpaceModel& model, const Trajectory& traj) {
  double acc = 0.0;
  for (std::size_t t = 0; t < traj.length(); ++t) {
    const Tensor z = row(traj.Z, t), s = row(traj.S, t);
    acc += dot(z, matmul(model.Q, z)) + dot(s, matmul(model.R, s));
  }
  return acc / static_cast<double>(traj.length());
}

Tensor mpc_plan(const StateSpaceModel& model, const Tensor& z_hat, std::size_t H, const MpcForecast& forecast) {
  model.validate(false);
  if (H == 0) throw std::invalid_argument("MPC horizon must be positive");
  const std::size_t n = model.state_dim(), p = model.action_dim();
  if (forecast.v_hat) require_shape(*forecast.v_hat, {H, n}, "v_hat");
  auto vhat = [&](std::size_t tau) { return forecast.v_hat ? row(*forecast.v_hat, tau) : Tensor({n}); };

  // value V_tau(z) = z^T P z + 2 g^T z + const, terminal P_H = Q, g_H = 0
  const Tensor bt = transpose(model.B), at = transpose(model.A);
  std::vector<Tensor> Ms(H), Ps(H + 1), gs(H + 1);
  Ps[H] = model.Q;
  gs[H] = Tensor({n});
  for (std::size_t tau = H; tau-- > 0;) {
    const Tensor& P = Ps[tau + 1];
    const Tensor M = symmetrize(model.R + matmul(bt, matmul(P, model.B)));
    const Cholesky chol(M);
    const Tensor pb = matmul(P, model.B);
    const Tensor G = symmetrize(P - matmul(pb, chol.solve(transpose(pb))));
    const Tensor g = gs[tau + 1] - matmul(pb, chol.solve(matmul(bt, gs[tau + 1])));
    Ms[tau] = M;
    Ps[tau] = symmetrize((tau > 0 ? model.Q : Tensor({n, n})) + matmul(at, matmul(G, model.A)));
    gs[tau] = matmul(at, matmul(G, vhat(tau)) + g);
  }
  Tensor plan({H, p});
  Tensor z = z_hat.reshaped({n});
  for (std::size_t tau = 0; tau < H; ++tau) {
    const Tensor w = matmul(model.A, z) + vhat(tau);
    const Tensor s = scale(-1.0, solve_spd(Ms[tau], matmul(bt, matmul(Ps[tau + 1], w) + gs[tau + 1])));
    set_row(plan, tau, s);
    z = w + matmul(model.B, s);
  }
  return plan;
}

Policy mpc_policy(const StateSpaceModel& model, std::size_t H) {
  struct Controller {
    StateSpaceModel model;
    std::size_t H;
    FilterState st;
    Tensor s_prev;
  };
  auto c = std::make_shared<Controller>(Controller{model, H, initial_filter_state(model), Tensor({model.action_dim()})});
  return [c](std::size_t, const Tensor& x) {
    c->st = kalman_step(c->model, c->st, x, c->s_prev);
    c->s_prev = mpc_plan(c->model, c->st.z_hat, c->H).slice(0);
    return c->s_prev;
  };
}

Tensor time_slice(const Tensor& stacked, std::span<const std::size_t> idx, std::size_t t) {
  const std::size_t T = stacked.extent(1), d = stacked.extent(2);
  Tensor out({d, idx.size()});
  const auto data = stacked.data();
  for (std::size_t b = 0; b < idx.size(); ++b)
    for (std::size_t j = 0; j < d; ++j) out(j, b) = data[(idx[b] * T + t) * d + j];
  return out;
}

Trajectory TrajectoryDataset::trajectory(std::size_t i) const {
  return {data.targets.slice(i), data.inputs.slice(i), actions.slice(i)};
}

TrajectoryDataset gen_trajectory_dataset(const StateSpaceModel& model, std::size_t T, std::size_t N,
                                         const std::function<Policy()>& policy_factory, std::uint64_t seed) {
  const std::size_t n = model.state_dim(), p = model.action_dim(), q = model.obs_dim();
  TrajectoryDataset out;
  out.T = T;
  out.data.inputs = Tensor({N, T, q});
  out.data.targets = Tensor({N, T, n});
  out.actions = Tensor({N, T, p});
  const Rng base(seed);
  for (std::size_t i = 0; i < N; ++i) {
    const Trajectory tr = simulate(model, policy_factory(), T, base.split(i).next_u64());
    std::copy(tr.X.data().begin(), tr.X.data().end(), out.data.inputs.data().begin() + static_cast<std::ptrdiff_t>(i * T * q));
    std::copy(tr.Z.data().begin(), tr.Z.data().end(), out.data.targets.data().begin() + static_cast<std::ptrdiff_t>(i * T * n));
    std::copy(tr.S.data().begin(), tr.S.data().end(), out.actions.data().begin() + static_cast<std::ptrdiff_t>(i * T * p));
  }
  assign_splits(out.data, seed);
  return out;
}

TrajectoryDataset gen_trajectory_dataset(const StateSpaceModel& model, std::size_t T, std::size_t N,
                                         const Policy& policy, std::uint64_t seed) {
  return gen_trajectory_dataset(model, T, N, std::function<Policy()>([policy] { return policy; }), seed);
}

namespace {

Tensor lower_mask(std::size_t n) {
  Tensor m({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = 1.0;
  return m;
}

Tensor factor_of(const Tensor& cov) {
  Tensor shifted = cov;
  for (std::size_t i = 0; i < cov.rows(); ++i) shifted(i, i) -= kCovEps;
  return psd_factor(symmetrize(shifted));
}

Tensor cov_from(const Tensor& L) {
  Tensor c = matmul(hadamard(L, lower_mask(L.rows())), transpose(hadamard(L, lower_mask(L.rows()))));
  for (std::size_t i = 0; i < c.rows(); ++i) c(i, i) += kCovEps;
  return c;
}

ad::Var cov_on_tape(ad::Tape& tape, const ad::Var& L) {
  const std::size_t n = L.value().rows();
  const ad::Var low = ad::multiply(L, tape.constant(lower_mask(n)));
  return ad::matmul(low, ad::transpose(low)) + tape.constant(scale(kCovEps, Tensor::identity(n)));
}

ad::Var sym(const ad::Var& P) { return ad::scale(0.5, P + ad::transpose(P)); }

}  // namespace

std::vector<Tensor> pack_covariances(const Tensor& V, const Tensor& W) { return {factor_of(V), factor_of(W)}; }

std::pair<Tensor, Tensor> unpack_covariances(const std::vector<Tensor>& packed) {
  return {cov_from(packed.at(0)), cov_from(packed.at(1))};
}

ad::Var filter_error_on_tape(ad::Tape& tape, const StateSpaceModel& model, const ad::Var& V, const ad::Var& W,
                             const TrajectoryDataset& data, std::span<const std::size_t> idx) {
  const std::size_t n = model.state_dim(), B = idx.size();
  const ad::Var A = tape.constant(model.A), At = tape.constant(transpose(model.A));
  const ad::Var Bm = tape.constant(model.B);
  const ad::Var C = tape.constant(model.C), Ct = tape.constant(transpose(model.C));
  const ad::Var I = tape.constant(Tensor::identity(n));
  ad::Var P = tape.constant(model.P0);
  Tensor z0({n, B});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < n; ++i) z0(i, b) = model.z0[i];
  ad::Var z = tape.constant(z0);
  ad::Var err = tape.constant(Tensor::scalar(0.0));
  for (std::size_t t = 0; t < data.T; ++t) {
    const ad::Var Pm = sym(ad::matmul(A, ad::matmul(P, At)) + V);
    const ad::Var S = sym(ad::matmul(C, ad::matmul(Pm, Ct)) + W);
    const ad::Var L = ad::transpose(ad::spd_solve(S, ad::matmul(C, Pm)));
    ad::Var zp = ad::matmul(A, z);
    if (t > 0) zp = zp + ad::matmul(Bm, tape.constant(time_slice(data.actions, idx, t - 1)));
    const ad::Var innov = tape.constant(time_slice(data.data.inputs, idx, t)) - ad::matmul(C, zp);
    z = zp + ad::matmul(L, innov);
    const ad::Var ikc = I - ad::matmul(L, C);
    P = sym(ad::matmul(ikc, ad::matmul(Pm, ad::transpose(ikc))) + ad::matmul(L, ad::matmul(W, ad::transpose(L))));
    err = err + ad::squared_norm(z - tape.constant(time_slice(data.data.targets, idx, t)));
  }
  return err;
}

double covariance_loss(const StateSpaceModel& model, const std::vector<Tensor>& packed, const TrajectoryDataset& data,
                       std::span<const std::size_t> idx, std::vector<Tensor>* grads) {
  ad::Tape tape;
  const ad::Var LV = grads ? tape.leaf(packed.at(0)) : tape.constant(packed.at(0));
  const ad::Var LW = grads ? tape.leaf(packed.at(1)) : tape.constant(packed.at(1));
  const ad::Var err = filter_error_on_tape(tape, model, cov_on_tape(tape, LV), cov_on_tape(tape, LW), data, idx);
  const double denom = static_cast<double>(idx.size() * data.T * model.state_dim());
  const ad::Var loss = ad::scale(1.0 / denom, err);
  if (grads) {
    const auto g = tape.backward(loss);
    *grads = {g[LV], g[LW]};
  }
  return loss.value().item();
}

CovarianceFit fit_covariances(const StateSpaceModel& model, const TrajectoryDataset& data, const TrainConfig& config) {
  model.validate(false);
  BatchObjective objective = [&](const std::vector<Tensor>& packed, std::span<const std::size_t> batch,
                                 std::vector<Tensor>* grads) { return covariance_loss(model, packed, data, batch, grads); };
  TrainResult report = train_loop(pack_covariances(model.V, model.W), objective, data.data.train,
                                  data.data.validation, config);
  auto [V, W] = unpack_covariances(report.params);
  return {std::move(V), std::move(W), std::move(report)};
}

}  // namespace mbdl
