#include "mbdl/nonlinear.hpp"

#include <cmath>

#include "mbdl/error.hpp"
#include "mbdl/random.hpp"

namespace mbdl {

Dynamics linear_dynamics(const StateSpaceModel& model) {
  Dynamics d;
  d.n = model.state_dim();
  d.p = model.action_dim();
  d.q = model.obs_dim();
  d.C = model.C;
  const Tensor A = model.A, B = model.B;
  d.step = [A, B](const Tensor& z, const Tensor& s) {
    Tensor out = matmul(A, z);
    if (s.size() > 0) out = out + matmul(B, s);
    return out;
  };
  d.jacobian = [A](const Tensor&) { return A; };
  return d;
}

void NonlinearModel::validate() const {
  const std::size_t n = dynamics.n, q = dynamics.q;
  if (!dynamics.step || !dynamics.jacobian) throw std::invalid_argument("dynamics without a transition");
  if (dynamics.C.shape() != Tensor::Shape{q, n} || V.shape() != Tensor::Shape{n, n} ||
      W.shape() != Tensor::Shape{q, q} || z0.shape() != Tensor::Shape{n} || P0.shape() != Tensor::Shape{n, n}) {
    throw ShapeError("nonlinear model shapes do not match n=" + std::to_string(n) + ", q=" + std::to_string(q));
  }
}

Tensor lorenz_matrix(const Tensor& z, const LorenzParams& lp) {
  if (z.size() != 3) throw ShapeError("Lorenz state must have 3 entries");
  return Tensor::matrix({{-lp.sigma, lp.sigma, 0.0}, {lp.rho - z[2], -1.0, 0.0}, {z[1], 0.0, -lp.beta}});
}

Tensor lorenz_transition(const Tensor& z, double dt, int J, const LorenzParams& lp) {
  const Tensor M = scale(dt, lorenz_matrix(z, lp));
  Tensor term = z, out = z;
  for (int j = 1; j <= J; ++j) {
    term = scale(1.0 / j, matmul(M, term));
    out = out + term;
  }
  return out;
}

Tensor lorenz_transition_jacobian(const Tensor& z, double dt, int J, const LorenzParams& lp) {
  const Tensor M = scale(dt, lorenz_matrix(z, lp));
  // dM/dz_k: only z_2 (entry (2,0)) and z_3 (entry (1,0)) appear
  std::vector<Tensor> dM(3, Tensor({3, 3}));
  dM[1](2, 0) = dt;
  dM[2](1, 0) = -dt;

  // powers[j] = M^j z, mats[j] = M^j
  std::vector<Tensor> powers{z}, mats{Tensor::identity(3)};
  for (int j = 1; j <= J; ++j) {
    powers.push_back(matmul(M, powers.back()));
    mats.push_back(matmul(M, mats.back()));
  }
  Tensor jac({3, 3});
  double fact = 1.0;
  for (int j = 0; j <= J; ++j) {
    if (j > 0) fact *= j;
    // d(M^j z)/dz = M^j + sum_i M^i dM M^{j-1-i} z
    Tensor block = mats[j];
    for (std::size_t k = 0; k < 3; ++k) {
      if (k == 0) continue;
      for (int i = 0; i < j; ++i) {
        const Tensor col = matmul(mats[i], matmul(dM[k], powers[j - 1 - i]));
        for (std::size_t r = 0; r < 3; ++r) block(r, k) += col[r];
      }
    }
    jac = jac + scale(1.0 / fact, block);
  }
  return jac;
}

NonlinearModel lorenz_model(const LorenzConfig& cfg) {
  if (!(cfg.dt > 0.0) || cfg.J < 1 || cfg.substeps == 0) throw std::invalid_argument("Lorenz needs dt > 0, J >= 1, substeps >= 1");
  if (cfg.process_var < 0.0 || !(cfg.obs_var > 0.0)) throw std::invalid_argument("Lorenz noise variances out of range");
  NonlinearModel m;
  m.dynamics.n = 3;
  m.dynamics.p = 0;
  m.dynamics.q = 3;
  m.dynamics.C = Tensor::identity(3);
  const double h = cfg.dt / static_cast<double>(cfg.substeps);
  const int J = cfg.J;
  const std::size_t sub = cfg.substeps;
  const LorenzParams lp = cfg.params;
  m.dynamics.step = [h, J, sub, lp](const Tensor& z, const Tensor&) {
    Tensor out = z;
    for (std::size_t i = 0; i < sub; ++i) out = lorenz_transition(out, h, J, lp);
    return out;
  };
  m.dynamics.jacobian = [h, J, sub, lp](const Tensor& z) {
    Tensor cur = z, jac = Tensor::identity(3);
    for (std::size_t i = 0; i < sub; ++i) {
      jac = matmul(lorenz_transition_jacobian(cur, h, J, lp), jac);
      cur = lorenz_transition(cur, h, J, lp);
    }
    return jac;
  };
  m.V = scale(cfg.process_var, Tensor::identity(3));
  m.W = scale(cfg.obs_var, Tensor::identity(3));
  m.z0 = Tensor::vector({1.0, 1.0, 1.0});
  m.P0 = Tensor::identity(3);
  return m;
}

Trajectory simulate(const NonlinearModel& model, std::size_t T, std::uint64_t seed) {
  model.validate();
  if (T == 0) throw std::invalid_argument("trajectory length must be at least 1");
  const std::size_t n = model.dynamics.n, p = model.dynamics.p, q = model.dynamics.q;
  Rng rng(seed);
  const Tensor fv = psd_factor(model.V), fw = psd_factor(model.W), f0 = psd_factor(model.P0);
  Tensor z = model.z0 + matmul(f0, rng.normal_tensor({n}));
  const Tensor s({p});
  Trajectory out{Tensor({T, n}), Tensor({T, q}), Tensor({T, p})};
  for (std::size_t t = 0; t < T; ++t) {
    z = model.dynamics.step(z, s) + matmul(fv, rng.normal_tensor({n}));
    const Tensor x = matmul(model.dynamics.C, z) + matmul(fw, rng.normal_tensor({q}));
    for (std::size_t i = 0; i < n; ++i) out.Z(t, i) = z[i];
    for (std::size_t i = 0; i < q; ++i) out.X(t, i) = x[i];
  }
  return out;
}

TrajectoryDataset gen_trajectory_dataset(const NonlinearModel& model, std::size_t T, std::size_t N,
                                         std::uint64_t seed) {
  const std::size_t n = model.dynamics.n, p = model.dynamics.p, q = model.dynamics.q;
  TrajectoryDataset out;
  out.T = T;
  out.data.inputs = Tensor({N, T, q});
  out.data.targets = Tensor({N, T, n});
  out.actions = Tensor({N, T, p});
  const Rng base(seed);
  for (std::size_t i = 0; i < N; ++i) {
    const Trajectory tr = simulate(model, T, base.split(i).next_u64());
    std::copy(tr.X.data().begin(), tr.X.data().end(), out.data.inputs.data().begin() + static_cast<std::ptrdiff_t>(i * T * q));
    std::copy(tr.Z.data().begin(), tr.Z.data().end(), out.data.targets.data().begin() + static_cast<std::ptrdiff_t>(i * T * n));
  }
  assign_splits(out.data, seed);
  return out;
}

FilterState ekf_initial_state(const NonlinearModel& model) {
  model.validate();
  return {model.z0, model.P0, Tensor({model.dynamics.n, model.dynamics.q}), 0};
}

FilterState ekf_step(const NonlinearModel& model, const FilterState& state, const Tensor& x_t, const Tensor& s_prev) {
  const Tensor& C = model.dynamics.C;
  const Tensor F = model.dynamics.jacobian(state.z_hat);
  const Tensor zp = model.dynamics.step(state.z_hat, s_prev);
  const Tensor Pm = symmetrize(matmul(F, matmul(state.P, transpose(F))) + model.V);
  const Tensor S = symmetrize(matmul(C, matmul(Pm, transpose(C))) + model.W);
  Tensor gain;
  try {
    gain = transpose(solve_spd(S, matmul(C, Pm)));
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("EKF innovation covariance: ") + e.what());
  }
  FilterState next;
  next.z_hat = zp + matmul(gain, x_t - matmul(C, zp));
  const Tensor ikc = Tensor::identity(model.dynamics.n) - matmul(gain, C);
  next.P = symmetrize(matmul(ikc, matmul(Pm, transpose(ikc))) + matmul(gain, matmul(model.W, transpose(gain))));
  next.gain = gain;
  next.t = state.t + 1;
  return next;
}

Tensor ekf_filter(const NonlinearModel& model, const Trajectory& traj) {
  FilterState st = ekf_initial_state(model);
  const std::size_t T = traj.length();
  Tensor out({T, model.dynamics.n});
  Tensor s_prev({model.dynamics.p});
  for (std::size_t t = 0; t < T; ++t) {
    st = ekf_step(model, st, traj.X.slice(t), s_prev);
    for (std::size_t i = 0; i < model.dynamics.n; ++i) out(t, i) = st.z_hat[i];
    s_prev = traj.S.slice(t);
  }
  return out;
}

}  // namespace mbdl
