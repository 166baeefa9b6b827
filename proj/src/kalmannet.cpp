#include "mbdl/kalmannet.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mbdl/error.hpp"
#include "mbdl/tensor_io.hpp"

namespace mbdl {

namespace {

constexpr std::size_t kChunk = 8;  // columns per worker task

Tensor zeros_col(std::size_t d, std::size_t B) { return Tensor({d, B}); }

Tensor broadcast(const Tensor& v, std::size_t B) {
  Tensor out({v.size(), B});
  for (std::size_t r = 0; r < v.size(); ++r)
    for (std::size_t b = 0; b < B; ++b) out(r, b) = v[r];
  return out;
}

Tensor initial_columns(const Tensor& z0, std::size_t B) { return broadcast(z0, B); }

// Predicted means for every column; `S` holds s_{t-1} per column.
ad::Var predict_on_tape(const Dynamics& dyn, const ad::Var& z, const Tensor& S) {
  auto f = [&dyn, S](const Tensor& col, std::size_t b) { return dyn.step(col, S.cols() ? S.column(b) : Tensor({0})); };
  auto jac = [&dyn](const Tensor& col, std::size_t) { return dyn.jacobian(col); };
  return ad::map_columns(z, f, jac);
}

Tensor actions_before(const TrajectoryDataset& data, std::span<const std::size_t> idx, std::size_t t, std::size_t p) {
  if (t == 0 || p == 0) return Tensor({p, idx.size()});
  return time_slice(data.actions, idx, t - 1);
}

struct Carry {
  Tensor z;  // [n x B]
  Tensor h;  // [hidden x B]
};

// Runs steps [t0, t1) from `carry` and returns the summed squared error;
// the end state is written back to `carry` (detached).
ad::Var gain_window(ad::Tape& tape, const Dynamics& dyn, const GainNetwork& like, std::span<const ad::Var> w,
                    Carry& carry, const TrajectoryDataset& data, std::span<const std::size_t> idx, std::size_t t0,
                    std::size_t t1) {
  const std::size_t B = idx.size(), n = dyn.n, p = dyn.p;
  const ad::Var C = tape.constant(dyn.C);
  const ad::Var fscale = tape.constant(broadcast(like.feature_scale, B));
  ad::Var z = tape.constant(carry.z);
  ad::Var h = tape.constant(carry.h);
  ad::Var err = tape.constant(Tensor::scalar(0.0));
  for (std::size_t t = t0; t < t1; ++t) {
    const Tensor S = actions_before(data, idx, t, p);
    const ad::Var zp = predict_on_tape(dyn, z, S);
    const ad::Var x = tape.constant(time_slice(data.data.inputs, idx, t));
    const ad::Var innov = x - ad::matmul(C, zp);
    std::vector<ad::Var> parts{x};
    if (p > 0) parts.push_back(tape.constant(S));
    parts.push_back(innov);
    parts.push_back(z);
    const ad::Var feat = ad::multiply(ad::concatenate(parts), fscale);
    h = ad::tanh(ad::add_column(ad::matmul(w[0], feat) + ad::matmul(w[1], h), w[2]));
    const ad::Var gain = ad::add_column(ad::matmul(w[3], h), w[4]);
    z = zp + ad::batched_matvec(gain, innov, n);
    err = err + ad::squared_norm(z - tape.constant(time_slice(data.data.targets, idx, t)));
  }
  carry.z = z.value();
  carry.h = h.value();
  return err;
}

}  // namespace

GainNetwork GainNetwork::create(std::size_t n, std::size_t p, std::size_t q, std::size_t hidden, Rng& rng,
                                const std::optional<Tensor>& initial_gain) {
  if (n == 0 || q == 0 || hidden == 0) throw std::invalid_argument("gain network needs n, q, hidden >= 1");
  GainNetwork net;
  net.n = n;
  net.p = p;
  net.q = q;
  net.hidden = hidden;
  const std::size_t d = net.feature_dim();
  net.Wf = rng.normal_tensor({hidden, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  net.Wh = rng.normal_tensor({hidden, hidden}, 0.5 / std::sqrt(static_cast<double>(hidden)));
  net.bh = Tensor({hidden});
  net.Wo = rng.normal_tensor({n * q, hidden}, 0.01 / std::sqrt(static_cast<double>(hidden)));
  net.bo = Tensor({n * q});
  if (initial_gain) {
    if (initial_gain->shape() != Tensor::Shape{n, q}) throw ShapeError("initial gain must be n x q");
    net.bo = initial_gain->reshaped({n * q});
  }
  net.feature_scale = Tensor({d}, 1.0);
  return net;
}

void GainNetwork::validate() const {
  const std::size_t d = feature_dim();
  if (Wf.shape() != Tensor::Shape{hidden, d} || Wh.shape() != Tensor::Shape{hidden, hidden} ||
      bh.shape() != Tensor::Shape{hidden} || Wo.shape() != Tensor::Shape{n * q, hidden} ||
      bo.shape() != Tensor::Shape{n * q} || feature_scale.shape() != Tensor::Shape{d}) {
    throw ShapeError("gain network weights do not match n=" + std::to_string(n) + ", p=" + std::to_string(p) +
                     ", q=" + std::to_string(q) + ", hidden=" + std::to_string(hidden));
  }
}

std::vector<Tensor> GainNetwork::pack() const { return {Wf, Wh, bh, Wo, bo}; }

GainNetwork GainNetwork::unpack(const GainNetwork& like, std::span<const Tensor> packed) {
  if (packed.size() != 5) throw ShapeError("gain network expects 5 tensors");
  GainNetwork net = like;
  net.Wf = packed[0];
  net.Wh = packed[1];
  net.bh = packed[2];
  net.Wo = packed[3];
  net.bo = packed[4];
  net.validate();
  return net;
}

KalmanNetState kalmannet_initial_state(const GainNetwork& net, const Tensor& z0) {
  net.validate();
  if (z0.shape() != Tensor::Shape{net.n}) throw ShapeError("initial state must have " + std::to_string(net.n) + " entries");
  return {z0, Tensor({net.hidden}), Tensor({net.n, net.q}), 0};
}

KalmanNetState kalmannet_step(const Dynamics& dyn, const GainNetwork& net, const KalmanNetState& state,
                              const Tensor& x_t, const Tensor& s_prev) {
  if (dyn.n != net.n || dyn.q != net.q || dyn.p != net.p) throw ShapeError("gain network does not fit the dynamics");
  if (x_t.shape() != Tensor::Shape{net.q} || s_prev.size() != net.p) {
    throw ShapeError("observation " + shape_string(x_t.shape()) + " / action " + shape_string(s_prev.shape()));
  }
  const Tensor zp = dyn.step(state.z_hat, s_prev);
  const Tensor innov = x_t - matmul(dyn.C, zp);
  std::vector<Tensor> parts{x_t};
  if (net.p > 0) parts.push_back(s_prev.reshaped({net.p}));
  parts.push_back(innov);
  parts.push_back(state.z_hat);
  const Tensor feat = hadamard(concat_rows(parts), net.feature_scale);
  Tensor h = matmul(net.Wf, feat) + matmul(net.Wh, state.hidden) + net.bh;
  for (double& v : h.data()) v = std::tanh(v);
  const Tensor gain = (matmul(net.Wo, h) + net.bo).reshaped({net.n, net.q});
  return {zp + matmul(gain, innov), std::move(h), gain, state.t + 1};
}

Tensor kalmannet_filter(const Dynamics& dyn, const GainNetwork& net, const Tensor& z0, const Trajectory& traj) {
  KalmanNetState st = kalmannet_initial_state(net, z0);
  const std::size_t T = traj.length();
  Tensor out({T, net.n});
  Tensor s_prev({net.p});
  for (std::size_t t = 0; t < T; ++t) {
    st = kalmannet_step(dyn, net, st, traj.X.slice(t), s_prev);
    for (std::size_t i = 0; i < net.n; ++i) out(t, i) = st.z_hat[i];
    s_prev = traj.S.slice(t);
  }
  return out;
}

void calibrate_features(GainNetwork& net, const Dynamics& dyn, const TrajectoryDataset& data) {
  net.validate();
  const std::size_t d = net.feature_dim();
  std::vector<double> acc(d, 0.0);
  std::size_t count = 0;
  for (std::size_t i : data.data.train) {
    const Trajectory tr = data.trajectory(i);
    for (std::size_t t = 1; t < tr.length(); ++t) {
      const Tensor x = tr.X.slice(t), z_prev = tr.Z.slice(t - 1);
      const Tensor s = tr.S.slice(t - 1);
      const Tensor innov = x - matmul(dyn.C, dyn.step(z_prev, s));
      std::vector<Tensor> parts{x};
      if (net.p > 0) parts.push_back(s);
      parts.push_back(innov);
      parts.push_back(z_prev);
      const Tensor f = concat_rows(parts);
      for (std::size_t k = 0; k < d; ++k) acc[k] += f[k] * f[k];
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("feature calibration needs training trajectories of length >= 2");
  for (std::size_t k = 0; k < d; ++k) {
    const double rms = std::sqrt(acc[k] / static_cast<double>(count));
    net.feature_scale[k] = rms > 1e-8 ? 1.0 / rms : 1.0;
  }
}

double kalmannet_loss(const Dynamics& dyn, const GainNetwork& like, const std::vector<Tensor>& packed,
                      const Tensor& z0, const TrajectoryDataset& data, std::span<const std::size_t> idx,
                      std::size_t window, std::vector<Tensor>* grads) {
  if (idx.empty()) throw std::invalid_argument("kalmannet_loss on an empty index set");
  const GainNetwork net = GainNetwork::unpack(like, packed);
  const std::size_t T = data.T;
  const std::size_t span_len = window == 0 ? T : window;
  const std::size_t chunks = (idx.size() + kChunk - 1) / kChunk;
  std::vector<double> losses(chunks, 0.0);
  std::vector<std::vector<Tensor>> chunk_grads(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    const auto cols = idx.subspan(c * kChunk, std::min(kChunk, idx.size() - c * kChunk));
    Carry carry{initial_columns(z0, cols.size()), zeros_col(net.hidden, cols.size())};
    std::vector<Tensor> g;
    if (grads) {
      for (const Tensor& w : packed) g.push_back(Tensor::zeros_like(w));
    }
    for (std::size_t t0 = 0; t0 < T; t0 += span_len) {
      ad::Tape tape;
      std::vector<ad::Var> w;
      for (const Tensor& p : packed) w.push_back(grads ? tape.leaf(p) : tape.constant(p));
      const ad::Var err = gain_window(tape, dyn, net, w, carry, data, cols, t0, std::min(T, t0 + span_len));
      losses[c] += err.value().item();
      if (grads) {
        const auto back = tape.backward(err);
        for (std::size_t k = 0; k < w.size(); ++k) g[k] = g[k] + back[w[k]];
      }
    }
    chunk_grads[c] = std::move(g);
  });
  const double denom = static_cast<double>(idx.size() * T * dyn.n);
  double loss = 0.0;
  for (double l : losses) loss += l;
  if (grads) {
    grads->clear();
    for (const Tensor& w : packed) grads->push_back(Tensor::zeros_like(w));
    for (const auto& g : chunk_grads)
      for (std::size_t k = 0; k < g.size(); ++k) (*grads)[k] = axpy((*grads)[k], 1.0 / denom, g[k]);
  }
  return loss / denom;
}

KalmanNetFit train_kalmannet(const Dynamics& dyn, const GainNetwork& init, const Tensor& z0,
                             const TrajectoryDataset& data, const TrainConfig& config, std::size_t window) {
  init.validate();
  BatchObjective objective = [&](const std::vector<Tensor>& packed, std::span<const std::size_t> batch,
                                 std::vector<Tensor>* grads) {
    return kalmannet_loss(dyn, init, packed, z0, data, batch, grads ? window : 0, grads);
  };
  TrainResult report = train_loop(init.pack(), objective, data.data.train, data.data.validation, config);
  GainNetwork net = GainNetwork::unpack(init, report.params);
  return {std::move(net), std::move(report)};
}

double kalmannet_mse(const Dynamics& dyn, const GainNetwork& net, const Tensor& z0, const TrajectoryDataset& data,
                     Split split) {
  return kalmannet_loss(dyn, net, net.pack(), z0, data, data.data.indices(split), 0, nullptr);
}

void save_gain_network(const std::filesystem::path& dir, const GainNetwork& net) {
  net.validate();
  std::filesystem::create_directories(dir);
  const std::vector<std::pair<std::string, const Tensor*>> files{
      {"Wf.bin", &net.Wf}, {"Wh.bin", &net.Wh}, {"bh.bin", &net.bh},
      {"Wo.bin", &net.Wo}, {"bo.bin", &net.bo}, {"feature_scale.bin", &net.feature_scale}};
  for (const auto& [name, t] : files) write_tensor(dir / name, *t);
  nlohmann::json j{{"kind", "gain-network"}, {"n", net.n}, {"p", net.p}, {"q", net.q}, {"hidden", net.hidden}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw ConfigError("cannot write manifest in " + dir.string());
  out << j.dump(2) << '\n';
}

GainNetwork load_gain_network(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("no manifest.json in " + dir.string());
  GainNetwork net;
  try {
    const auto j = nlohmann::json::parse(in);
    const std::string kind = j.at("kind").get<std::string>();
    if (kind != "gain-network") throw ConfigError("manifest kind '" + kind + "' is not gain-network");
    net.n = j.at("n").get<std::size_t>();
    net.p = j.at("p").get<std::size_t>();
    net.q = j.at("q").get<std::size_t>();
    net.hidden = j.at("hidden").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad gain-network manifest: " + std::string(e.what()));
  }
  net.Wf = read_tensor(dir / "Wf.bin");
  net.Wh = read_tensor(dir / "Wh.bin");
  net.bh = read_tensor(dir / "bh.bin");
  net.Wo = read_tensor(dir / "Wo.bin");
  net.bo = read_tensor(dir / "bo.bin");
  net.feature_scale = read_tensor(dir / "feature_scale.bin");
  net.validate();
  return net;
}

FilterState feature_kalman_step(const StateSpaceModel& model, const Mlp& encoder, const FilterState& state,
                                const Tensor& x_t, const Tensor& s_prev) {
  const Tensor y = encoder.forward(x_t);
  if (y.shape() != Tensor::Shape{model.obs_dim()}) throw ShapeError("encoder output must match the observation size");
  return kalman_step(model, state, y, s_prev);
}

Tensor feature_kalman_filter(const StateSpaceModel& model, const Mlp& encoder, const Trajectory& traj) {
  FilterState st = initial_filter_state(model);
  const std::size_t T = traj.length(), n = model.state_dim();
  Tensor out({T, n});
  Tensor s_prev({model.action_dim()});
  for (std::size_t t = 0; t < T; ++t) {
    st = feature_kalman_step(model, encoder, st, traj.X.slice(t), s_prev);
    for (std::size_t i = 0; i < n; ++i) out(t, i) = st.z_hat[i];
    s_prev = traj.S.slice(t);
  }
  return out;
}

double feature_kalman_loss(const StateSpaceModel& model, const Mlp& like, const std::vector<Tensor>& packed,
                           const TrajectoryDataset& data, std::span<const std::size_t> idx,
                           std::vector<Tensor>* grads) {
  if (idx.empty()) throw std::invalid_argument("feature_kalman_loss on an empty index set");
  const std::size_t T = data.T, B = idx.size(), n = model.state_dim();
  const std::vector<Tensor> gains = kalman_gains(model, T);
  ad::Tape tape;
  std::vector<ad::Var> w;
  for (const Tensor& p : packed) w.push_back(grads ? tape.leaf(p) : tape.constant(p));
  const ad::Var A = tape.constant(model.A), Bm = tape.constant(model.B), C = tape.constant(model.C);
  ad::Var z = tape.constant(initial_columns(model.z0, B));
  ad::Var err = tape.constant(Tensor::scalar(0.0));
  for (std::size_t t = 0; t < T; ++t) {
    ad::Var zp = ad::matmul(A, z);
    if (t > 0 && model.action_dim() > 0) zp = zp + ad::matmul(Bm, tape.constant(time_slice(data.actions, idx, t - 1)));
    const ad::Var y = mlp_forward(like, w, tape.constant(time_slice(data.data.inputs, idx, t)));
    z = zp + ad::matmul(tape.constant(gains[t]), y - ad::matmul(C, zp));
    err = err + ad::squared_norm(z - tape.constant(time_slice(data.data.targets, idx, t)));
  }
  const ad::Var loss = ad::scale(1.0 / static_cast<double>(B * T * n), err);
  if (grads) {
    const auto g = tape.backward(loss);
    grads->clear();
    for (const ad::Var& v : w) grads->push_back(g[v]);
  }
  return loss.value().item();
}

EncoderFit train_feature_encoder(const StateSpaceModel& model, const Mlp& init, const TrajectoryDataset& data,
                                 const TrainConfig& config) {
  model.validate(true);
  if (init.input_dim() != model.obs_dim() || init.output_dim() != model.obs_dim()) {
    throw ShapeError("encoder must map observations to observations");
  }
  BatchObjective objective = [&](const std::vector<Tensor>& packed, std::span<const std::size_t> batch,
                                 std::vector<Tensor>* grads) {
    return feature_kalman_loss(model, init, packed, data, batch, grads);
  };
  TrainResult report = train_loop(init.pack(), objective, data.data.train, data.data.validation, config);
  Mlp enc = Mlp::unpack(init, report.params);
  return {std::move(enc), std::move(report)};
}

double feature_kalman_mse(const StateSpaceModel& model, const Mlp& encoder, const TrajectoryDataset& data,
                          Split split) {
  return feature_kalman_loss(model, encoder, encoder.pack(), data, data.data.indices(split), nullptr);
}

double split_mse(const TrajectoryDataset& data, Split split, const std::function<Tensor(const Trajectory&)>& filter) {
  const auto& idx = data.data.indices(split);
  if (idx.empty()) throw std::invalid_argument("split_mse on an empty split");
  double total = 0.0;
  for (std::size_t i : idx) {
    const Trajectory tr = data.trajectory(i);
    total += state_mse(filter(tr), tr.Z);
  }
  return total / static_cast<double>(idx.size());
}

}  // namespace mbdl
