#pragma once

#include <filesystem>
#include <optional>

#include "mbdl/nn.hpp"
#include "mbdl/nonlinear.hpp"

namespace mbdl {

/// Recurrent gain map: features [x_t, s_{t-1}, innovation, z_hat_{t-1}] (each
/// scaled) -> h = tanh(Wf f + Wh h + bh) -> gain = Wo h + bo as an n x q matrix.
struct GainNetwork {
  std::size_t n = 0, p = 0, q = 0, hidden = 32;
  Tensor Wf, Wh, bh;  // [h x d], [h x h], [h]
  Tensor Wo, bo;      // [nq x h], [nq]
  Tensor feature_scale;  // [d], fixed during training

  /// Small random weights; bo starts at `initial_gain` (default zero).
  static GainNetwork create(std::size_t n, std::size_t p, std::size_t q, std::size_t hidden, Rng& rng,
                            const std::optional<Tensor>& initial_gain = std::nullopt);

  std::size_t feature_dim() const { return 2 * q + p + n; }
  void validate() const;

  /// Wf, Wh, bh, Wo, bo.
  std::vector<Tensor> pack() const;
  static GainNetwork unpack(const GainNetwork& like, std::span<const Tensor> packed);
};

struct KalmanNetState {
  Tensor z_hat;   // [n]
  Tensor hidden;  // [h], reset to zero per trajectory
  Tensor gain;    // last gain [n x q]
  std::size_t t = 0;
};

KalmanNetState kalmannet_initial_state(const GainNetwork& net, const Tensor& z0);

/// z_hat = f(z_hat_prev, s_prev) + G (x_t - C f(z_hat_prev, s_prev)) with G from the network.
KalmanNetState kalmannet_step(const Dynamics& dyn, const GainNetwork& net, const KalmanNetState& state,
                              const Tensor& x_t, const Tensor& s_prev);
/// Posterior means [T x n].
Tensor kalmannet_filter(const Dynamics& dyn, const GainNetwork& net, const Tensor& z0, const Trajectory& traj);

/// Feature scales from training trajectories: 1 / RMS of x, s, the one-step
/// innovation at the true state, and z.
void calibrate_features(GainNetwork& net, const Dynamics& dyn, const TrajectoryDataset& data);

/// Mean squared state error per coordinate over `idx`, truncated BPTT in
/// windows of `window` steps (0 means the whole trajectory).
double kalmannet_loss(const Dynamics& dyn, const GainNetwork& like, const std::vector<Tensor>& packed,
                      const Tensor& z0, const TrajectoryDataset& data, std::span<const std::size_t> idx,
                      std::size_t window, std::vector<Tensor>* grads);

struct KalmanNetFit {
  GainNetwork net;
  TrainResult report;
};

KalmanNetFit train_kalmannet(const Dynamics& dyn, const GainNetwork& init, const Tensor& z0,
                             const TrajectoryDataset& data, const TrainConfig& config, std::size_t window = 50);

/// Mean state MSE of the KalmanNet filter over a split.
double kalmannet_mse(const Dynamics& dyn, const GainNetwork& net, const Tensor& z0, const TrajectoryDataset& data,
                     Split split);

void save_gain_network(const std::filesystem::path& dir, const GainNetwork& net);
GainNetwork load_gain_network(const std::filesystem::path& dir);

/// Kalman update on encoded observations: the encoder output replaces x_t.
FilterState feature_kalman_step(const StateSpaceModel& model, const Mlp& encoder, const FilterState& state,
                                const Tensor& x_t, const Tensor& s_prev);
Tensor feature_kalman_filter(const StateSpaceModel& model, const Mlp& encoder, const Trajectory& traj);

struct EncoderFit {
  Mlp encoder;
  TrainResult report;
};

/// Trains the encoder end to end through the filter (gains fixed by the model).
EncoderFit train_feature_encoder(const StateSpaceModel& model, const Mlp& init, const TrajectoryDataset& data,
                                 const TrainConfig& config);
double feature_kalman_loss(const StateSpaceModel& model, const Mlp& like, const std::vector<Tensor>& packed,
                           const TrajectoryDataset& data, std::span<const std::size_t> idx,
                           std::vector<Tensor>* grads);
double feature_kalman_mse(const StateSpaceModel& model, const Mlp& encoder, const TrajectoryDataset& data,
                          Split split);

/// Mean state MSE of any per-trajectory filter over a split.
double split_mse(const TrajectoryDataset& data, Split split, const std::function<Tensor(const Trajectory&)>& filter);

}  // namespace mbdl
