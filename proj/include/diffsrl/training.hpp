#pragma once

#include <array>
#include <string>
#include <vector>

#include "diffsrl/config.hpp"
#include "diffsrl/models.hpp"
#include "diffsrl/mpm.hpp"

namespace diffsrl::train {

// On-disk trajectory dataset: text manifest plus little-endian f32 blobs.
// States are stored for steps 0..L (inclusive), actions and rewards for the
// L transitions. Layout per blob: [traj, step, particle, coord].
class Dataset {
 public:
  size_t n_traj = 0;
  size_t length = 0;     // L
  size_t particles = 0;
  size_t action_dim = 0;
  size_t n_prims = 0;
  uint64_t seed = 0;
  uint64_t scene_hash = 0;
  size_t resample_count = 0;  // trajectories regenerated after sim failures

  std::vector<float> positions, velocities, defgrads, affines;  // [traj][L+1][N][3|9]
  std::vector<float> rigids;   // [traj][L+1][prims][3]
  std::vector<float> actions;  // [traj][L][action_dim]
  std::vector<float> rewards;  // [traj][L]
  std::vector<float> targets;  // [traj][N][3]

  // Trajectory index ranges [begin, end) for train/val/test (10:1:1).
  std::array<std::pair<size_t, size_t>, 3> splits;

  template <class Real>
  sim::FullState<Real> state_at(size_t traj, size_t step) const;
  template <class Real>
  metrics::PointCloud<Real> obs_at(size_t traj, size_t step) const;
  template <class Real>
  metrics::PointCloud<Real> target_of(size_t traj) const;
  template <class Real>
  sim::Action<Real> action_at(size_t traj, size_t step) const;
  double reward_at(size_t traj, size_t step) const;

  std::pair<size_t, size_t> split(const std::string& name) const;
};

// Reward shared by dataset generation and evaluation:
//   r = -c1 * chamfer(obs, target) - c2 * |manip - centroid(obs)|
// with c1 = 1, c2 = 0.1 and manip the first actuated primitive (term dropped
// when there is none).
template <class Real>
Real task_reward(const sim::SceneConfig<Real>& scene, const sim::FullState<Real>& state,
                 const metrics::PointCloud<Real>& target);

// Generates trajectories: `random_fraction` from uniform random actions, the
// rest by optimizing the action sequence through the differentiable simulator
// toward a randomized target. Simulation failures are resampled and counted.
void generate_dataset(const sim::SceneConfig<double>& scene, const cfg::GenSettings& gen,
                      const std::string& out_dir, uint64_t scene_hash = 0);

// Loads a dataset; replays a sampled fraction of trajectories and requires
// stored successors to match the simulator bit-identically.
Dataset load_dataset(const std::string& dir, const sim::SceneConfig<double>* scene,
                     double replay_check_fraction = 0.05);

double beta_schedule(int epoch, double beta0, double lambda);

template <class Real>
Real multi_step_loss(const std::vector<metrics::PointCloud<Real>>& ground_truth,
                     const std::vector<metrics::PointCloud<Real>>& rolled, Real gamma);

double total_loss(double multi_step, double constraint, double beta);

struct LossRow {
  int epoch = 0;
  int step = 0;  // optimizer step index, -1 for epoch summary rows
  double multi_step = 0, constraint = 0, total = 0, beta = 0;
};

struct LossReport {
  std::vector<LossRow> steps;
  std::vector<LossRow> epochs;
  std::vector<double> val_metric;  // per epoch
};

struct TrainResult {
  nn::ModelBundle<float> model;
  LossReport report;
};

// DiffSRL: encode -> decode -> regulate -> k-step rollout -> multi-step loss,
// total = (1-beta) * multi_step + beta * constraint with beta decaying per
// epoch. Writes a checkpoint per epoch to ckpt_path (resume picks it up).
TrainResult train_diffsrl(const Dataset& data, const sim::SceneConfig<double>& scene,
                          const cfg::TrainSettings& settings,
                          const std::string& ckpt_path = "", bool resume = false);

// Baselines: autoencoder (chamfer reconstruction), forward (latent MSE),
// inverse (action MSE). Encoder-only kinds get a decoder post-fitted with the
// encoder frozen.
TrainResult train_baseline(const std::string& kind, const Dataset& data,
                           const sim::SceneConfig<double>& scene,
                           const cfg::TrainSettings& settings,
                           const std::string& ckpt_path = "");

// Accumulated-chamfer reconstruction metric for one trajectory:
// sum_{i=0..k} chamfer(gt_i, rollout(regulate(decode(encode(obs_0))))_i).
template <class Real>
double recon_metric(const sim::MpmSim<Real>& sim, const Dataset& data,
                    const nn::ModelBundle<Real>& model, size_t traj, int k,
                    int emd_iters = 3000);

extern template double recon_metric(const sim::MpmSim<float>&, const Dataset&, const nn::ModelBundle<float>&, size_t, int, int);
extern template double recon_metric(const sim::MpmSim<double>&, const Dataset&, const nn::ModelBundle<double>&, size_t, int, int);

}  // namespace diffsrl::train
