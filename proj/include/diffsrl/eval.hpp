#pragma once

#include <string>
#include <vector>

#include "diffsrl/training.hpp"

namespace diffsrl::eval {

struct EvalReport {
  std::string metric;
  std::vector<double> values;  // per sample, stable order
  double mean = 0, std_dev = 0;
  size_t skipped = 0;  // samples excluded after simulator failure
  uint64_t config_hash = 0;
  uint64_t dataset_hash = 0;
  uint64_t seed = 0;
  double wall_time_s = 0;

  void finalize();
};

void write_csv(const EvalReport& report, const std::string& path);
void write_json_summary(const std::vector<EvalReport>& reports,
                        const std::string& command, const std::string& path);

// Trajectory reconstruction: per test sample, encode -> decode -> regulate ->
// k-step rollout with ground-truth actions; metric is the accumulated chamfer
// distance. Simulator failures flag the sample, exclude it and count it.
EvalReport eval_traj_recon(const sim::SceneConfig<double>& scene,
                           const train::Dataset& data,
                           const nn::ModelBundle<float>& model,
                           const std::string& split, int k, int emd_iters = 3000);

// Reward prediction: fits a reward head on train-split latents with the
// encoder frozen, reports test MSE.
struct RewardPredSettings {
  int fit_steps = 600;
  int batch = 32;
  double lr = 1e-3;
  uint64_t seed = 1;
};
EvalReport eval_reward_pred(const sim::SceneConfig<double>& scene,
                            const train::Dataset& data,
                            const nn::ModelBundle<float>& encoder,
                            const RewardPredSettings& settings = {});

// Mean squared error of predictions against real rewards (exposed so trivial
// predictor baselines are testable against the same metric path).
double reward_mse(const std::vector<double>& predicted, const std::vector<double>& real);

// Model-based policy optimization through the differentiable simulator with a
// frozen encoder. The per-epoch mean reward uses the shifted task reward
// 1 + r so the curve is positive. subsample_count > 0 restricts observations
// to that many tracked points before encoding (robustness mode);
// track_points > 0 in settings switches to the raw tracked-point baseline.
struct MbpoResult {
  std::vector<double> epoch_mean_reward;
  nn::ModelBundle<float> policy;
};
MbpoResult run_mbpo(const sim::SceneConfig<double>& scene,
                    const nn::ModelBundle<float>& encoder,
                    const cfg::MbpoSettings& settings, size_t subsample_count = 0);

// Runs MBPO at each observation point count; one curve per count. Counts must
// not exceed the scene's particle count.
std::vector<MbpoResult> robustness_eval(const sim::SceneConfig<double>& scene,
                                        const nn::ModelBundle<float>& encoder,
                                        const std::vector<size_t>& counts,
                                        const cfg::MbpoSettings& settings);

}  // namespace diffsrl::eval
