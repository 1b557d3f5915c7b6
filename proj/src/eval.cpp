#include "diffsrl/eval.hpp"

#include <chrono>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "diffsrl/mpm_tape.hpp"
#include "diffsrl/optim.hpp"
#include "diffsrl/regulator.hpp"

namespace diffsrl::eval {

using json = nlohmann::json;

void EvalReport::finalize() {
  if (values.empty()) {
    mean = std_dev = 0;
    return;
  }
  double s = 0;
  for (double v : values) s += v;
  mean = s / double(values.size());
  double var = 0;
  for (double v : values) var += (v - mean) * (v - mean);
  std_dev = std::sqrt(var / double(values.size()));
}

void write_csv(const EvalReport& report, const std::string& path) {
  std::ofstream f(path);
  require(f.good(), "report: cannot open " + path);
  f << "metric,sample,value\n";
  f.precision(17);
  for (size_t i = 0; i < report.values.size(); i++)
    f << report.metric << "," << i << "," << report.values[i] << "\n";
  f << report.metric << ",mean," << report.mean << "\n";
  f << report.metric << ",std," << report.std_dev << "\n";
  require(f.good(), "report: write failed for " + path);
}

void write_json_summary(const std::vector<EvalReport>& reports,
                        const std::string& command, const std::string& path) {
  json j;
  j["command"] = command;
  j["reports"] = json::array();
  for (const auto& r : reports) {
    json e;
    e["metric"] = r.metric;
    e["n"] = r.values.size();
    e["mean"] = r.mean;
    e["std"] = r.std_dev;
    e["skipped"] = r.skipped;
    e["config_hash"] = format("%016llx", (unsigned long long)r.config_hash);
    e["dataset_hash"] = format("%016llx", (unsigned long long)r.dataset_hash);
    e["seed"] = r.seed;
    e["wall_time_s"] = r.wall_time_s;
    e["values"] = r.values;
    j["reports"].push_back(e);
  }
  std::ofstream f(path);
  require(f.good(), "report: cannot open " + path);
  f << j.dump(2) << "\n";
  require(f.good(), "report: write failed for " + path);
}

EvalReport eval_traj_recon(const sim::SceneConfig<double>& scene,
                           const train::Dataset& data,
                           const nn::ModelBundle<float>& model,
                           const std::string& split, int k, int emd_iters) {
  require(model.has_encoder() && model.has_decoder(),
          "eval-traj: model needs an encoder and a decoder");
  require(k >= 1 && size_t(k) <= data.length, "eval-traj: k out of range");
  auto t0 = std::chrono::steady_clock::now();

  sim::MpmSim<float> sim(scene.cast<float>());
  auto [begin, end] = data.split(split);
  EvalReport report;
  report.metric = "traj_recon_chamfer";
  report.dataset_hash = data.scene_hash;
  for (size_t traj = begin; traj < end; traj++) {
    try {
      report.values.push_back(train::recon_metric(sim, data, model, traj, k, emd_iters));
    } catch (const Error&) {
      report.skipped++;
    }
  }
  report.finalize();
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

double reward_mse(const std::vector<double>& predicted, const std::vector<double>& real) {
  require(predicted.size() == real.size() && !real.empty(),
          "reward_mse: size mismatch");
  double s = 0;
  for (size_t i = 0; i < real.size(); i++) {
    double d = predicted[i] - real[i];
    s += d * d;
  }
  return s / double(real.size());
}

EvalReport eval_reward_pred(const sim::SceneConfig<double>& scene,
                            const train::Dataset& data,
                            const nn::ModelBundle<float>& encoder,
                            const RewardPredSettings& settings) {
  require(encoder.has_encoder(), "eval-reward: model needs an encoder");
  (void)scene;
  auto t0 = std::chrono::steady_clock::now();

  // Latents with the encoder frozen: observation at step t+1 pairs with the
  // reward of transition t.
  auto collect = [&](const std::string& split, std::vector<std::vector<float>>& lats,
                     std::vector<double>& rewards) {
    auto [begin, end] = data.split(split);
    for (size_t traj = begin; traj < end; traj++) {
      for (size_t step = 0; step < data.length; step++) {
        lats.push_back(nn::encode(encoder, data.obs_at<float>(traj, step + 1)));
        rewards.push_back(data.reward_at(traj, step));
      }
    }
  };
  std::vector<std::vector<float>> train_lat, test_lat;
  std::vector<double> train_rew, test_rew;
  collect("train", train_lat, train_rew);
  collect("test", test_lat, test_rew);
  require(!train_lat.empty() && !test_lat.empty(), "eval-reward: empty split");

  nn::ModelBundle<float> head;
  head.dims = encoder.dims;
  nn::add_reward_head(head, settings.seed);
  nn::Adam<float> opt(head.params, settings.lr);
  size_t d = size_t(head.dims.d_latent);

  Pcg32 rng(settings.seed, 51);
  for (int step = 0; step < settings.fit_steps; step++) {
    ad::Tape<float> t;
    auto ids = nn::bind_params(t, head.params, true);
    ad::VarId acc = t.scalar_constant(0.0f);
    float w = 1.0f / float(settings.batch);
    for (int b = 0; b < settings.batch; b++) {
      size_t i = rng.uniform_int(uint32_t(train_lat.size()));
      ad::VarId l = t.constant(train_lat[i], 1, d);
      ad::VarId pred = nn::build_reward_head(t, head, ids, l);
      ad::VarId tgt = t.constant({float(train_rew[i])}, 1, 1);
      acc = ad::axpby(t, 1.0f, acc, w, ad::mean_sq_diff(t, pred, tgt));
    }
    t.backward_scalar(acc, 1.0f);
    std::vector<std::vector<float>> grads;
    for (auto id : ids) grads.push_back(t.grad(id));
    opt.step(head.params, grads);
  }

  EvalReport report;
  report.metric = "reward_pred_sq_err";
  report.seed = settings.seed;
  report.dataset_hash = data.scene_hash;
  for (size_t i = 0; i < test_lat.size(); i++) {
    double pred = double(nn::reward_head(head, test_lat[i]));
    double diff = pred - test_rew[i];
    report.values.push_back(diff * diff);
  }
  report.finalize();
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// MBPO
// ---------------------------------------------------------------------------

MbpoResult run_mbpo(const sim::SceneConfig<double>& scene_d,
                    const nn::ModelBundle<float>& encoder,
                    const cfg::MbpoSettings& settings, size_t subsample_count) {
  sim::SceneConfig<float> scene = scene_d.cast<float>();
  sim::MpmSim<float> sim(scene);
  require(settings.horizon >= 0, "mbpo: horizon must be >= 0");
  const size_t N = scene.sampler.count;
  const bool tracked = settings.track_points > 0;
  require(!tracked || settings.track_points <= N, "mbpo: track_points > N");
  require(subsample_count <= N, "mbpo: subsample count > N");
  if (!tracked)
    require(encoder.has_encoder(), "mbpo: model needs an encoder");

  sim::FullState<float> init = sim.initial_state();
  metrics::PointCloud<float> target(N);
  for (size_t p = 0; p < N; p++) target[p] = init.x[p] + scene.target_offset;

  // Observation feature index sets, drawn once per run.
  Pcg32 idx_rng(settings.seed, 61);
  std::vector<uint32_t> obs_idx;
  if (subsample_count > 0 && subsample_count < N) {
    std::vector<uint32_t> all(N);
    std::iota(all.begin(), all.end(), 0);
    for (size_t i = 0; i < subsample_count; i++)
      std::swap(all[i], all[i + idx_rng.uniform_int(uint32_t(N - i))]);
    obs_idx.assign(all.begin(), all.begin() + long(subsample_count));
  }
  std::vector<uint32_t> track_idx;
  if (tracked) {
    std::vector<uint32_t> all(N);
    std::iota(all.begin(), all.end(), 0);
    for (size_t i = 0; i < settings.track_points; i++)
      std::swap(all[i], all[i + idx_rng.uniform_int(uint32_t(N - i))]);
    track_idx.assign(all.begin(), all.begin() + long(settings.track_points));
  }

  // Policy feature dimensionality: latent features or raw tracked points.
  int feat_dim = tracked ? int(3 * settings.track_points) : encoder.dims.d_latent;
  int n_act = scene.num_actuated();
  require(n_act >= 1, "mbpo: scene has no actuated primitive");

  nn::ModelBundle<float> policy;
  policy.dims.d_latent = feat_dim;
  policy.dims.action_dim = int(scene.action_dim());
  policy.dims.manip_feat = 3 * n_act;
  policy.dims.n_dec = encoder.dims.n_dec;
  nn::add_policy(policy, settings.seed + 7);

  // Target feature is constant across the run.
  std::vector<float> target_feat;
  if (tracked) {
    for (uint32_t i : track_idx)
      for (int c = 0; c < 3; c++) target_feat.push_back(target[i][c]);
  } else {
    metrics::PointCloud<float> tgt_obs = target;
    if (!obs_idx.empty()) {
      tgt_obs.clear();
      for (uint32_t i : obs_idx) tgt_obs.push_back(target[i]);
    }
    target_feat = nn::encode(encoder, tgt_obs);
  }

  std::vector<float> manip0;
  for (const auto& prim : scene.primitives)
    if (prim.actuated)
      for (int c = 0; c < 3; c++) manip0.push_back(prim.trans[c]);

  // Gaussian-kernel progress reward r = exp(-(mean_chamfer + 0.1 dist)/sigma0)
  // with sigma0 the initial cost: positive, bounded by 1, and epoch-over-epoch
  // ratios measure real progress toward the target.
  const float inv_points = 1.0f / float(2 * N);
  float sigma0;
  {
    float ch0 = metrics::chamfer(init.x, target) * inv_points;
    Vec3<float> centroid0{0, 0, 0};
    for (const auto& x : init.x) centroid0 += x;
    centroid0 = centroid0 / float(N);
    Vec3<float> m0{manip0[0], manip0[1], manip0[2]};
    sigma0 = std::max(1e-6f, ch0 + 0.1f * (m0 - centroid0).norm());
  }

  nn::Adam<float> opt(policy.params, settings.lr);
  MbpoResult out;
  const float T = scene.dt * float(scene.substeps);

  for (int epoch = 0; epoch < settings.epochs; epoch++) {
    if (settings.horizon == 0) break;  // degenerate: empty curve, no step
    ad::Tape<float> t;
    auto pol_ids = nn::bind_params(t, policy.params, true);
    auto enc_ids = tracked ? std::vector<ad::VarId>{}
                           : nn::bind_params(t, encoder.params, false);
    ad::VarId target_feat_var = t.constant(target_feat, 1, target_feat.size());
    ad::VarId tgt_cloud = t.constant(metrics::flat_from_cloud(target), N, 3);

    sim::SimStateVars sv = sim::state_constants(t, init);
    std::vector<Vec3<float>> rigid = init.rigid_trans;
    float time = 0;
    ad::VarId manip = t.constant(manip0, 1, manip0.size());
    ad::VarId reward_sum = t.scalar_constant(0.0f);

    for (int h = 0; h < settings.horizon; h++) {
      ad::VarId obs_var = sv.x;
      if (!obs_idx.empty()) obs_var = ad::gather_rows(t, sv.x, obs_idx);
      ad::VarId feat;
      if (tracked) {
        ad::VarId pts = ad::gather_rows(t, sv.x, track_idx);
        feat = ad::reshape(t, pts, 1, 3 * settings.track_points);
      } else {
        feat = nn::build_encoder(t, encoder, enc_ids, obs_var);
      }
      ad::VarId action = nn::build_policy(t, policy, pol_ids, feat, manip,
                                          target_feat_var, scene.action_max);

      sim::Action<float> act_vals = t.val(action);
      std::vector<Vec3<float>> rigid_next;
      sv = sim::sim_step_op(t, sim, sv, rigid, time, act_vals, action, &rigid_next);
      rigid = rigid_next;
      time += T;

      // Kinematic manipulator chain stays differentiable on the tape.
      manip = ad::axpby(t, 1.0f, manip, T, action);

      // r = exp(-(mean_chamfer + 0.1 |manip_first - centroid|) / sigma0)
      ad::VarId cd = metrics::chamfer_op(t, sv.x, tgt_cloud);
      ad::VarId centroid = ad::mean_rows(t, sv.x);
      ad::VarId manip_first = ad::slice_cols(t, manip, 0, 3);
      ad::VarId dist = ad::vec_norm(t, ad::axpby(t, 1.0f, manip_first, -1.0f, centroid));
      ad::VarId cost = ad::axpby(t, inv_points, cd, 0.1f, dist);
      ad::VarId r = ad::exp_op(t, ad::scale(t, cost, -1.0f / sigma0));
      reward_sum = ad::axpby(t, 1.0f, reward_sum, 1.0f, r);
    }

    ad::VarId loss = ad::scale(t, reward_sum, -1.0f);
    t.backward_scalar(loss, 1.0f);
    std::vector<std::vector<float>> grads;
    for (auto id : pol_ids) grads.push_back(t.grad(id));
    opt.step(policy.params, grads, 1.0);
    out.epoch_mean_reward.push_back(double(t.scalar(reward_sum)) /
                                    double(settings.horizon));
  }
  out.policy = policy;
  return out;
}

std::vector<MbpoResult> robustness_eval(const sim::SceneConfig<double>& scene,
                                        const nn::ModelBundle<float>& encoder,
                                        const std::vector<size_t>& counts,
                                        const cfg::MbpoSettings& settings) {
  for (size_t c : counts)
    require(c <= scene.sampler.count,
            format("robustness: count %zu exceeds particle count %zu", c,
                   scene.sampler.count));
  std::vector<MbpoResult> out;
  for (size_t c : counts) {
    size_t sub = (c == scene.sampler.count) ? 0 : c;
    out.push_back(run_mbpo(scene, encoder, settings, sub));
  }
  return out;
}

}  // namespace diffsrl::eval
