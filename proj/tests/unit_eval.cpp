#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "diffsrl/eval.hpp"
#include "diffsrl/regulator.hpp"
#include "oracles.hpp"

using namespace diffsrl;
using namespace diffsrl::eval;

namespace {

sim::SceneConfig<double> contact_free_scene(size_t count = 48) {
  sim::SceneConfig<double> s;
  s.grid_res = 16;
  s.substeps = 5;
  s.dt = 2e-4;
  s.sampler.count = count;
  s.sampler.center = {0.5, 0.5, 0.5};
  s.sampler.half_extents = {0.06, 0.05, 0.06};
  s.sampler.seed = 5;
  // A far-away actuated sphere: contact never engages, but actions exist.
  geom::RigidPrimitive<double> ball;
  ball.kind = geom::ShapeKind::Sphere;
  ball.radius = 0.03;
  ball.trans = {0.15, 0.8, 0.15};
  ball.actuated = true;
  s.primitives.push_back(ball);
  s.target_offset = {0.06, 0, 0};
  return s;
}

std::string make_dataset(const sim::SceneConfig<double>& scene, size_t n_traj,
                         size_t length, uint64_t seed, const std::string& dir) {
  cfg::GenSettings gen;
  gen.n_traj = n_traj;
  gen.length = length;
  gen.seed = seed;
  gen.opt_iters = 2;
  train::generate_dataset(scene, gen, dir, 77);
  return dir;
}

}  // namespace

TEST_CASE("report statistics are recomputable from the per-sample values") {
  EvalReport r;
  r.metric = "x";
  r.values = {1.0, 2.0, 3.0, 4.0};
  r.finalize();
  CHECK(r.mean == doctest::Approx(2.5).epsilon(1e-12));
  double var = 0;
  for (double v : r.values) var += (v - r.mean) * (v - r.mean);
  CHECK(r.std_dev == doctest::Approx(std::sqrt(var / 4.0)).epsilon(1e-12));
}

TEST_CASE("csv and json outputs follow the documented schema") {
  EvalReport r;
  r.metric = "demo_metric";
  r.values = {0.5, 1.5};
  r.seed = 42;
  r.finalize();
  write_csv(r, "test_report.csv");
  std::ifstream csv("test_report.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "metric,sample,value");
  std::getline(csv, line);
  CHECK(line.rfind("demo_metric,0,", 0) == 0);

  write_json_summary({r}, "demo", "test_summary.json");
  std::ifstream jf("test_summary.json");
  nlohmann::json j = nlohmann::json::parse(jf);

  // Validate against the shipped schema: required keys with expected types.
  std::ifstream sf("../../schemas/summary.schema.json");
  if (!sf.good()) sf = std::ifstream(std::string(SOURCE_DIR) + "/schemas/summary.schema.json");
  nlohmann::json schema = nlohmann::json::parse(sf);
  CHECK(j.contains("command"));
  CHECK(j["command"].is_string());
  CHECK(j.contains("reports"));
  CHECK(j["reports"].is_array());
  for (const auto& key : schema["properties"]["reports"]["items"]["required"]) {
    CHECK(j["reports"][0].contains(key.get<std::string>()));
  }
  CHECK(j["reports"][0]["n"] == 2);
  CHECK(j["reports"][0]["config_hash"].get<std::string>().size() == 16);

  std::filesystem::remove("test_report.csv");
  std::filesystem::remove("test_summary.json");
}

TEST_CASE("oracle decode (ground-truth observation) reconstructs trajectories") {
  // Perfect reconstruction rolls out the true trajectory: the accumulated
  // chamfer metric vanishes on a contact-free scene.
  sim::SceneConfig<double> scene = contact_free_scene();
  std::string dir = make_dataset(scene, 6, 3, 11, "test_eval_ds1");
  train::Dataset d = train::load_dataset(dir, &scene, 0.5);

  sim::SceneConfig<float> scf = scene.cast<float>();
  sim::MpmSim<float> sim(scf);
  auto [b, e] = d.split("test");
  for (size_t traj = b; traj < e; traj++) {
    sim::FullState<float> gt0 = d.state_at<float>(traj, 0);
    auto obs0 = d.obs_at<float>(traj, 0);
    reg::RegulatedState<float> rs = reg::regulate(scf, gt0, obs0);
    double metric = double(metrics::chamfer(rs.state.x, obs0));
    sim::FullState<float> cur = rs.state;
    for (size_t i = 1; i <= d.length; i++) {
      cur = sim.step(cur, d.action_at<float>(traj, i - 1));
      metric += double(metrics::chamfer(cur.x, d.obs_at<float>(traj, i)));
    }
    CHECK(metric < 1e-6);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("eval_traj_recon reports per-sample metrics for a trained-less model") {
  sim::SceneConfig<double> scene = contact_free_scene();
  std::string dir = make_dataset(scene, 12, 3, 13, "test_eval_ds2");
  train::Dataset d = train::load_dataset(dir, &scene, 0.2);

  nn::ModelBundle<float> model;
  model.dims.d_latent = 16;
  model.dims.n_dec = int(d.particles);
  model.dims.action_dim = int(d.action_dim);
  nn::add_encoder(model, 3);
  nn::add_decoder(model, 4);

  EvalReport r = eval_traj_recon(scene, d, model, "test", 2);
  CHECK(r.values.size() + r.skipped == 1);
  if (!r.values.empty()) {
    CHECK(std::isfinite(r.mean));
    CHECK(r.mean > 0);  // untrained decode cannot be perfect
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("reward_mse: perfect predictor and variance identity") {
  std::vector<double> real{0.5, -1.0, 2.0, 0.25, -0.75};
  CHECK(reward_mse(real, real) == 0.0);

  double mean = 0;
  for (double v : real) mean += v;
  mean /= double(real.size());
  std::vector<double> constant(real.size(), mean);
  double variance = 0;
  for (double v : real) variance += (v - mean) * (v - mean);
  variance /= double(real.size());
  CHECK(reward_mse(constant, real) == doctest::Approx(variance).epsilon(1e-9));
}

TEST_CASE("eval_reward_pred fits a head and reports finite test error") {
  sim::SceneConfig<double> scene = contact_free_scene(32);
  std::string dir = make_dataset(scene, 12, 3, 17, "test_eval_ds3");
  train::Dataset d = train::load_dataset(dir, &scene, 0.2);

  nn::ModelBundle<float> enc;
  enc.dims.d_latent = 16;
  enc.dims.n_dec = int(d.particles);
  enc.dims.action_dim = int(d.action_dim);
  nn::add_encoder(enc, 5);

  RewardPredSettings rs;
  rs.fit_steps = 50;
  EvalReport r = eval_reward_pred(scene, d, enc, rs);
  CHECK(r.values.size() == 3);  // one test trajectory x 3 transitions
  CHECK(std::isfinite(r.mean));
  std::filesystem::remove_all(dir);
}

TEST_CASE("mbpo: zero horizon yields an empty curve and no optimizer step") {
  sim::SceneConfig<double> scene = contact_free_scene(32);
  nn::ModelBundle<float> enc;
  enc.dims.d_latent = 16;
  enc.dims.n_dec = 32;
  enc.dims.action_dim = int(scene.action_dim());
  nn::add_encoder(enc, 7);

  cfg::MbpoSettings ms;
  ms.epochs = 3;
  ms.horizon = 0;
  ms.seed = 1;
  MbpoResult r = run_mbpo(scene, enc, ms);
  CHECK(r.epoch_mean_reward.empty());
}

TEST_CASE("mbpo: policy gradients are finite and nonzero on a toy scene") {
  sim::SceneConfig<double> scene = contact_free_scene(32);
  nn::ModelBundle<float> enc;
  enc.dims.d_latent = 16;
  enc.dims.n_dec = 32;
  enc.dims.action_dim = int(scene.action_dim());
  nn::add_encoder(enc, 7);

  cfg::MbpoSettings ms;
  ms.epochs = 2;
  ms.horizon = 2;
  ms.seed = 3;
  ms.lr = 1e-3;
  MbpoResult r = run_mbpo(scene, enc, ms);
  REQUIRE(r.epoch_mean_reward.size() == 2);
  for (double v : r.epoch_mean_reward) CHECK(std::isfinite(v));

  // An optimizer step actually changed the policy (nonzero gradient).
  nn::ModelBundle<float> fresh;
  fresh.dims = r.policy.dims;
  nn::add_policy(fresh, ms.seed + 7);
  bool changed = false;
  for (size_t i = 0; i < fresh.params.tensors.size(); i++)
    for (size_t j = 0; j < fresh.params[i].data.size(); j++)
      changed |= fresh.params[i].data[j] != r.policy.params[i].data[j];
  CHECK(changed);
}

TEST_CASE("robustness: full point count reproduces the plain mbpo run") {
  sim::SceneConfig<double> scene = contact_free_scene(32);
  nn::ModelBundle<float> enc;
  enc.dims.d_latent = 16;
  enc.dims.n_dec = 32;
  enc.dims.action_dim = int(scene.action_dim());
  nn::add_encoder(enc, 9);

  cfg::MbpoSettings ms;
  ms.epochs = 2;
  ms.horizon = 2;
  ms.seed = 5;
  MbpoResult plain = run_mbpo(scene, enc, ms);
  auto curves = robustness_eval(scene, enc, {32, 16}, ms);
  REQUIRE(curves.size() == 2);
  REQUIRE(curves[0].epoch_mean_reward.size() == plain.epoch_mean_reward.size());
  for (size_t i = 0; i < plain.epoch_mean_reward.size(); i++)
    CHECK(curves[0].epoch_mean_reward[i] == plain.epoch_mean_reward[i]);
  for (double v : curves[1].epoch_mean_reward) CHECK(std::isfinite(v));

  CHECK_THROWS_AS(robustness_eval(scene, enc, {64}, ms), Error);
}

TEST_CASE("tracked-point baseline mode runs without an encoder") {
  sim::SceneConfig<double> scene = contact_free_scene(32);
  nn::ModelBundle<float> none;  // no encoder tensors at all
  cfg::MbpoSettings ms;
  ms.epochs = 1;
  ms.horizon = 2;
  ms.seed = 7;
  ms.track_points = 8;
  MbpoResult r = run_mbpo(scene, none, ms);
  CHECK(r.epoch_mean_reward.size() == 1);
  CHECK(std::isfinite(r.epoch_mean_reward[0]));
}

TEST_CASE("evaluation reports are deterministic for fixed inputs") {
  sim::SceneConfig<double> scene = contact_free_scene(32);
  std::string dir = make_dataset(scene, 8, 2, 23, "test_eval_ds4");
  train::Dataset d = train::load_dataset(dir, &scene, 0.3);
  nn::ModelBundle<float> model;
  model.dims.d_latent = 16;
  model.dims.n_dec = int(d.particles);
  model.dims.action_dim = int(d.action_dim);
  nn::add_encoder(model, 3);
  nn::add_decoder(model, 4);
  EvalReport a = eval_traj_recon(scene, d, model, "test", 1);
  EvalReport b = eval_traj_recon(scene, d, model, "test", 1);
  REQUIRE(a.values.size() == b.values.size());
  for (size_t i = 0; i < a.values.size(); i++) CHECK(a.values[i] == b.values[i]);
  std::filesystem::remove_all(dir);
}
