#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "diffsrl.h"

namespace {

std::string write_micro_scene() {
  std::string path = "capi_scene.cfg";
  std::ofstream f(path);
  f << "[grid]\nresolution = 16\ndt = 1e-4\nsubsteps = 5\n"
    << "[particles]\nkind = blob\ncenter = 0.5 0.45 0.5\n"
    << "half_extents = 0.06 0.05 0.06\ncount = 24\nseed = 3\n"
    << "[primitive.0]\nshape = sphere\nradius = 0.05\nposition = 0.4 0.45 0.5\n"
    << "actuated = true\n"
    << "[task]\ntarget_offset = 0.05 0 0\n"
    << "[data]\ntrajectories = 8\nlength = 2\nseed = 5\nopt_iters = 2\n"
    << "[train]\nk = 1\nepochs = 1\nlr = 1e-3\nd_latent = 16\nval_samples = 1\n"
    << "[gradcheck]\nsteps = 2\nseed = 9\n";
  return path;
}

}  // namespace

TEST_CASE("scene lifecycle, stepping, and error reporting") {
  dsrl_scene* scene = nullptr;
  CHECK(dsrl_scene_open("does_not_exist.cfg", &scene) != DSRL_OK);
  CHECK(std::strlen(dsrl_last_error()) > 0);

  std::string path = write_micro_scene();
  REQUIRE(dsrl_scene_open(path.c_str(), &scene) == DSRL_OK);
  CHECK(dsrl_scene_particle_count(scene) == 24);
  CHECK(dsrl_scene_action_dim(scene) == 3);
  CHECK(dsrl_scene_primitive_count(scene) == 1);

  dsrl_state* state = nullptr;
  REQUIRE(dsrl_scene_initial_state(scene, &state) == DSRL_OK);
  CHECK(dsrl_state_particle_count(state) == 24);
  std::vector<double> xyz(24 * 3);
  REQUIRE(dsrl_state_positions(state, xyz.data(), xyz.size()) == DSRL_OK);
  for (double v : xyz) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK(dsrl_state_positions(state, xyz.data(), 3) == DSRL_ERR_INVALID_ARGUMENT);

  double action[3] = {0.3, 0.0, 0.0};
  dsrl_state* next = nullptr;
  REQUIRE(dsrl_step(scene, state, action, 3, &next) == DSRL_OK);
  std::vector<double> xyz2(24 * 3);
  REQUIRE(dsrl_state_positions(next, xyz2.data(), xyz2.size()) == DSRL_OK);
  bool moved = false;
  for (size_t i = 0; i < xyz.size(); i++) moved |= xyz[i] != xyz2[i];
  CHECK(moved);  // gravity alone moves the blob

  CHECK(dsrl_step(scene, state, action, 2, &next) != DSRL_OK);

  dsrl_state_close(next);
  dsrl_state_close(state);
  dsrl_scene_close(scene);
  std::filesystem::remove(path);
}

TEST_CASE("sdf, chamfer and matching through the C surface") {
  std::string path = write_micro_scene();
  dsrl_scene* scene = nullptr;
  REQUIRE(dsrl_scene_open(path.c_str(), &scene) == DSRL_OK);

  double pt[3] = {0.5, 0.45, 0.5};  // 0.1 from the sphere center at 0.4
  double dist = 0, grad[3];
  REQUIRE(dsrl_sdf_eval(scene, 0, pt, &dist, grad) == DSRL_OK);
  CHECK(dist == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(grad[0] == doctest::Approx(1.0));
  CHECK(dsrl_sdf_eval(scene, 5, pt, &dist, grad) == DSRL_ERR_INVALID_ARGUMENT);

  double a[3] = {0, 0, 0};
  double b[3] = {1, 0, 0};
  double cd = 0;
  REQUIRE(dsrl_chamfer(a, 1, b, 1, &cd) == DSRL_OK);
  CHECK(cd == doctest::Approx(2.0));

  double cloud_a[12] = {0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.3, 0.1, 0.4, 0.7, 0.6, 0.5};
  double cloud_b[12] = {0.3, 0.1, 0.4, 0.7, 0.6, 0.5, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2};
  uint32_t perm[4];
  double cost = 0;
  REQUIRE(dsrl_emd_match(cloud_a, cloud_b, 4, 0, perm, &cost) == DSRL_OK);
  CHECK(cost < 1e-9);
  CHECK(perm[0] == 2);
  CHECK(perm[1] == 3);
  CHECK(perm[2] == 0);
  CHECK(perm[3] == 1);

  dsrl_scene_close(scene);
  std::filesystem::remove(path);
}

TEST_CASE("pipeline: gen-data, train, eval, reports, grad-check") {
  std::string path = write_micro_scene();
  std::string data_dir = "capi_data_tmp";
  REQUIRE(dsrl_gen_data(path.c_str(), nullptr, data_dir.c_str()) == DSRL_OK);
  CHECK(std::filesystem::exists(data_dir + "/manifest.txt"));

  dsrl_report* report = nullptr;
  REQUIRE(dsrl_train(path.c_str(), nullptr, data_dir.c_str(), "capi_model.ckpt", 0,
                     -1, &report) == DSRL_OK);
  REQUIRE(report != nullptr);
  CHECK(dsrl_report_count(report) == 4);
  char name[64];
  REQUIRE(dsrl_report_name(report, 0, name, sizeof(name)) == DSRL_OK);
  CHECK(std::string(name) == "train_multi_step");
  double mean = 0, sd = 0;
  size_t n = 0;
  REQUIRE(dsrl_report_stats(report, 2, &mean, &sd, &n) == DSRL_OK);
  CHECK(n == 1);  // one epoch
  CHECK(std::isfinite(mean));
  dsrl_report_close(report);

  report = nullptr;
  REQUIRE(dsrl_eval_traj(path.c_str(), nullptr, data_dir.c_str(), "capi_model.ckpt",
                         1, &report) == DSRL_OK);
  REQUIRE(dsrl_report_count(report) == 1);
  REQUIRE(dsrl_report_write_csv(report, 0, "capi_eval.csv") == DSRL_OK);
  REQUIRE(dsrl_report_write_json(report, "eval-traj", "capi_eval.json") == DSRL_OK);
  CHECK(std::filesystem::exists("capi_eval.csv"));
  CHECK(std::filesystem::exists("capi_eval.json"));
  std::ifstream csv("capi_eval.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "metric,sample,value");
  dsrl_report_close(report);

  double err = 1e9;
  REQUIRE(dsrl_grad_check(path.c_str(), &err) == DSRL_OK);
  CHECK(err < 1e-4);

  std::filesystem::remove_all(data_dir);
  std::filesystem::remove("capi_model.ckpt");
  std::filesystem::remove("capi_model.ckpt.state");
  std::filesystem::remove("capi_eval.csv");
  std::filesystem::remove("capi_eval.json");
  std::filesystem::remove(path);
}
