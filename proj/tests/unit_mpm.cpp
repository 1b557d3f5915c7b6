#include <doctest.h>

#include "diffsrl/mpm.hpp"
#include "oracles.hpp"

using namespace diffsrl;
using namespace diffsrl::sim;

namespace {

SceneConfig<double> interior_scene(int grid, size_t count, uint64_t seed) {
  SceneConfig<double> s;
  s.grid_res = grid;
  s.dt = 1e-4;
  s.substeps = 2;
  s.gravity = {0, 0, 0};
  s.sampler.center = {0.5, 0.5, 0.5};
  s.sampler.half_extents = {0.08, 0.08, 0.08};
  s.sampler.count = count;
  s.sampler.seed = seed;
  return s;
}

FullState<double> randomized_state(const MpmSim<double>& sim, uint64_t seed,
                                   double vel_scale, double strain_scale) {
  FullState<double> st = sim.initial_state();
  Pcg32 rng(seed, 3);
  for (size_t p = 0; p < st.size(); p++) {
    st.v[p] = {rng.uniform(-vel_scale, vel_scale), rng.uniform(-vel_scale, vel_scale),
               rng.uniform(-vel_scale, vel_scale)};
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) {
        st.F[p](i, j) += strain_scale * rng.uniform(-1, 1);
        st.C[p](i, j) = 0.5 * strain_scale * rng.uniform(-1, 1);
      }
  }
  st.validate();
  return st;
}

// Loss = <adj, outputs>; finite differences of this scalar against the
// adjoint returned by step_backward.
struct StepFdHarness {
  const MpmSim<double>& sim;
  FullState<double> state;
  Action<double> action;
  StateAdjoint<double> out_adj;

  double loss(const FullState<double>& st, const Action<double>& act) const {
    FullState<double> out = sim.step(st, act);
    double l = 0;
    for (size_t p = 0; p < out.size(); p++) {
      l += out_adj.x[p].dot(out.x[p]) + out_adj.v[p].dot(out.v[p]);
      l += out_adj.F[p].frob_inner(out.F[p]) + out_adj.C[p].frob_inner(out.C[p]);
    }
    return l;
  }

  StateAdjoint<double> analytic(std::vector<double>* act_adj = nullptr) const {
    StateAdjoint<double> in_adj = StateAdjoint<double>::zeros(state.size());
    sim.step_backward(state, action, out_adj, in_adj, act_adj);
    return in_adj;
  }
};

StateAdjoint<double> random_adjoint(size_t n, uint64_t seed) {
  StateAdjoint<double> a = StateAdjoint<double>::zeros(n);
  Pcg32 rng(seed, 5);
  for (size_t p = 0; p < n; p++) {
    a.x[p] = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    a.v[p] = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) {
        a.F[p](i, j) = rng.uniform(-1, 1);
        a.C[p](i, j) = rng.uniform(-1, 1);
      }
  }
  return a;
}

double check_state_grad(StepFdHarness& h, double hstep, double* worst = nullptr) {
  StateAdjoint<double> g = h.analytic();
  double max_err = 0;
  size_t n = h.state.size();
  auto probe = [&](double* slot, double analytic_val) {
    double saved = *slot;
    *slot = saved + hstep;
    double fp = h.loss(h.state, h.action);
    *slot = saved - hstep;
    double fm = h.loss(h.state, h.action);
    *slot = saved;
    double num = (fp - fm) / (2 * hstep);
    max_err = std::max(max_err, oracles::rel_err(analytic_val, num));
    if (worst && max_err == oracles::rel_err(analytic_val, num)) *worst = num;
  };
  for (size_t p = 0; p < n; p++) {
    for (int c = 0; c < 3; c++) {
      probe(&h.state.x[p][c], g.x[p][c]);
      probe(&h.state.v[p][c], g.v[p][c]);
    }
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) {
        probe(&h.state.F[p](i, j), g.F[p](i, j));
        probe(&h.state.C[p](i, j), g.C[p](i, j));
      }
  }
  return max_err;
}

}  // namespace

TEST_CASE("free flight advances positions by v*dt and leaves velocities") {
  SceneConfig<double> scene = interior_scene(32, 64, 7);
  scene.substeps = 20;
  scene.dt = 2e-4;
  MpmSim<double> sim(scene);
  FullState<double> st = sim.initial_state();
  Vec3<double> v{0.25, -0.1, 0.15};
  for (size_t p = 0; p < st.size(); p++) st.v[p] = v;
  FullState<double> out = sim.step(st, {});
  double T = scene.dt * scene.substeps;
  for (size_t p = 0; p < st.size(); p++) {
    Vec3<double> expect = st.x[p] + v * T;
    CHECK((out.x[p] - expect).norm() < 1e-12);
    CHECK((out.v[p] - v).norm() < 1e-12);
  }
}

TEST_CASE("gravity adds g*dt per substep to an at-rest state") {
  SceneConfig<double> scene = interior_scene(32, 32, 9);
  scene.substeps = 1;
  scene.gravity = {0, -9.8, 0};
  MpmSim<double> sim(scene);
  FullState<double> st = sim.initial_state();
  FullState<double> out = sim.step(st, {});
  for (size_t p = 0; p < st.size(); p++) {
    CHECK(out.v[p].x == doctest::Approx(0).epsilon(1e-12));
    CHECK(out.v[p].y == doctest::Approx(-9.8 * scene.dt).epsilon(1e-10));
  }
}

TEST_CASE("mass and momentum conserved across P2G") {
  SceneConfig<double> scene = interior_scene(32, 128, 13);
  scene.substeps = 10;
  MpmSim<double> sim(scene);
  FullState<double> st = randomized_state(sim, 21, 0.3, 0.02);
  double worst_mass = 0, worst_mom = 0;
  sim.conservation_probe = [&](const ConservationSample<double>& cs) {
    worst_mass = std::max(worst_mass,
                          std::fabs(cs.grid_mass - cs.particle_mass) / cs.particle_mass);
    double pm = cs.particle_momentum.norm();
    worst_mom = std::max(worst_mom, (cs.grid_momentum - cs.particle_momentum).norm() /
                                        std::max(pm, 1e-30));
  };
  sim.step(st, {});
  CHECK(worst_mass < 1e-12);
  CHECK(worst_mom < 1e-10);
}

TEST_CASE("grid mass: empty cloud, partition of unity, 27-node support") {
  SceneConfig<double> scene = interior_scene(32, 8, 3);
  double pm = scene.particle_mass();

  metrics::PointCloud<double> empty;
  GridField<double> f0 = compute_grid_mass(scene, empty, pm);
  CHECK(f0.total_mass() == 0.0);

  MpmSim<double> sim(scene);
  FullState<double> st = sim.initial_state();
  GridField<double> f1 = compute_grid_mass(scene, st.x, pm);
  CHECK(std::fabs(f1.total_mass() - pm * double(st.size())) / (pm * st.size()) < 1e-12);

  metrics::PointCloud<double> one{{0.496, 0.503, 0.511}};
  GridField<double> f2 = compute_grid_mass(scene, one, pm);
  int nonzero = 0;
  double total = 0;
  for (double m : f2.mass) {
    if (m != 0) nonzero++;
    total += m;
  }
  CHECK(nonzero == 27);
  CHECK(std::fabs(total - pm) / pm < 1e-12);

  metrics::PointCloud<double> outside{{1.2, 0.5, 0.5}};
  CHECK_THROWS_AS(compute_grid_mass(scene, outside, pm), Error);
}

TEST_CASE("step is deterministic and rollout composes bit-identically") {
  SceneConfig<double> scene = interior_scene(16, 40, 17);
  scene.gravity = {0, -9.8, 0};
  MpmSim<double> sim(scene);
  FullState<double> st = randomized_state(sim, 19, 0.2, 0.03);
  FullState<double> a = sim.step(st, {});
  FullState<double> b = sim.step(st, {});
  for (size_t p = 0; p < st.size(); p++) {
    CHECK(a.x[p].x == b.x[p].x);
    CHECK(a.v[p].y == b.v[p].y);
    CHECK(a.F[p](0, 1) == b.F[p](0, 1));
  }
  std::vector<Action<double>> acts(3, Action<double>{});
  auto traj = sim.rollout(st, acts);
  FullState<double> manual = sim.step(sim.step(sim.step(st, {}), {}), {});
  for (size_t p = 0; p < st.size(); p++) {
    CHECK(traj[2].x[p].x == manual.x[p].x);
    CHECK(traj[2].v[p].z == manual.v[p].z);
  }
}

TEST_CASE("observe returns positions; subsampling is distinct and bounded") {
  SceneConfig<double> scene = interior_scene(32, 64, 5);
  MpmSim<double> sim(scene);
  FullState<double> st = sim.initial_state();
  auto obs = observe(st);
  CHECK(obs.size() == st.size());
  CHECK(obs[7].x == st.x[7].x);

  auto sub = observe_subsampled(st, 20, 42);
  CHECK(sub.size() == 20);
  for (const auto& q : sub) {
    bool found = false;
    for (const auto& x : st.x) found |= (q - x).norm() == 0.0;
    CHECK(found);
  }
  CHECK_THROWS_AS(observe_subsampled(st, 65, 1), Error);
}

TEST_CASE("step gradients match finite differences (elastic, no contact)") {
  SceneConfig<double> scene = interior_scene(16, 8, 31);
  scene.material.yield_stress = 1e9;  // stay elastic
  scene.gravity = {0, -9.8, 0};
  MpmSim<double> sim(scene);
  StepFdHarness h{sim, randomized_state(sim, 33, 0.1, 0.02), {},
                  random_adjoint(8, 77)};
  double err = check_state_grad(h, 1e-5);
  CHECK(err < 2e-5);
}

TEST_CASE("step gradients match finite differences (plastic flow)") {
  SceneConfig<double> scene = interior_scene(16, 8, 37);
  scene.material.yield_stress = 1e-3;  // force yielding
  MpmSim<double> sim(scene);
  StepFdHarness h{sim, randomized_state(sim, 41, 0.1, 0.05), {},
                  random_adjoint(8, 79)};
  double err = check_state_grad(h, 1e-5);
  CHECK(err < 5e-5);
}

TEST_CASE("step gradients match finite differences with rigid contact") {
  SceneConfig<double> scene = interior_scene(16, 8, 43);
  scene.material.yield_stress = 1e9;
  geom::RigidPrimitive<double> ball;
  ball.kind = geom::ShapeKind::Sphere;
  ball.radius = 0.07;
  ball.trans = {0.55, 0.5, 0.5};
  ball.actuated = true;
  scene.primitives.push_back(ball);
  MpmSim<double> sim(scene);
  StepFdHarness h{sim, randomized_state(sim, 51, 0.1, 0.01),
                  Action<double>{0.2, -0.1, 0.05}, random_adjoint(8, 81)};
  double err = check_state_grad(h, 1e-5);
  CHECK(err < 5e-5);
}

TEST_CASE("action gradient matches finite differences (single substep)") {
  // Rigid poses advance kinematically and are not differentiated, so the
  // action adjoint is exact only within a substep; check it there.
  SceneConfig<double> scene = interior_scene(16, 8, 43);
  scene.substeps = 1;
  scene.material.yield_stress = 1e9;
  geom::RigidPrimitive<double> ball;
  ball.kind = geom::ShapeKind::Sphere;
  ball.radius = 0.07;
  ball.trans = {0.55, 0.5, 0.5};
  ball.actuated = true;
  scene.primitives.push_back(ball);
  MpmSim<double> sim(scene);
  StepFdHarness h{sim, randomized_state(sim, 51, 0.1, 0.01),
                  Action<double>{0.2, -0.1, 0.05}, random_adjoint(8, 81)};
  std::vector<double> aadj(3, 0.0);
  h.analytic(&aadj);
  for (int c = 0; c < 3; c++) {
    Action<double> ap = h.action, am = h.action;
    ap[size_t(c)] += 1e-5;
    am[size_t(c)] -= 1e-5;
    double num = (h.loss(h.state, ap) - h.loss(h.state, am)) / 2e-5;
    CHECK(oracles::rel_err(aadj[size_t(c)], num) < 5e-5);
  }
}

TEST_CASE("zero output adjoints give zero input gradients") {
  SceneConfig<double> scene = interior_scene(16, 8, 61);
  MpmSim<double> sim(scene);
  FullState<double> st = randomized_state(sim, 63, 0.1, 0.02);
  StateAdjoint<double> zero = StateAdjoint<double>::zeros(8);
  StateAdjoint<double> in_adj = StateAdjoint<double>::zeros(8);
  sim.step_backward(st, {}, zero, in_adj, nullptr);
  for (size_t p = 0; p < 8; p++) {
    CHECK(in_adj.x[p].norm() == 0.0);
    CHECK(in_adj.F[p].frob_norm() == 0.0);
  }
}

TEST_CASE("CFL violation raises a diagnostic error") {
  SceneConfig<double> scene = interior_scene(32, 8, 71);
  MpmSim<double> sim(scene);
  FullState<double> st = sim.initial_state();
  st.v[0] = {500, 0, 0};
  CHECK_THROWS_WITH_AS(sim.step(st, {}), doctest::Contains("CFL"), Error);
}

#include "diffsrl/mpm_tape.hpp"

TEST_CASE("rollout_grad: zero adjoints produce exact zero gradients") {
  SceneConfig<double> scene = interior_scene(16, 12, 83);
  MpmSim<double> sim(scene);
  FullState<double> st = randomized_state(sim, 85, 0.1, 0.02);
  std::vector<Action<double>> acts(3, Action<double>{});
  std::vector<std::vector<Vec3<double>>> adjoints(
      3, std::vector<Vec3<double>>(12, Vec3<double>{0, 0, 0}));
  auto g = rollout_grad(sim, st, acts, adjoints, false);
  for (const auto& v : g.positions) CHECK(v.norm() == 0.0);
}

TEST_CASE("rollout_grad: free-flight mean position gives 1/N per coordinate") {
  SceneConfig<double> scene = interior_scene(32, 16, 87);
  scene.substeps = 5;
  MpmSim<double> sim(scene);
  FullState<double> st = sim.initial_state();
  for (auto& v : st.v) v = {0.2, -0.05, 0.1};
  size_t n = st.size(), k = 3;
  std::vector<Action<double>> acts(k, Action<double>{});
  std::vector<std::vector<Vec3<double>>> adjoints(
      k, std::vector<Vec3<double>>(n, Vec3<double>{0, 0, 0}));
  double invn = 1.0 / double(n);
  for (auto& a : adjoints[k - 1]) a = {invn, invn, invn};
  auto g = rollout_grad(sim, st, acts, adjoints, false);
  for (const auto& v : g.positions) {
    CHECK(v.x == doctest::Approx(invn).epsilon(1e-9));
    CHECK(v.y == doctest::Approx(invn).epsilon(1e-9));
    CHECK(v.z == doctest::Approx(invn).epsilon(1e-9));
  }
}

TEST_CASE("rollout_grad matches finite differences over 3 control steps") {
  SceneConfig<double> scene = interior_scene(16, 12, 91);
  scene.substeps = 3;
  scene.gravity = {0, -9.8, 0};
  scene.material.yield_stress = 200;
  MpmSim<double> sim(scene);
  FullState<double> st = randomized_state(sim, 93, 0.15, 0.03);
  size_t n = st.size(), k = 3;
  std::vector<Action<double>> acts(k, Action<double>{});
  Pcg32 rng(95, 7);
  std::vector<std::vector<Vec3<double>>> adjoints(k, std::vector<Vec3<double>>(n));
  for (auto& step : adjoints)
    for (auto& a : step)
      a = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  auto g = rollout_grad(sim, st, acts, adjoints, false);

  auto loss = [&](const FullState<double>& s) {
    auto traj = sim.rollout(s, acts);
    double l = 0;
    for (size_t i = 0; i < k; i++)
      for (size_t p = 0; p < n; p++) l += adjoints[i][p].dot(traj[i].x[p]);
    return l;
  };
  double max_err = 0;
  for (size_t p = 0; p < n; p++)
    for (int c = 0; c < 3; c++) {
      double s0 = st.x[p][c];
      st.x[p][c] = s0 + 1e-5;
      double fp = loss(st);
      st.x[p][c] = s0 - 1e-5;
      double fm = loss(st);
      st.x[p][c] = s0;
      max_err = std::max(max_err,
                         oracles::rel_err(g.positions[p][c], (fp - fm) / 2e-5));
    }
  CHECK(max_err < 1e-4);
}

TEST_CASE("sim_step_op on the tape: chamfer loss gradient vs check_gradient") {
  SceneConfig<double> scene = interior_scene(16, 10, 97);
  scene.substeps = 3;
  MpmSim<double> sim(scene);
  FullState<double> st = randomized_state(sim, 99, 0.1, 0.02);
  Pcg32 rng(101, 9);
  metrics::PointCloud<double> target(st.size());
  for (auto& p : target)
    p = {rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6)};

  ad::Program<double> prog;
  prog.leaves.push_back({flatten_vec3(st.x), st.size(), 3});
  prog.build = [&](ad::Tape<double>& t, const std::vector<ad::VarId>& l) {
    SimStateVars sv;
    sv.x = l[0];
    sv.v = t.constant(flatten_vec3(st.v), st.size(), 3);
    sv.F = t.constant(flatten_mat3(st.F), st.size(), 9);
    sv.C = t.constant(flatten_mat3(st.C), st.size(), 9);
    std::vector<Vec3<double>> rt = st.rigid_trans;
    double time = 0;
    for (int i = 0; i < 2; i++) {
      std::vector<Vec3<double>> rt_next;
      sv = sim_step_op(t, sim, sv, rt, time, Action<double>{}, ad::kNoVar, &rt_next);
      rt = rt_next;
      time += scene.dt * scene.substeps;
    }
    ad::VarId tgt = t.constant(metrics::flat_from_cloud(target), target.size(), 3);
    return metrics::chamfer_op(t, sv.x, tgt);
  };
  auto rep = ad::check_gradient(prog, 0, 1e-5);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("contact keeps particles out of primitives during dynamics") {
  // Pressing a sphere through a resting blob: after each substep no particle
  // sits deeper inside than one cell width.
  SceneConfig<double> scene = interior_scene(32, 128, 111);
  scene.substeps = 1;
  scene.dt = 2e-4;
  scene.gravity = {0, -9.8, 0};
  scene.sampler.center = {0.5, 0.3, 0.5};
  scene.sampler.half_extents = {0.07, 0.06, 0.07};
  geom::RigidPrimitive<double> ball;
  ball.kind = geom::ShapeKind::Sphere;
  ball.radius = 0.05;
  ball.trans = {0.38, 0.3, 0.5};
  ball.actuated = true;
  scene.primitives.push_back(ball);
  MpmSim<double> sim(scene);
  FullState<double> st = sim.initial_state();
  double dx = scene.dx();
  double worst = 0;
  for (int step = 0; step < 100; step++) {
    st = sim.step(st, {0.8, 0, 0});
    auto prim = scene.primitives[0];
    prim.trans = st.rigid_trans[0];
    for (const auto& x : st.x)
      worst = std::min(worst, double(geom::sdf_eval(prim, x).dist));
  }
  CHECK(worst > -dx);
}
