#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "diffsrl/mpm_tape.hpp"
#include "diffsrl/optim.hpp"
#include "diffsrl/training.hpp"

namespace diffsrl::train {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Accessors
// ---------------------------------------------------------------------------

template <class Real>
sim::FullState<Real> Dataset::state_at(size_t traj, size_t step) const {
  require(traj < n_traj && step <= length, "dataset: state index out of range");
  sim::FullState<Real> s;
  size_t n = particles;
  size_t base3 = ((traj * (length + 1)) + step) * n * 3;
  size_t base9 = ((traj * (length + 1)) + step) * n * 9;
  s.x.resize(n);
  s.v.resize(n);
  s.F.resize(n);
  s.C.resize(n);
  for (size_t p = 0; p < n; p++) {
    for (int c = 0; c < 3; c++) {
      s.x[p][c] = Real(positions[base3 + p * 3 + size_t(c)]);
      s.v[p][c] = Real(velocities[base3 + p * 3 + size_t(c)]);
    }
    for (int rc = 0; rc < 9; rc++) {
      s.F[p](rc / 3, rc % 3) = Real(defgrads[base9 + p * 9 + size_t(rc)]);
      s.C[p](rc / 3, rc % 3) = Real(affines[base9 + p * 9 + size_t(rc)]);
    }
  }
  size_t rb = ((traj * (length + 1)) + step) * n_prims * 3;
  s.rigid_trans.resize(n_prims);
  for (size_t b = 0; b < n_prims; b++)
    for (int c = 0; c < 3; c++) s.rigid_trans[b][c] = Real(rigids[rb + b * 3 + size_t(c)]);
  s.time = Real(0);
  return s;
}

template <class Real>
metrics::PointCloud<Real> Dataset::obs_at(size_t traj, size_t step) const {
  require(traj < n_traj && step <= length, "dataset: obs index out of range");
  size_t n = particles;
  size_t base3 = ((traj * (length + 1)) + step) * n * 3;
  metrics::PointCloud<Real> c(n);
  for (size_t p = 0; p < n; p++)
    c[p] = {Real(positions[base3 + p * 3]), Real(positions[base3 + p * 3 + 1]),
            Real(positions[base3 + p * 3 + 2])};
  return c;
}

template <class Real>
metrics::PointCloud<Real> Dataset::target_of(size_t traj) const {
  size_t n = particles;
  size_t base = traj * n * 3;
  metrics::PointCloud<Real> c(n);
  for (size_t p = 0; p < n; p++)
    c[p] = {Real(targets[base + p * 3]), Real(targets[base + p * 3 + 1]),
            Real(targets[base + p * 3 + 2])};
  return c;
}

template <class Real>
sim::Action<Real> Dataset::action_at(size_t traj, size_t step) const {
  require(step < length, "dataset: action index out of range");
  size_t base = (traj * length + step) * action_dim;
  sim::Action<Real> a(action_dim);
  for (size_t i = 0; i < action_dim; i++) a[i] = Real(actions[base + i]);
  return a;
}

double Dataset::reward_at(size_t traj, size_t step) const {
  require(step < length, "dataset: reward index out of range");
  return double(rewards[traj * length + step]);
}

std::pair<size_t, size_t> Dataset::split(const std::string& name) const {
  if (name == "train") return splits[0];
  if (name == "val") return splits[1];
  if (name == "test") return splits[2];
  fail("dataset: unknown split " + name);
}

template sim::FullState<float> Dataset::state_at(size_t, size_t) const;
template sim::FullState<double> Dataset::state_at(size_t, size_t) const;
template metrics::PointCloud<float> Dataset::obs_at(size_t, size_t) const;
template metrics::PointCloud<double> Dataset::obs_at(size_t, size_t) const;
template metrics::PointCloud<float> Dataset::target_of(size_t) const;
template metrics::PointCloud<double> Dataset::target_of(size_t) const;
template sim::Action<float> Dataset::action_at(size_t, size_t) const;
template sim::Action<double> Dataset::action_at(size_t, size_t) const;

// ---------------------------------------------------------------------------
// Reward
// ---------------------------------------------------------------------------

template <class Real>
Real task_reward(const sim::SceneConfig<Real>& scene, const sim::FullState<Real>& state,
                 const metrics::PointCloud<Real>& target) {
  Real r = -metrics::chamfer(state.x, target);
  for (size_t b = 0; b < scene.primitives.size(); b++) {
    if (!scene.primitives[b].actuated) continue;
    Vec3<Real> centroid{0, 0, 0};
    for (const auto& x : state.x) centroid += x;
    centroid = centroid / Real(state.size());
    r -= Real(0.1) * (state.rigid_trans[b] - centroid).norm();
    break;
  }
  return r;
}

template float task_reward(const sim::SceneConfig<float>&, const sim::FullState<float>&, const metrics::PointCloud<float>&);
template double task_reward(const sim::SceneConfig<double>&, const sim::FullState<double>&, const metrics::PointCloud<double>&);

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace {

void write_blob(const fs::path& path, const std::vector<float>& data) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "dataset: cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(data.data()),
          std::streamsize(data.size() * sizeof(float)));
  require(f.good(), "dataset: write failed for " + path.string());
}

std::vector<float> read_blob(const fs::path& path, size_t expected) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "dataset: cannot open " + path.string());
  std::vector<float> data(expected);
  f.read(reinterpret_cast<char*>(data.data()),
         std::streamsize(expected * sizeof(float)));
  require(f.gcount() == std::streamsize(expected * sizeof(float)),
          "dataset: blob " + path.string() + " is truncated");
  return data;
}

void append_state(std::vector<float>& pos, std::vector<float>& vel,
                  std::vector<float>& fg, std::vector<float>& aff,
                  std::vector<float>& rg, const sim::FullState<float>& s) {
  for (const auto& x : s.x)
    for (int c = 0; c < 3; c++) pos.push_back(x[c]);
  for (const auto& v : s.v)
    for (int c = 0; c < 3; c++) vel.push_back(v[c]);
  for (const auto& m : s.F)
    for (int rc = 0; rc < 9; rc++) fg.push_back(m(rc / 3, rc % 3));
  for (const auto& m : s.C)
    for (int rc = 0; rc < 9; rc++) aff.push_back(m(rc / 3, rc % 3));
  for (const auto& t : s.rigid_trans)
    for (int c = 0; c < 3; c++) rg.push_back(t[c]);
}

// Optimizes the flattened action sequence through the simulator toward the
// target cloud (trajectory-optimization data, the non-random 70%).
std::vector<sim::Action<float>> optimize_actions(
    const sim::MpmSim<float>& sim, const sim::FullState<float>& init,
    const metrics::PointCloud<float>& target, size_t length, int iters,
    double lr, Pcg32& rng) {
  const size_t adim = sim.scene().action_dim();
  const float amax = sim.scene().action_max;
  nn::ParamSet<float> actions;
  size_t ai = actions.add("actions", length, adim);
  for (auto& v : actions[ai].data) v = float(rng.uniform(-0.3, 0.3)) * amax;

  nn::Adam<float> opt(actions, lr);
  for (int it = 0; it < iters; it++) {
    ad::Tape<float> t;
    ad::VarId avar = t.leaf(actions[ai].data, length, adim);
    sim::SimStateVars sv = sim::state_constants(t, init);
    std::vector<Vec3<float>> rt = init.rigid_trans;
    float time = 0;
    ad::VarId final_x = sv.x;
    for (size_t s = 0; s < length; s++) {
      // Slice step s out of the action matrix.
      std::vector<uint32_t> row{uint32_t(s)};
      ad::VarId arow = ad::gather_rows(t, avar, row);
      std::vector<Vec3<float>> rt_next;
      sim::Action<float> acur(adim);
      for (size_t i = 0; i < adim; i++) acur[i] = t.val(arow)[i];
      sv = sim::sim_step_op(t, sim, sv, rt, time, acur, arow, &rt_next);
      rt = rt_next;
      time += sim.scene().dt * float(sim.scene().substeps);
      final_x = sv.x;
    }
    ad::VarId tgt = t.constant(metrics::flat_from_cloud(target), target.size(), 3);
    ad::VarId loss = metrics::chamfer_op(t, final_x, tgt);
    t.backward_scalar(loss, 1.0f);
    opt.step(actions, {t.grad(avar)}, 1.0);
  }

  std::vector<sim::Action<float>> out(length, sim::Action<float>(adim));
  for (size_t s = 0; s < length; s++)
    for (size_t i = 0; i < adim; i++)
      out[s][i] = std::clamp(actions[ai].data[s * adim + i], -amax, amax);
  return out;
}

}  // namespace

void generate_dataset(const sim::SceneConfig<double>& scene_d, const cfg::GenSettings& gen,
                      const std::string& out_dir, uint64_t scene_hash) {
  require(gen.n_traj >= 3, "gen-data: need at least 3 trajectories");
  require(gen.length >= 1, "gen-data: length must be >= 1");
  sim::SceneConfig<float> scene = scene_d.cast<float>();
  fs::create_directories(out_dir);

  const size_t N = scene.sampler.count;
  const size_t L = gen.length;
  const size_t adim = scene.action_dim();
  const size_t prims = scene.primitives.size();

  std::vector<float> pos, vel, fg, aff, rg, act, rew, tgt;
  pos.reserve(gen.n_traj * (L + 1) * N * 3);
  size_t resampled = 0;

  for (size_t traj = 0; traj < gen.n_traj; traj++) {
    bool want_random = (traj % 10) < size_t(gen.random_fraction * 10.0 + 0.5);
    for (uint64_t attempt = 0;; attempt++) {
      require(attempt < 10, format("gen-data: trajectory %zu failed 10 times", traj));
      Pcg32 rng(gen.seed * 1000003 + traj * 131 + attempt, 17);
      sim::SceneConfig<float> sc = scene;
      sc.sampler.seed = scene.sampler.seed + traj * 7919 + attempt;
      sc.sampler.center.x += float(rng.uniform(-0.02, 0.02));
      sc.sampler.center.z += float(rng.uniform(-0.02, 0.02));
      for (auto& prim : sc.primitives) {
        if (!prim.actuated) continue;
        prim.trans.x += float(rng.uniform(-0.03, 0.03));
        prim.trans.z += float(rng.uniform(-0.03, 0.03));
      }
      Vec3<float> offset = sc.target_offset;
      offset.x += float(rng.uniform(-0.05, 0.05));
      offset.z += float(rng.uniform(-0.05, 0.05));

      try {
        sim::MpmSim<float> sim(sc);
        sim::FullState<float> init = sim.initial_state();
        metrics::PointCloud<float> target(N);
        for (size_t p = 0; p < N; p++) target[p] = init.x[p] + offset;

        std::vector<sim::Action<float>> actions_i;
        if (want_random) {
          actions_i.assign(L, sim::Action<float>(adim));
          for (auto& a : actions_i)
            for (auto& v : a)
              v = float(rng.uniform(-1, 1)) * sc.action_max;
        } else {
          actions_i = optimize_actions(sim, init, target, L, gen.opt_iters,
                                       gen.opt_lr, rng);
        }

        std::vector<sim::FullState<float>> traj_states = sim.rollout(init, actions_i);

        append_state(pos, vel, fg, aff, rg, init);
        for (const auto& s : traj_states) append_state(pos, vel, fg, aff, rg, s);
        for (const auto& a : actions_i)
          for (float v : a) act.push_back(v);
        for (const auto& s : traj_states)
          rew.push_back(task_reward(sc, s, target));
        for (const auto& p : target)
          for (int c = 0; c < 3; c++) tgt.push_back(p[c]);
        break;
      } catch (const Error&) {
        resampled++;
      }
    }
  }

  // Manifest + blobs.
  size_t n = gen.n_traj;
  size_t n_val = std::max<size_t>(1, (n + 6) / 12);
  size_t n_test = n_val;
  size_t n_train = n - n_val - n_test;

  std::ofstream mf(fs::path(out_dir) / "manifest.txt");
  require(mf.good(), "dataset: cannot write manifest in " + out_dir);
  mf << "DIFFSRL-DATA v1\n";
  mf << "endian little\n";
  mf << "dtype f32\n";
  mf << "trajectories " << n << "\n";
  mf << "length " << L << "\n";
  mf << "particles " << N << "\n";
  mf << "action_dim " << adim << "\n";
  mf << "prims " << prims << "\n";
  mf << "seed " << gen.seed << "\n";
  mf << "scene_hash " << scene_hash << "\n";
  mf << "resampled " << resampled << "\n";
  mf << "layout states [traj, step0..L, particle, coord]\n";
  mf << "layout actions [traj, step0..L-1, component]\n";
  mf << "split train 0 " << n_train << "\n";
  mf << "split val " << n_train << " " << (n_train + n_val) << "\n";
  mf << "split test " << (n_train + n_val) << " " << n << "\n";
  mf << "blob positions positions.f32 " << pos.size() << "\n";
  mf << "blob velocities velocities.f32 " << vel.size() << "\n";
  mf << "blob defgrads defgrads.f32 " << fg.size() << "\n";
  mf << "blob affines affines.f32 " << aff.size() << "\n";
  mf << "blob rigids rigids.f32 " << rg.size() << "\n";
  mf << "blob actions actions.f32 " << act.size() << "\n";
  mf << "blob rewards rewards.f32 " << rew.size() << "\n";
  mf << "blob targets targets.f32 " << tgt.size() << "\n";
  require(mf.good(), "dataset: manifest write failed");
  mf.close();

  write_blob(fs::path(out_dir) / "positions.f32", pos);
  write_blob(fs::path(out_dir) / "velocities.f32", vel);
  write_blob(fs::path(out_dir) / "defgrads.f32", fg);
  write_blob(fs::path(out_dir) / "affines.f32", aff);
  write_blob(fs::path(out_dir) / "rigids.f32", rg);
  write_blob(fs::path(out_dir) / "actions.f32", act);
  write_blob(fs::path(out_dir) / "rewards.f32", rew);
  write_blob(fs::path(out_dir) / "targets.f32", tgt);
}

Dataset load_dataset(const std::string& dir, const sim::SceneConfig<double>* scene,
                     double replay_check_fraction) {
  std::ifstream mf(fs::path(dir) / "manifest.txt");
  require(mf.good(), "dataset: cannot open manifest in " + dir);
  std::string line;
  std::getline(mf, line);
  require(line == "DIFFSRL-DATA v1", "dataset: bad manifest magic");

  Dataset d;
  std::map<std::string, std::pair<std::string, size_t>> blobs;
  while (std::getline(mf, line)) {
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "endian") {
      std::string v;
      ss >> v;
      require(v == "little", "dataset: unsupported endianness");
    } else if (key == "dtype") {
      std::string v;
      ss >> v;
      require(v == "f32", "dataset: unsupported dtype");
    } else if (key == "trajectories") ss >> d.n_traj;
    else if (key == "length") ss >> d.length;
    else if (key == "particles") ss >> d.particles;
    else if (key == "action_dim") ss >> d.action_dim;
    else if (key == "prims") ss >> d.n_prims;
    else if (key == "seed") ss >> d.seed;
    else if (key == "scene_hash") ss >> d.scene_hash;
    else if (key == "resampled") ss >> d.resample_count;
    else if (key == "layout") continue;
    else if (key == "split") {
      std::string name;
      size_t a, b;
      ss >> name >> a >> b;
      int idx = name == "train" ? 0 : name == "val" ? 1 : 2;
      d.splits[size_t(idx)] = {a, b};
    } else if (key == "blob") {
      std::string name, file;
      size_t count;
      ss >> name >> file >> count;
      blobs[name] = {file, count};
    } else {
      fail("dataset: unknown manifest key " + key);
    }
  }
  require(d.n_traj > 0 && d.length > 0 && d.particles > 0,
          "dataset: manifest missing core fields");

  auto load = [&](const char* name) {
    auto it = blobs.find(name);
    require(it != blobs.end(), std::string("dataset: missing blob ") + name);
    return read_blob(fs::path(dir) / it->second.first, it->second.second);
  };
  d.positions = load("positions");
  d.velocities = load("velocities");
  d.defgrads = load("defgrads");
  d.affines = load("affines");
  d.rigids = load("rigids");
  d.actions = load("actions");
  d.rewards = load("rewards");
  d.targets = load("targets");

  size_t st3 = d.n_traj * (d.length + 1) * d.particles * 3;
  require(d.positions.size() == st3, "dataset: positions blob size mismatch");
  require(d.velocities.size() == st3, "dataset: velocities blob size mismatch");
  require(d.defgrads.size() == st3 * 3, "dataset: defgrads blob size mismatch");
  require(d.actions.size() == d.n_traj * d.length * d.action_dim,
          "dataset: actions blob size mismatch");

  // Replay validation on a sampled subset: stored successors must equal the
  // simulator's output bit for bit.
  if (scene && replay_check_fraction > 0) {
    sim::MpmSim<float> sim(scene->cast<float>());
    size_t n_check = std::max<size_t>(1, size_t(replay_check_fraction * double(d.n_traj)));
    size_t stride = std::max<size_t>(1, d.n_traj / n_check);
    for (size_t traj = 0; traj < d.n_traj; traj += stride) {
      sim::FullState<float> s = d.state_at<float>(traj, 0);
      for (size_t step = 0; step < d.length; step++) {
        s = sim.step(s, d.action_at<float>(traj, step));
        sim::FullState<float> stored = d.state_at<float>(traj, step + 1);
        for (size_t p = 0; p < d.particles; p++) {
          if (std::memcmp(&s.x[p], &stored.x[p], sizeof(Vec3<float>)) != 0 ||
              std::memcmp(&s.v[p], &stored.v[p], sizeof(Vec3<float>)) != 0)
            fail(format("dataset: replay mismatch at traj %zu step %zu particle %zu",
                        traj, step + 1, p));
        }
      }
    }
  }
  return d;
}

}  // namespace diffsrl::train
