#include "diffsrl.h"

#include <cstring>
#include <string>

#include "diffsrl/config.hpp"
#include "diffsrl/eval.hpp"
#include "diffsrl/mpm_tape.hpp"
#include "diffsrl/regulator.hpp"
#include "diffsrl/training.hpp"

using namespace diffsrl;

namespace {

thread_local std::string g_last_error = "";

dsrl_status set_error(dsrl_status code, const std::string& msg) {
  g_last_error = msg;
  return code;
}

// Exceptions from the core map onto status codes; bad_alloc and unknown
// exceptions are runtime errors.
template <class Fn>
dsrl_status guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    std::string what = e.what();
    dsrl_status code = DSRL_ERR_RUNTIME;
    if (what.find("non-finite") != std::string::npos ||
        what.find("NaN") != std::string::npos)
      code = DSRL_ERR_NUMERIC;
    else if (what.find("cannot open") != std::string::npos ||
             what.find("write failed") != std::string::npos ||
             what.find("truncated") != std::string::npos)
      code = DSRL_ERR_IO;
    else if (what.find("must") != std::string::npos ||
             what.find("mismatch") != std::string::npos ||
             what.find("out of range") != std::string::npos ||
             what.find("unknown") != std::string::npos)
      code = DSRL_ERR_INVALID_ARGUMENT;
    return set_error(code, what);
  } catch (const std::exception& e) {
    return set_error(DSRL_ERR_RUNTIME, e.what());
  } catch (...) {
    return set_error(DSRL_ERR_RUNTIME, "unknown error");
  }
}

dsrl_status need(bool cond, const char* msg) {
  if (cond) return DSRL_OK;
  return set_error(DSRL_ERR_INVALID_ARGUMENT, msg);
}

}  // namespace

struct dsrl_scene {
  cfg::Ini ini;
  sim::SceneConfig<double> config;
  uint64_t hash = 0;
};

struct dsrl_state {
  sim::FullState<double> state;
};

struct dsrl_report {
  std::vector<eval::EvalReport> reports;
};

extern "C" {

const char* dsrl_last_error(void) { return g_last_error.c_str(); }

dsrl_status dsrl_scene_open(const char* config_path, dsrl_scene** out) {
  if (need(config_path && out, "dsrl_scene_open: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    auto scene = std::make_unique<dsrl_scene>();
    scene->ini = cfg::Ini::from_file(config_path);
    scene->config = cfg::scene_from_ini(scene->ini);
    scene->hash = scene->ini.content_hash();
    *out = scene.release();
    return DSRL_OK;
  });
}

void dsrl_scene_close(dsrl_scene* scene) { delete scene; }

size_t dsrl_scene_particle_count(const dsrl_scene* scene) {
  return scene ? scene->config.sampler.count : 0;
}

size_t dsrl_scene_action_dim(const dsrl_scene* scene) {
  return scene ? scene->config.action_dim() : 0;
}

size_t dsrl_scene_primitive_count(const dsrl_scene* scene) {
  return scene ? scene->config.primitives.size() : 0;
}

dsrl_status dsrl_scene_initial_state(const dsrl_scene* scene, dsrl_state** out) {
  if (need(scene && out, "dsrl_scene_initial_state: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    sim::MpmSim<double> sim(scene->config);
    auto st = std::make_unique<dsrl_state>();
    st->state = sim.initial_state();
    *out = st.release();
    return DSRL_OK;
  });
}

void dsrl_state_close(dsrl_state* state) { delete state; }

size_t dsrl_state_particle_count(const dsrl_state* state) {
  return state ? state->state.size() : 0;
}

dsrl_status dsrl_state_positions(const dsrl_state* state, double* xyz, size_t capacity) {
  if (need(state && xyz, "dsrl_state_positions: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  size_t want = state->state.size() * 3;
  if (need(capacity >= want, "dsrl_state_positions: buffer too small") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  for (size_t p = 0; p < state->state.size(); p++)
    for (int c = 0; c < 3; c++) xyz[p * 3 + size_t(c)] = state->state.x[p][c];
  return DSRL_OK;
}

dsrl_status dsrl_step(const dsrl_scene* scene, const dsrl_state* state,
                      const double* action, size_t action_len, dsrl_state** out) {
  if (need(scene && state && out && (action || action_len == 0),
           "dsrl_step: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    sim::MpmSim<double> sim(scene->config);
    sim::Action<double> a(action, action + action_len);
    auto st = std::make_unique<dsrl_state>();
    st->state = sim.step(state->state, a);
    *out = st.release();
    return DSRL_OK;
  });
}

dsrl_status dsrl_sdf_eval(const dsrl_scene* scene, size_t primitive_index,
                          const double* point3, double* distance, double* gradient3) {
  if (need(scene && point3 && distance && gradient3,
           "dsrl_sdf_eval: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  if (need(primitive_index < scene->config.primitives.size(),
           "dsrl_sdf_eval: primitive index out of range") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    auto r = geom::sdf_eval(scene->config.primitives[primitive_index],
                            Vec3<double>{point3[0], point3[1], point3[2]});
    *distance = r.dist;
    for (int c = 0; c < 3; c++) gradient3[c] = r.grad[c];
    return DSRL_OK;
  });
}

dsrl_status dsrl_chamfer(const double* a_xyz, size_t a_count, const double* b_xyz,
                         size_t b_count, double* out) {
  if (need(a_xyz && b_xyz && out, "dsrl_chamfer: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    metrics::PointCloud<double> a(a_count), b(b_count);
    for (size_t i = 0; i < a_count; i++)
      a[i] = {a_xyz[i * 3], a_xyz[i * 3 + 1], a_xyz[i * 3 + 2]};
    for (size_t i = 0; i < b_count; i++)
      b[i] = {b_xyz[i * 3], b_xyz[i * 3 + 1], b_xyz[i * 3 + 2]};
    *out = metrics::chamfer(a, b);
    return DSRL_OK;
  });
}

dsrl_status dsrl_emd_match(const double* a_xyz, const double* b_xyz, size_t count,
                           int max_iters, uint32_t* perm, double* cost) {
  if (need(a_xyz && b_xyz && perm && cost, "dsrl_emd_match: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    metrics::PointCloud<double> a(count), b(count);
    for (size_t i = 0; i < count; i++) {
      a[i] = {a_xyz[i * 3], a_xyz[i * 3 + 1], a_xyz[i * 3 + 2]};
      b[i] = {b_xyz[i * 3], b_xyz[i * 3 + 1], b_xyz[i * 3 + 2]};
    }
    metrics::MatchResult m =
        metrics::emd_match(a, b, max_iters > 0 ? max_iters : 3000);
    std::memcpy(perm, m.permutation.data(), count * sizeof(uint32_t));
    *cost = m.cost;
    return DSRL_OK;
  });
}

// ---------------------------------------------------------------------------
// Pipeline commands
// ---------------------------------------------------------------------------

namespace {

// Loss curves and validation metrics as uniform report entries.
void report_from_training(const train::LossReport& lr, dsrl_report& out) {
  eval::EvalReport ms, cons, total, val;
  ms.metric = "train_multi_step";
  cons.metric = "train_constraint";
  total.metric = "train_total";
  val.metric = "val_recon_chamfer";
  for (const auto& row : lr.epochs) {
    ms.values.push_back(row.multi_step);
    cons.values.push_back(row.constraint);
    total.values.push_back(row.total);
  }
  val.values = lr.val_metric;
  ms.finalize();
  cons.finalize();
  total.finalize();
  val.finalize();
  out.reports = {ms, cons, total, val};
}

}  // namespace

dsrl_status dsrl_gen_data(const char* scene_cfg, const char* run_cfg,
                          const char* out_dir) {
  if (need(scene_cfg && out_dir, "dsrl_gen_data: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    cfg::Ini scene_ini = cfg::Ini::from_file(scene_cfg);
    sim::SceneConfig<double> scene = cfg::scene_from_ini(scene_ini);
    cfg::Ini run_ini = run_cfg ? cfg::Ini::from_file(run_cfg) : scene_ini;
    cfg::GenSettings gen = cfg::gen_from_ini(run_ini);
    train::generate_dataset(scene, gen, out_dir, scene_ini.content_hash());
    return DSRL_OK;
  });
}

dsrl_status dsrl_train(const char* scene_cfg, const char* run_cfg,
                       const char* data_dir, const char* ckpt_out, int resume,
                       int ablate_override, dsrl_report** report_out) {
  if (need(scene_cfg && data_dir && ckpt_out, "dsrl_train: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    cfg::Ini scene_ini = cfg::Ini::from_file(scene_cfg);
    sim::SceneConfig<double> scene = cfg::scene_from_ini(scene_ini);
    cfg::Ini run_ini = run_cfg ? cfg::Ini::from_file(run_cfg) : scene_ini;
    cfg::TrainSettings ts = cfg::train_from_ini(run_ini);
    if (ablate_override >= 0) ts.ablate_penetration = ablate_override != 0;
    train::Dataset data = train::load_dataset(data_dir, &scene);
    train::TrainResult r =
        train::train_diffsrl(data, scene, ts, ckpt_out, resume != 0);
    if (report_out) {
      auto rep = std::make_unique<dsrl_report>();
      report_from_training(r.report, *rep);
      for (auto& e : rep->reports) {
        e.config_hash = run_ini.content_hash();
        e.dataset_hash = data.scene_hash;
        e.seed = ts.seed;
      }
      *report_out = rep.release();
    }
    return DSRL_OK;
  });
}

dsrl_status dsrl_train_baseline(const char* kind, const char* scene_cfg,
                                const char* run_cfg, const char* data_dir,
                                const char* ckpt_out, dsrl_report** report_out) {
  if (need(kind && scene_cfg && data_dir && ckpt_out,
           "dsrl_train_baseline: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    cfg::Ini scene_ini = cfg::Ini::from_file(scene_cfg);
    sim::SceneConfig<double> scene = cfg::scene_from_ini(scene_ini);
    cfg::Ini run_ini = run_cfg ? cfg::Ini::from_file(run_cfg) : scene_ini;
    cfg::TrainSettings ts = cfg::train_from_ini(run_ini);
    train::Dataset data = train::load_dataset(data_dir, &scene);
    train::TrainResult r = train::train_baseline(kind, data, scene, ts, ckpt_out);
    if (report_out) {
      auto rep = std::make_unique<dsrl_report>();
      report_from_training(r.report, *rep);
      for (auto& e : rep->reports) {
        e.config_hash = run_ini.content_hash();
        e.dataset_hash = data.scene_hash;
        e.seed = ts.seed;
      }
      *report_out = rep.release();
    }
    return DSRL_OK;
  });
}

dsrl_status dsrl_eval_traj(const char* scene_cfg, const char* run_cfg,
                           const char* data_dir, const char* ckpt, int k,
                           dsrl_report** report_out) {
  if (need(scene_cfg && data_dir && ckpt && report_out,
           "dsrl_eval_traj: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    cfg::Ini scene_ini = cfg::Ini::from_file(scene_cfg);
    sim::SceneConfig<double> scene = cfg::scene_from_ini(scene_ini);
    cfg::Ini run_ini = run_cfg ? cfg::Ini::from_file(run_cfg) : scene_ini;
    cfg::TrainSettings ts = cfg::train_from_ini(run_ini);
    train::Dataset data = train::load_dataset(data_dir, &scene);
    nn::ModelBundle<float> model = nn::load_bundle<float>(ckpt);
    eval::EvalReport r = eval::eval_traj_recon(scene, data, model, "test",
                                               k > 0 ? k : ts.k, ts.emd_iters);
    r.config_hash = run_ini.content_hash();
    r.seed = ts.seed;
    auto rep = std::make_unique<dsrl_report>();
    rep->reports = {r};
    *report_out = rep.release();
    return DSRL_OK;
  });
}

dsrl_status dsrl_eval_reward(const char* scene_cfg, const char* run_cfg,
                             const char* data_dir, const char* ckpt,
                             dsrl_report** report_out) {
  if (need(scene_cfg && data_dir && ckpt && report_out,
           "dsrl_eval_reward: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    cfg::Ini scene_ini = cfg::Ini::from_file(scene_cfg);
    sim::SceneConfig<double> scene = cfg::scene_from_ini(scene_ini);
    cfg::Ini run_ini = run_cfg ? cfg::Ini::from_file(run_cfg) : scene_ini;
    cfg::TrainSettings ts = cfg::train_from_ini(run_ini);
    train::Dataset data = train::load_dataset(data_dir, &scene);
    nn::ModelBundle<float> model = nn::load_bundle<float>(ckpt);
    eval::RewardPredSettings rs;
    rs.seed = ts.seed;
    eval::EvalReport r = eval::eval_reward_pred(scene, data, model, rs);
    r.config_hash = run_ini.content_hash();
    auto rep = std::make_unique<dsrl_report>();
    rep->reports = {r};
    *report_out = rep.release();
    return DSRL_OK;
  });
}

namespace {

eval::EvalReport curve_report(const std::string& name, const eval::MbpoResult& r,
                              uint64_t seed) {
  eval::EvalReport rep;
  rep.metric = name;
  rep.values = r.epoch_mean_reward;
  rep.seed = seed;
  rep.finalize();
  return rep;
}

}  // namespace

dsrl_status dsrl_mbpo(const char* scene_cfg, const char* run_cfg, const char* ckpt,
                      dsrl_report** report_out) {
  if (need(scene_cfg && ckpt && report_out, "dsrl_mbpo: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    cfg::Ini scene_ini = cfg::Ini::from_file(scene_cfg);
    sim::SceneConfig<double> scene = cfg::scene_from_ini(scene_ini);
    cfg::Ini run_ini = run_cfg ? cfg::Ini::from_file(run_cfg) : scene_ini;
    cfg::MbpoSettings ms = cfg::mbpo_from_ini(run_ini);
    nn::ModelBundle<float> model = nn::load_bundle<float>(ckpt);
    auto rep = std::make_unique<dsrl_report>();
    for (int rseed = 0; rseed < ms.repeats; rseed++) {
      cfg::MbpoSettings cur = ms;
      cur.seed = ms.seed + uint64_t(rseed);
      eval::MbpoResult r = eval::run_mbpo(scene, model, cur);
      rep->reports.push_back(
          curve_report(format("mbpo_reward_seed%d", rseed), r, cur.seed));
      rep->reports.back().config_hash = run_ini.content_hash();
    }
    *report_out = rep.release();
    return DSRL_OK;
  });
}

dsrl_status dsrl_robustness(const char* scene_cfg, const char* run_cfg,
                            const char* ckpt, const size_t* counts, size_t n_counts,
                            dsrl_report** report_out) {
  if (need(scene_cfg && ckpt && counts && n_counts > 0 && report_out,
           "dsrl_robustness: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    cfg::Ini scene_ini = cfg::Ini::from_file(scene_cfg);
    sim::SceneConfig<double> scene = cfg::scene_from_ini(scene_ini);
    cfg::Ini run_ini = run_cfg ? cfg::Ini::from_file(run_cfg) : scene_ini;
    cfg::MbpoSettings ms = cfg::mbpo_from_ini(run_ini);
    nn::ModelBundle<float> model = nn::load_bundle<float>(ckpt);
    std::vector<size_t> cs(counts, counts + n_counts);
    auto curves = eval::robustness_eval(scene, model, cs, ms);
    auto rep = std::make_unique<dsrl_report>();
    for (size_t i = 0; i < curves.size(); i++) {
      rep->reports.push_back(curve_report(
          format("mbpo_reward_points%zu", cs[i]), curves[i], ms.seed));
      rep->reports.back().config_hash = run_ini.content_hash();
    }
    *report_out = rep.release();
    return DSRL_OK;
  });
}

dsrl_status dsrl_grad_check(const char* scene_cfg, double* max_rel_err) {
  if (need(scene_cfg && max_rel_err, "dsrl_grad_check: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    cfg::Ini scene_ini = cfg::Ini::from_file(scene_cfg);
    sim::SceneConfig<double> scene = cfg::scene_from_ini(scene_ini);
    int steps = int(scene_ini.get_int("gradcheck", "steps", 3));
    uint64_t seed = uint64_t(scene_ini.get_int("gradcheck", "seed", 7));

    sim::MpmSim<double> sim(scene);
    sim::FullState<double> st = sim.initial_state();
    Pcg32 rng(seed, 13);
    for (auto& v : st.v)
      v = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)};

    // Scalar loss: fixed random weighting of every rolled-out position.
    size_t n = st.size();
    std::vector<std::vector<double>> weights;
    weights.resize(size_t(steps));
    for (auto& w : weights) {
      w.resize(n * 3);
      for (auto& v : w) v = rng.uniform(-1, 1);
    }
    ad::Program<double> prog;
    prog.leaves.push_back({sim::flatten_vec3(st.x), n, 3});
    prog.build = [&](ad::Tape<double>& t, const std::vector<ad::VarId>& l) {
      sim::SimStateVars sv;
      sv.x = l[0];
      sv.v = t.constant(sim::flatten_vec3(st.v), n, 3);
      sv.F = t.constant(sim::flatten_mat3(st.F), n, 9);
      sv.C = t.constant(sim::flatten_mat3(st.C), n, 9);
      std::vector<Vec3<double>> rt = st.rigid_trans;
      double time = 0;
      sim::Action<double> zero(scene.action_dim(), 0.0);
      ad::VarId acc = t.scalar_constant(0.0);
      for (int i = 0; i < steps; i++) {
        std::vector<Vec3<double>> rt_next;
        sv = sim::sim_step_op(t, sim, sv, rt, time, zero, ad::kNoVar, &rt_next);
        rt = rt_next;
        time += scene.dt * scene.substeps;
        ad::VarId w = t.constant(weights[size_t(i)], n, 3);
        acc = ad::axpby(t, 1.0, acc, 1.0, ad::sum(t, ad::mul(t, sv.x, w)));
      }
      return acc;
    };
    ad::GradCheckReport rep = ad::check_gradient(prog, 0, 1e-5);
    *max_rel_err = rep.max_rel_err;
    return DSRL_OK;
  });
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

size_t dsrl_report_count(const dsrl_report* report) {
  return report ? report->reports.size() : 0;
}

dsrl_status dsrl_report_name(const dsrl_report* report, size_t index, char* buf,
                             size_t capacity) {
  if (need(report && buf, "dsrl_report_name: null argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  if (need(index < report->reports.size(), "dsrl_report_name: index out of range") !=
      DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  const std::string& name = report->reports[index].metric;
  if (need(capacity > name.size(), "dsrl_report_name: buffer too small") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  std::memcpy(buf, name.c_str(), name.size() + 1);
  return DSRL_OK;
}

dsrl_status dsrl_report_stats(const dsrl_report* report, size_t index, double* mean,
                              double* std_dev, size_t* n) {
  if (need(report && index < report->reports.size(),
           "dsrl_report_stats: bad report/index") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  const auto& r = report->reports[index];
  if (mean) *mean = r.mean;
  if (std_dev) *std_dev = r.std_dev;
  if (n) *n = r.values.size();
  return DSRL_OK;
}

dsrl_status dsrl_report_values(const dsrl_report* report, size_t index, double* buf,
                               size_t capacity) {
  if (need(report && buf && index < report->reports.size(),
           "dsrl_report_values: bad argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  const auto& v = report->reports[index].values;
  if (need(capacity >= v.size(), "dsrl_report_values: buffer too small") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  std::memcpy(buf, v.data(), v.size() * sizeof(double));
  return DSRL_OK;
}

dsrl_status dsrl_report_write_csv(const dsrl_report* report, size_t index,
                                  const char* path) {
  if (need(report && path && index < report->reports.size(),
           "dsrl_report_write_csv: bad argument") != DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    eval::write_csv(report->reports[index], path);
    return DSRL_OK;
  });
}

dsrl_status dsrl_report_write_json(const dsrl_report* report, const char* command,
                                   const char* path) {
  if (need(report && command && path, "dsrl_report_write_json: null argument") !=
      DSRL_OK)
    return DSRL_ERR_INVALID_ARGUMENT;
  return guarded([&] {
    eval::write_json_summary(report->reports, command, path);
    return DSRL_OK;
  });
}

void dsrl_report_close(dsrl_report* report) { delete report; }

}  // extern "C"
