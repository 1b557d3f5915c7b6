#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "diffsrl/mpm_tape.hpp"
#include "diffsrl/optim.hpp"
#include "diffsrl/regulator.hpp"
#include "diffsrl/training.hpp"

namespace diffsrl::train {

double beta_schedule(int epoch, double beta0, double lambda) {
  require(epoch >= 0, "beta_schedule: epoch must be >= 0");
  return beta0 * std::pow(lambda, double(epoch));
}

template <class Real>
Real multi_step_loss(const std::vector<metrics::PointCloud<Real>>& ground_truth,
                     const std::vector<metrics::PointCloud<Real>>& rolled, Real gamma) {
  require(ground_truth.size() == rolled.size(), "multi_step_loss: length mismatch");
  Real loss = 0;
  Real w = 1;
  for (size_t i = 0; i < ground_truth.size(); i++) {
    require(ground_truth[i].size() == rolled[i].size(),
            "multi_step_loss: particle count mismatch");
    loss += w * metrics::chamfer(ground_truth[i], rolled[i]);
    w *= gamma;
  }
  return loss;
}

template float multi_step_loss(const std::vector<metrics::PointCloud<float>>&, const std::vector<metrics::PointCloud<float>>&, float);
template double multi_step_loss(const std::vector<metrics::PointCloud<double>>&, const std::vector<metrics::PointCloud<double>>&, double);

double total_loss(double multi_step, double constraint, double beta) {
  require(beta >= 0 && beta <= 1, "total_loss: beta must be in [0, 1]");
  return (1.0 - beta) * multi_step + beta * constraint;
}

namespace {

// Decoded clouds are squashed into the simulation domain before regulation;
// identity on [3dx, 1-4dx], saturating outside. Shared between the tape path
// and standalone evaluation.
template <class Real>
void domain_clamp_params(const sim::SceneConfig<Real>& scene, Real& lo, Real& hi,
                         Real& band) {
  Real dx = scene.dx();
  lo = Real(2) * dx;
  hi = Real(1) - Real(3) * dx;
  band = dx;
}

template <class Real>
struct EpochStats {
  double ms = 0, constraint = 0, total = 0;
  size_t count = 0;
};

// Decoder output bias starts at the train-split observation centroid so the
// initial decode lands on the data rather than the domain center.
template <class Real>
void init_decoder_bias(nn::ModelBundle<Real>& model, const Dataset& data) {
  auto [b, e] = data.split("train");
  Vec3<double> c{0, 0, 0};
  size_t count = 0;
  for (size_t traj = b; traj < e; traj++) {
    auto obs = data.obs_at<double>(traj, 0);
    for (const auto& p : obs) c += p;
    count += obs.size();
  }
  if (count == 0) return;
  c = c / double(count);
  auto& bias = model.params[model.params.index_of("dec.out.b")];
  for (size_t i = 0; i < bias.data.size(); i++) bias.data[i] = Real(c[int(i % 3)]);
}

template <class Real>
void zero_grads(std::vector<std::vector<Real>>& grads, const nn::ParamSet<Real>& p) {
  grads.resize(p.tensors.size());
  for (size_t i = 0; i < grads.size(); i++)
    grads[i].assign(p.tensors[i].data.size(), Real(0));
}

// Forward-only reconstruction metric used for validation logging:
// sum_{i=0..k} chamfer(gt_i, rolled_i) from the regulated decode.
template <class Real>
double recon_metric_impl(const sim::MpmSim<Real>& sim, const Dataset& data,
                         const nn::ModelBundle<Real>& model, size_t traj, int k,
                         int emd_iters) {
  const sim::SceneConfig<Real>& scene = sim.scene();
  sim::FullState<Real> gt0 = data.state_at<Real>(traj, 0);
  auto obs0 = data.obs_at<Real>(traj, 0);
  auto latent = nn::encode(model, obs0);
  auto decoded = nn::decode(model, latent);
  Real lo, hi, band;
  domain_clamp_params(scene, lo, hi, band);
  ad::detail::SoftClampNode<Real> clamp;
  clamp.lo = lo;
  clamp.hi = hi;
  clamp.band = band;
  for (auto& p : decoded)
    for (int c = 0; c < 3; c++) p[c] = clamp.fwd1(p[c]);

  reg::RegulateOptions<Real> opts;
  opts.emd_max_iters = emd_iters;
  reg::RegulatedState<Real> rs = reg::regulate(scene, gt0, decoded, opts);

  double metric = double(metrics::chamfer(rs.state.x, obs0));
  sim::FullState<Real> cur = rs.state;
  for (int i = 1; i <= k; i++) {
    cur = sim.step(cur, data.action_at<Real>(traj, size_t(i - 1)));
    metric += double(metrics::chamfer(cur.x, data.obs_at<Real>(traj, size_t(i))));
  }
  return metric;
}

template <class Real>
TrainResult train_diffsrl_impl(const Dataset& data, const sim::SceneConfig<double>& scene_d,
                               const cfg::TrainSettings& settings,
                               const std::string& ckpt_path, bool resume) {
  settings.validate(data.length);
  sim::SceneConfig<Real> scene = scene_d.cast<Real>();
  require(scene.sampler.count == data.particles,
          "train: scene particle count does not match the dataset");
  sim::MpmSim<Real> sim(scene);

  nn::ModelBundle<Real> model;
  model.dims.d_latent = settings.d_latent;
  model.dims.n_dec = int(data.particles);
  model.dims.action_dim = int(data.action_dim);
  int start_epoch = 0;
  if (resume && !ckpt_path.empty() && std::filesystem::exists(ckpt_path)) {
    model = nn::load_bundle<Real>(ckpt_path);
    std::ifstream st(ckpt_path + ".state");
    if (st.good()) st >> start_epoch;
  } else {
    nn::add_encoder(model, settings.seed);
    nn::add_decoder(model, settings.seed + 1);
    init_decoder_bias(model, data);
  }

  double beta0 = settings.beta_starts_at_one ? 1.0 : settings.beta0;
  nn::Adam<Real> opt(model.params, settings.lr);
  opt.warmup_steps = 50;
  LossReport report;

  auto [tr_begin, tr_end] = data.split("train");
  auto [va_begin, va_end] = data.split("val");
  std::vector<size_t> order(tr_end - tr_begin);
  std::iota(order.begin(), order.end(), tr_begin);

  Real lo, hi, band;
  domain_clamp_params(scene, lo, hi, band);
  const int k = settings.k;

  std::vector<std::vector<Real>> grads;
  zero_grads(grads, model.params);
  int opt_step = 0;

  for (int epoch = start_epoch; epoch < settings.epochs; epoch++) {
    double beta = beta_schedule(epoch, beta0, settings.lambda);
    Pcg32 shuffle_rng(settings.seed + 17 * uint64_t(epoch), 23);
    for (size_t i = order.size(); i > 1; i--)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(uint32_t(i))]);

    EpochStats<Real> epoch_stats;
    double batch_ms = 0, batch_c = 0, batch_total = 0;
    int in_batch = 0;

    for (size_t oi = 0; oi < order.size(); oi++) {
      size_t traj = order[oi];
      ad::Tape<Real> t;
      auto ids = nn::bind_params(t, model.params, true);

      sim::FullState<Real> gt0 = data.state_at<Real>(traj, 0);
      auto obs0 = data.obs_at<Real>(traj, 0);
      ad::VarId obs_var = t.constant(metrics::flat_from_cloud(obs0), obs0.size(), 3);
      ad::VarId latent = nn::build_encoder(t, model, ids, obs_var);
      ad::VarId decoded = nn::build_decoder(t, model, ids, latent);
      ad::VarId clamped = ad::soft_clamp(t, decoded, lo, hi, band);

      reg::RegulateOptions<Real> ropts;
      ropts.emd_max_iters = settings.emd_iters;
      ropts.penetration_loss = !settings.ablate_penetration;
      reg::RegulateVars rv = reg::regulate_op(t, scene, gt0, clamped, ropts);

      sim::SimStateVars sv;
      sv.x = rv.positions;
      sv.v = t.constant(sim::flatten_vec3(gt0.v), gt0.size(), 3);
      sv.F = t.constant(sim::flatten_mat3(gt0.F), gt0.size(), 9);
      sv.C = t.constant(sim::flatten_mat3(gt0.C), gt0.size(), 9);

      std::vector<Vec3<Real>> rigid = gt0.rigid_trans;
      Real time = 0;
      ad::VarId ms_var = t.scalar_constant(Real(0));
      Real gamma_w = 1;
      for (int i = 1; i <= k; i++) {
        std::vector<Vec3<Real>> rigid_next;
        sv = sim::sim_step_op(t, sim, sv, rigid, time,
                              data.action_at<Real>(traj, size_t(i - 1)), ad::kNoVar,
                              &rigid_next);
        rigid = rigid_next;
        time += scene.dt * Real(scene.substeps);
        auto gt_obs = data.obs_at<Real>(traj, size_t(i));
        ad::VarId gt_var = t.constant(metrics::flat_from_cloud(gt_obs), gt_obs.size(), 3);
        ad::VarId cd = metrics::chamfer_op(t, sv.x, gt_var);
        ms_var = ad::axpby(t, Real(1), ms_var, gamma_w, cd);
        gamma_w *= settings.gamma;
      }
      ad::VarId total_var =
          ad::axpby(t, Real(1.0 - beta), ms_var, Real(beta), rv.loss);
      t.backward_scalar(total_var, Real(1));

      for (size_t g = 0; g < ids.size(); g++) {
        const auto& gsrc = t.grad(ids[g]);
        auto& gdst = grads[g];
        for (size_t j = 0; j < gdst.size(); j++) gdst[j] += gsrc[j];
      }
      double ms_d = double(t.scalar(ms_var));
      double c_d = double(t.scalar(rv.loss));
      double total_d = total_loss(ms_d, c_d, beta);
      batch_ms += ms_d;
      batch_c += c_d;
      batch_total += total_d;
      in_batch++;
      epoch_stats.ms += ms_d;
      epoch_stats.constraint += c_d;
      epoch_stats.total += total_d;
      epoch_stats.count++;

      if (in_batch == settings.batch || oi + 1 == order.size()) {
        for (auto& g : grads)
          for (auto& v : g) v /= Real(in_batch);
        opt.step(model.params, grads, settings.clip_norm);
        report.steps.push_back({epoch, opt_step++, batch_ms / in_batch,
                                batch_c / in_batch, batch_total / in_batch, beta});
        zero_grads(grads, model.params);
        batch_ms = batch_c = batch_total = 0;
        in_batch = 0;
      }
    }

    double n = double(std::max<size_t>(1, epoch_stats.count));
    report.epochs.push_back({epoch, -1, epoch_stats.ms / n, epoch_stats.constraint / n,
                             epoch_stats.total / n, beta});

    size_t val_n = std::min<size_t>(size_t(settings.val_samples), va_end - va_begin);
    double val = 0;
    for (size_t v = 0; v < val_n; v++)
      val += recon_metric_impl(sim, data, model, va_begin + v, k, settings.emd_iters);
    report.val_metric.push_back(val_n ? val / double(val_n) : 0.0);

    if (!ckpt_path.empty()) {
      nn::save_bundle(ckpt_path, model);
      std::ofstream st(ckpt_path + ".state");
      st << (epoch + 1) << "\n";
    }
  }

  TrainResult out;
  out.model = model.template cast<float>();
  out.report = std::move(report);
  return out;
}

template <class Real>
TrainResult train_baseline_impl(const std::string& kind, const Dataset& data,
                                const sim::SceneConfig<double>& scene_d,
                                const cfg::TrainSettings& settings,
                                const std::string& ckpt_path) {
  require(kind == "autoencoder" || kind == "forward" || kind == "inverse",
          "train-baseline: unknown kind " + kind);
  settings.validate(data.length);

  nn::ModelBundle<Real> model;
  model.dims.d_latent = settings.d_latent;
  model.dims.n_dec = int(data.particles);
  model.dims.action_dim = int(data.action_dim);
  nn::add_encoder(model, settings.seed);
  if (kind == "autoencoder") {
    nn::add_decoder(model, settings.seed + 1);
    init_decoder_bias(model, data);
  }
  if (kind == "forward") nn::add_forward_model(model, settings.seed + 2);
  if (kind == "inverse") nn::add_inverse_model(model, settings.seed + 3);

  nn::Adam<Real> opt(model.params, settings.lr);
  opt.warmup_steps = 50;
  LossReport report;
  auto [tr_begin, tr_end] = data.split("train");
  std::vector<size_t> order(tr_end - tr_begin);
  std::iota(order.begin(), order.end(), tr_begin);

  std::vector<std::vector<Real>> grads;
  zero_grads(grads, model.params);
  int opt_step = 0;

  for (int epoch = 0; epoch < settings.epochs; epoch++) {
    Pcg32 shuffle_rng(settings.seed + 31 * uint64_t(epoch), 29);
    for (size_t i = order.size(); i > 1; i--)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(uint32_t(i))]);

    double epoch_loss = 0;
    double batch_loss = 0;
    int in_batch = 0;
    size_t count = 0;

    for (size_t oi = 0; oi < order.size(); oi++) {
      size_t traj = order[oi];
      size_t step = shuffle_rng.uniform_int(uint32_t(data.length));

      ad::Tape<Real> t;
      auto ids = nn::bind_params(t, model.params, true);
      ad::VarId loss;
      if (kind == "autoencoder") {
        auto obs = data.obs_at<Real>(traj, step);
        ad::VarId o = t.constant(metrics::flat_from_cloud(obs), obs.size(), 3);
        ad::VarId lat = nn::build_encoder(t, model, ids, o);
        ad::VarId dec = nn::build_decoder(t, model, ids, lat);
        loss = metrics::chamfer_op(t, dec, o);
      } else {
        auto obs_t = data.obs_at<Real>(traj, step);
        auto obs_t1 = data.obs_at<Real>(traj, step + 1);
        auto act = data.action_at<Real>(traj, step);
        ad::VarId o0 = t.constant(metrics::flat_from_cloud(obs_t), obs_t.size(), 3);
        ad::VarId o1 = t.constant(metrics::flat_from_cloud(obs_t1), obs_t1.size(), 3);
        ad::VarId h0 = nn::build_encoder(t, model, ids, o0);
        ad::VarId h1 = nn::build_encoder(t, model, ids, o1);
        if (kind == "forward") {
          ad::VarId a = t.constant(act, 1, act.size());
          loss = ad::mean_sq_diff(t, nn::build_forward_model(t, model, ids, h0, a), h1);
        } else {
          ad::VarId a = t.constant(act, 1, act.size());
          loss = ad::mean_sq_diff(t, nn::build_inverse_model(t, model, ids, h0, h1), a);
        }
      }
      t.backward_scalar(loss, Real(1));
      for (size_t g = 0; g < ids.size(); g++) {
        const auto& gsrc = t.grad(ids[g]);
        auto& gdst = grads[g];
        for (size_t j = 0; j < gdst.size(); j++) gdst[j] += gsrc[j];
      }
      batch_loss += double(t.scalar(loss));
      epoch_loss += double(t.scalar(loss));
      count++;
      in_batch++;
      if (in_batch == settings.batch || oi + 1 == order.size()) {
        for (auto& g : grads)
          for (auto& v : g) v /= Real(in_batch);
        opt.step(model.params, grads, settings.clip_norm);
        report.steps.push_back({epoch, opt_step++, batch_loss / in_batch, 0.0,
                                batch_loss / in_batch, 0.0});
        zero_grads(grads, model.params);
        batch_loss = 0;
        in_batch = 0;
      }
    }
    report.epochs.push_back({epoch, -1, epoch_loss / double(count), 0.0,
                             epoch_loss / double(count), 0.0});
    report.val_metric.push_back(0.0);
  }

  // Encoder-only baselines get a decoder fitted against the frozen encoder so
  // they can be evaluated on reconstruction.
  if (kind != "autoencoder") {
    nn::ModelBundle<Real> dec_model;
    dec_model.dims = model.dims;
    nn::add_decoder(dec_model, settings.seed + 11);
    init_decoder_bias(dec_model, data);
    nn::Adam<Real> dopt(dec_model.params, settings.lr);
    dopt.warmup_steps = 50;
    std::vector<std::vector<Real>> dgrads;
    zero_grads(dgrads, dec_model.params);
    int in_batch2 = 0;
    for (int epoch = 0; epoch < settings.epochs; epoch++) {
      Pcg32 rng(settings.seed + 41 * uint64_t(epoch), 37);
      for (size_t oi = 0; oi < order.size(); oi++) {
        size_t traj = order[oi];
        size_t step = rng.uniform_int(uint32_t(data.length + 1));
        auto obs = data.obs_at<Real>(traj, step);
        auto lat = nn::encode(model, obs);

        ad::Tape<Real> t;
        auto ids = nn::bind_params(t, dec_model.params, true);
        ad::VarId l = t.constant(lat, 1, lat.size());
        ad::VarId dec = nn::build_decoder(t, dec_model, ids, l);
        ad::VarId o = t.constant(metrics::flat_from_cloud(obs), obs.size(), 3);
        ad::VarId loss = metrics::chamfer_op(t, dec, o);
        t.backward_scalar(loss, Real(1));
        for (size_t g = 0; g < ids.size(); g++) {
          const auto& gsrc = t.grad(ids[g]);
          auto& gdst = dgrads[g];
          for (size_t j = 0; j < gdst.size(); j++) gdst[j] += gsrc[j];
        }
        in_batch2++;
        if (in_batch2 == settings.batch || oi + 1 == order.size()) {
          for (auto& g : dgrads)
            for (auto& v : g) v /= Real(in_batch2);
          dopt.step(dec_model.params, dgrads, settings.clip_norm);
          zero_grads(dgrads, dec_model.params);
          in_batch2 = 0;
        }
      }
    }
    // Merge the fitted decoder into the bundle.
    for (auto& tensor : dec_model.params.tensors)
      model.params.tensors.push_back(std::move(tensor));
  }

  if (!ckpt_path.empty()) nn::save_bundle(ckpt_path, model);

  TrainResult out;
  out.model = model.template cast<float>();
  out.report = std::move(report);
  return out;
}

}  // namespace

TrainResult train_diffsrl(const Dataset& data, const sim::SceneConfig<double>& scene,
                          const cfg::TrainSettings& settings,
                          const std::string& ckpt_path, bool resume) {
  TrainResult r = settings.precision == "f64"
                      ? train_diffsrl_impl<double>(data, scene, settings, ckpt_path, resume)
                      : train_diffsrl_impl<float>(data, scene, settings, ckpt_path, resume);
  if (!ckpt_path.empty()) nn::save_bundle(ckpt_path, r.model);
  return r;
}

TrainResult train_baseline(const std::string& kind, const Dataset& data,
                           const sim::SceneConfig<double>& scene,
                           const cfg::TrainSettings& settings,
                           const std::string& ckpt_path) {
  TrainResult r = settings.precision == "f64"
                      ? train_baseline_impl<double>(kind, data, scene, settings, ckpt_path)
                      : train_baseline_impl<float>(kind, data, scene, settings, ckpt_path);
  if (!ckpt_path.empty()) nn::save_bundle(ckpt_path, r.model);
  return r;
}

// Shared with the evaluation module.
template <class Real>
double recon_metric(const sim::MpmSim<Real>& sim, const Dataset& data,
                    const nn::ModelBundle<Real>& model, size_t traj, int k,
                    int emd_iters) {
  return recon_metric_impl(sim, data, model, traj, k, emd_iters);
}

template double recon_metric(const sim::MpmSim<float>&, const Dataset&, const nn::ModelBundle<float>&, size_t, int, int);
template double recon_metric(const sim::MpmSim<double>&, const Dataset&, const nn::ModelBundle<double>&, size_t, int, int);

}  // namespace diffsrl::train
