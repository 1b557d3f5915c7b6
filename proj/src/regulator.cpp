#include "diffsrl/regulator.hpp"

#include <algorithm>

namespace diffsrl::reg {

namespace {

// Projects one point out of every violated primitive, recording the path.
// Round-robin with the same cap as min_exit_displacement; straight-line exit
// candidates are unnecessary here because gradients need the actual path.
template <class Real>
bool project_particle(const std::vector<geom::RigidPrimitive<Real>>& rigids,
                      Vec3<Real>& p, Real margin, std::vector<PathStep<Real>>& path) {
  for (int round = 0; round < geom::kMaxProjectionRounds; round++) {
    bool moved = false;
    for (size_t b = 0; b < rigids.size(); b++) {
      auto s = geom::sdf_eval(rigids[b], p);
      if (double(s.dist) < double(margin) - geom::kFeasTol) {
        PathStep<Real> st;
        st.body = int(b);
        st.point = p;
        st.step = margin - s.dist;
        path.push_back(st);
        p += s.grad * st.step;
        moved = true;
      }
    }
    if (!moved) return true;
  }
  return geom::first_violation(rigids, p, margin) < 0;
}

}  // namespace

template <class Real>
ProjectionResult<Real> resolve_penetration(const sim::SceneConfig<Real>& scene,
                                           const std::vector<geom::RigidPrimitive<Real>>& rigids,
                                           const metrics::PointCloud<Real>& decoded,
                                           Real margin) {
  ProjectionResult<Real> out;
  out.points = decoded;
  if (rigids.empty() || decoded.empty()) return out;

  // Algorithm-1 gate: particle-in-cell mass, then an SDF band on occupied
  // nodes. A particle is within sqrt(3)/2 dx of its nearest node, so flagging
  // nodes with sdf < margin + sqrt(3)/2 dx is a conservative superset of the
  // dense per-particle test.
  const int G = scene.grid_res;
  const Real dx = scene.dx();
  sim::GridField<Real> field = sim::compute_grid_mass(scene, decoded,
                                                      scene.particle_mass());
  const Real band = margin + Real(0.8660254037844387) * dx;
  std::vector<char> flagged(field.mass.size(), 0);
  for (size_t node = 0; node < field.mass.size(); node++) {
    if (field.mass[node] <= Real(0)) continue;
    int gi = int(node / (size_t(G) * G)), gj = int((node / G) % G), gk = int(node % G);
    Vec3<Real> gx{Real(gi) * dx, Real(gj) * dx, Real(gk) * dx};
    for (const auto& r : rigids) {
      if (geom::sdf_eval(r, gx).dist < band) {
        flagged[node] = 1;
        break;
      }
    }
  }

  out.paths.resize(decoded.size());
  for (size_t p = 0; p < decoded.size(); p++) {
    const Vec3<Real>& x = decoded[p];
    int ni = std::clamp(int(std::floor(double(x.x) * G + 0.5)), 0, G - 1);
    int nj = std::clamp(int(std::floor(double(x.y) * G + 0.5)), 0, G - 1);
    int nk = std::clamp(int(std::floor(double(x.z) * G + 0.5)), 0, G - 1);
    size_t node = (size_t(ni) * G + size_t(nj)) * size_t(G) + size_t(nk);
    if (!flagged[node]) continue;
    out.gated_checked++;

    Vec3<Real> moved_pt = x;
    std::vector<PathStep<Real>> path;
    if (!project_particle(rigids, moved_pt, margin, path)) {
      Real worst = 0;
      for (const auto& r : rigids)
        worst = std::min(worst, geom::sdf_eval(r, moved_pt).dist - margin);
      fail(format("resolve_penetration: particle %zu infeasible after %d rounds "
                  "(residual depth %g)", p, geom::kMaxProjectionRounds,
                  double(-worst)));
    }
    if (!path.empty()) {
      out.points[p] = moved_pt;
      for (const auto& st : path) out.loss += st.step;
      out.paths[p] = std::move(path);
      out.moved.push_back(uint32_t(p));
    }
  }
  return out;
}

template <class Real>
metrics::PointCloud<Real> resolve_smoothness(const metrics::PointCloud<Real>& ground_truth_obs,
                                             const metrics::PointCloud<Real>& points,
                                             int max_iters,
                                             metrics::MatchResult* match_out) {
  require(ground_truth_obs.size() == points.size(),
          "resolve_smoothness: cardinality mismatch");
  metrics::PointCloud<double> a(ground_truth_obs.size()), b(points.size());
  for (size_t i = 0; i < a.size(); i++) a[i] = ground_truth_obs[i].template cast<double>();
  for (size_t i = 0; i < b.size(); i++) b[i] = points[i].template cast<double>();
  metrics::MatchResult m = metrics::emd_match(a, b, max_iters);
  metrics::PointCloud<Real> out(points.size());
  for (size_t i = 0; i < points.size(); i++) out[i] = points[m.permutation[i]];
  if (match_out) *match_out = std::move(m);
  return out;
}

template <class Real>
RegulatedState<Real> regulate(const sim::SceneConfig<Real>& scene,
                              const sim::FullState<Real>& ground_truth,
                              const metrics::PointCloud<Real>& decoded_obs,
                              const RegulateOptions<Real>& opts) {
  require(decoded_obs.size() == ground_truth.size(),
          "regulate: decoded cardinality must match the ground-truth state");
  Real margin = opts.margin >= Real(0) ? opts.margin : scene.margin();
  std::vector<geom::RigidPrimitive<Real>> rigids = scene.primitives;
  for (size_t b = 0; b < rigids.size(); b++)
    rigids[b].trans = ground_truth.rigid_trans[b];

  ProjectionResult<Real> proj = resolve_penetration(scene, rigids, decoded_obs, margin);

  RegulatedState<Real> out;
  metrics::PointCloud<Real> ordered = resolve_smoothness(
      sim::observe(ground_truth), proj.points, opts.emd_max_iters, &out.matching);

  out.state.x = ordered;
  out.state.v = ground_truth.v;
  out.state.F = ground_truth.F;
  out.state.C = ground_truth.C;
  out.state.rigid_trans = ground_truth.rigid_trans;
  out.state.time = ground_truth.time;
  out.constraint_loss = opts.penetration_loss ? proj.loss : Real(0);
  if (opts.add_matching_residual && opts.penetration_loss)
    out.constraint_loss += Real(out.matching.cost);
  return out;
}

// ---------------------------------------------------------------------------
// Tape node
// ---------------------------------------------------------------------------

namespace {

template <class Real>
struct PenetrationNode final : ad::Node<Real> {
  const sim::SceneConfig<Real>* scene = nullptr;
  std::vector<geom::RigidPrimitive<Real>> rigids;
  Real margin = 0;
  bool differentiable = true;  // false in ablation mode (safety clamp only)
  std::vector<std::vector<PathStep<Real>>> paths;

  const char* name() const override { return "resolve_penetration"; }

  void forward(ad::Tape<Real>& t) override {
    metrics::PointCloud<Real> decoded = metrics::cloud_from_flat(t.val(this->ins[0]));
    ProjectionResult<Real> r = resolve_penetration(*scene, rigids, decoded, margin);
    paths = std::move(r.paths);
    t.val(this->outs[0]) = metrics::flat_from_cloud(r.points);
    t.val(this->outs[1])[0] = differentiable ? r.loss : Real(0);
  }

  void backward(ad::Tape<Real>& t) override {
    auto& dIn = t.grad(this->ins[0]);
    const auto& dPts = t.grad(this->outs[0]);
    if (!differentiable) {
      // Safety clamp: moved particles are detached; pass gradients through
      // for unmoved ones.
      for (size_t p = 0; p < paths.size(); p++) {
        if (!paths[p].empty()) continue;
        for (int c = 0; c < 3; c++) dIn[p * 3 + size_t(c)] += dPts[p * 3 + size_t(c)];
      }
      return;
    }
    Real dLoss = t.grad(this->outs[1])[0];
    for (size_t p = 0; p < paths.size(); p++) {
      Vec3<Real> pbar{dPts[p * 3], dPts[p * 3 + 1], dPts[p * 3 + 2]};
      // Reverse the projection path: p_{s+1} = p_s + (margin - phi) grad,
      // cost += margin - phi. Jacobian^T = I - g g^T + step * H.
      for (size_t s = paths[p].size(); s-- > 0;) {
        const PathStep<Real>& st = paths[p][s];
        const auto& prim = rigids[size_t(st.body)];
        auto sd = geom::sdf_eval(prim, st.point);
        Mat3<Real> H = geom::sdf_hessian(prim, st.point);
        Vec3<Real> g = sd.grad;
        pbar = pbar - g * g.dot(pbar) + (H * pbar) * st.step - g * dLoss;
      }
      for (int c = 0; c < 3; c++) dIn[p * 3 + size_t(c)] += pbar[c];
    }
  }
};

}  // namespace

template <class Real>
RegulateVars regulate_op(ad::Tape<Real>& t, const sim::SceneConfig<Real>& scene,
                         const sim::FullState<Real>& ground_truth,
                         ad::VarId decoded, const RegulateOptions<Real>& opts,
                         metrics::MatchResult* match_out) {
  require(t.rows(decoded) == ground_truth.size(),
          "regulate_op: decoded cardinality must match the ground-truth state");
  Real margin = opts.margin >= Real(0) ? opts.margin : scene.margin();

  auto node = std::make_unique<PenetrationNode<Real>>();
  node->scene = &scene;
  node->rigids = scene.primitives;
  for (size_t b = 0; b < node->rigids.size(); b++)
    node->rigids[b].trans = ground_truth.rigid_trans[b];
  node->margin = margin;
  node->differentiable = opts.penetration_loss;
  node->ins = {decoded};
  size_t n = t.rows(decoded);
  ad::VarId moved = t.alloc(n, 3);
  ad::VarId loss = t.alloc(1, 1);
  node->outs = {moved, loss};
  t.record(std::move(node));

  metrics::PointCloud<Real> moved_cloud = metrics::cloud_from_flat(t.val(moved));
  metrics::MatchResult match;
  resolve_smoothness(sim::observe(ground_truth), moved_cloud, opts.emd_max_iters,
                     &match);
  RegulateVars out;
  out.positions = ad::gather_rows(t, moved, match.permutation);
  if (opts.add_matching_residual && opts.penetration_loss) {
    ad::VarId gt = t.constant(metrics::flat_from_cloud(sim::observe(ground_truth)),
                              n, 3);
    ad::VarId diff = ad::axpby(t, Real(1), out.positions, Real(-1), gt);
    ad::VarId residual = ad::sum(t, ad::mul(t, diff, diff));
    out.loss = ad::axpby(t, Real(1), loss, Real(1), residual);
  } else {
    out.loss = loss;
  }
  if (match_out) *match_out = std::move(match);
  return out;
}

template ProjectionResult<float> resolve_penetration(const sim::SceneConfig<float>&, const std::vector<geom::RigidPrimitive<float>>&, const metrics::PointCloud<float>&, float);
template ProjectionResult<double> resolve_penetration(const sim::SceneConfig<double>&, const std::vector<geom::RigidPrimitive<double>>&, const metrics::PointCloud<double>&, double);
template metrics::PointCloud<float> resolve_smoothness(const metrics::PointCloud<float>&, const metrics::PointCloud<float>&, int, metrics::MatchResult*);
template metrics::PointCloud<double> resolve_smoothness(const metrics::PointCloud<double>&, const metrics::PointCloud<double>&, int, metrics::MatchResult*);
template RegulatedState<float> regulate(const sim::SceneConfig<float>&, const sim::FullState<float>&, const metrics::PointCloud<float>&, const RegulateOptions<float>&);
template RegulatedState<double> regulate(const sim::SceneConfig<double>&, const sim::FullState<double>&, const metrics::PointCloud<double>&, const RegulateOptions<double>&);
template RegulateVars regulate_op(ad::Tape<float>&, const sim::SceneConfig<float>&, const sim::FullState<float>&, ad::VarId, const RegulateOptions<float>&, metrics::MatchResult*);
template RegulateVars regulate_op(ad::Tape<double>&, const sim::SceneConfig<double>&, const sim::FullState<double>&, ad::VarId, const RegulateOptions<double>&, metrics::MatchResult*);

}  // namespace diffsrl::reg
