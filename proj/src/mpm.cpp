#include "diffsrl/mpm.hpp"

#include <algorithm>
#include <cstring>

#include "mpm_internal.hpp"

namespace diffsrl::sim {

template <class Real>
metrics::PointCloud<Real> observe(const FullState<Real>& state) {
  return state.x;
}

template <class Real>
metrics::PointCloud<Real> observe_subsampled(const FullState<Real>& state,
                                             size_t m, uint64_t seed) {
  size_t n = state.size();
  require(m <= n, format("observe: subsample size %zu exceeds particle count %zu",
                         m, n));
  // Partial Fisher-Yates: first m entries of a shuffled index array.
  std::vector<uint32_t> idx(n);
  for (size_t i = 0; i < n; i++) idx[i] = uint32_t(i);
  Pcg32 rng(seed, 77);
  for (size_t i = 0; i < m; i++) {
    size_t j = i + rng.uniform_int(uint32_t(n - i));
    std::swap(idx[i], idx[j]);
  }
  metrics::PointCloud<Real> out(m);
  for (size_t i = 0; i < m; i++) out[i] = state.x[idx[i]];
  return out;
}

template <class Real>
GridField<Real> compute_grid_mass(const SceneConfig<Real>& scene,
                                  const metrics::PointCloud<Real>& points,
                                  Real particle_mass) {
  GridField<Real> field;
  field.res = scene.grid_res;
  field.dx = scene.dx();
  field.mass.assign(size_t(field.res) * field.res * field.res, Real(0));
  const Real inv_dx = scene.inv_dx();
  const int G = field.res;
  for (size_t p = 0; p < points.size(); p++) {
    const Vec3<Real>& x = points[p];
    if (!(x.x > Real(0) && x.x < Real(1) && x.y > Real(0) && x.y < Real(1) &&
          x.z > Real(0) && x.z < Real(1)))
      fail(format("compute_grid_mass: point %zu (%g, %g, %g) outside unit cube",
                  p, double(x.x), double(x.y), double(x.z)));
    int base[3];
    Vec3<Real> fx;
    for (int a = 0; a < 3; a++) {
      Real s = x[a] * inv_dx - Real(0.5);
      base[a] = int(std::floor(s));
      fx[a] = x[a] * inv_dx - Real(base[a]);
      if (base[a] < 0 || base[a] > G - 3)
        fail(format("compute_grid_mass: point %zu too close to the domain "
                    "boundary for the spline support", p));
    }
    Real w[3][3], dw[3][3];
    bspline_weights(fx, w, dw);
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++)
        for (int k = 0; k < 3; k++) {
          size_t node = size_t((base[0] + i) * G + (base[1] + j)) * size_t(G) +
                        size_t(base[2] + k);
          field.mass[node] += w[0][i] * w[1][j] * w[2][k] * particle_mass;
        }
  }
  return field;
}

// ---------------------------------------------------------------------------
// MpmSim
// ---------------------------------------------------------------------------

template <class Real>
MpmSim<Real>::MpmSim(SceneConfig<Real> scene) : scene_(std::move(scene)) {
  scene_.validate();
}

template <class Real>
FullState<Real> MpmSim<Real>::initial_state() const {
  const auto& sm = scene_.sampler;
  FullState<Real> s;
  size_t n = sm.count;
  s.x.resize(n);
  s.v.assign(n, Vec3<Real>{0, 0, 0});
  s.F.assign(n, Mat3<Real>::identity());
  s.C.assign(n, Mat3<Real>::zero());
  // Rejection sampling keeps the rest state clear of the primitives by the
  // contact margin, so ground-truth states start feasible.
  Pcg32 rng(sm.seed, 11);
  const Real clearance = scene_.margin();
  for (size_t p = 0; p < n; p++) {
    Vec3<Real> cand;
    bool ok = false;
    for (int attempt = 0; attempt < 1000 && !ok; attempt++) {
      Vec3<Real> u{Real(rng.uniform(-1, 1)), Real(rng.uniform(-1, 1)),
                   Real(rng.uniform(-1, 1))};
      cand = sm.center + u.cwise_mul(sm.half_extents);
      ok = true;
      for (const auto& prim : scene_.primitives)
        ok &= geom::sdf_eval(prim, cand).dist >= clearance;
    }
    require(ok, "initial_state: sampling region is covered by primitives");
    s.x[p] = cand;
  }
  for (const auto& prim : scene_.primitives) s.rigid_trans.push_back(prim.trans);
  s.time = 0;
  s.validate();
  return s;
}

template <class Real>
std::vector<Vec3<Real>> MpmSim<Real>::rigid_velocities(const Action<Real>& action) const {
  size_t want = scene_.action_dim();
  require(action.size() == want,
          format("step: action has %zu components, scene expects %zu",
                 action.size(), want));
  std::vector<Vec3<Real>> vel;
  size_t k = 0;
  for (const auto& prim : scene_.primitives) {
    if (prim.actuated) {
      Vec3<Real> a{action[k], action[k + 1], action[k + 2]};
      for (int c = 0; c < 3; c++)
        a[c] = std::clamp(a[c], -scene_.action_max, scene_.action_max);
      vel.push_back(a);
      k += 3;
    } else {
      vel.push_back(prim.velocity);
    }
  }
  return vel;
}

template <class Real>
void MpmSim<Real>::substep(const FullState<Real>& in, FullState<Real>& out,
                           const std::vector<Vec3<Real>>& rigid_vel, Workspace& ws,
                           bool save_intermediates) const {
  const int G = scene_.grid_res;
  const size_t G3 = size_t(G) * G * G;
  const Real dx = scene_.dx();
  const Real inv_dx = scene_.inv_dx();
  const Real dt = scene_.dt;
  const Real p_mass = scene_.particle_mass();
  const Real p_vol = scene_.particle_volume();
  const Real mu = scene_.material.mu();
  const Real la = scene_.material.lambda();
  const size_t n = in.size();

  // CFL guard: nothing may cross more than cfl*dx per substep.
  Real vmax = 0;
  for (size_t p = 0; p < n; p++)
    vmax = std::max(vmax, std::max({std::abs(in.v[p].x), std::abs(in.v[p].y),
                                    std::abs(in.v[p].z)}));
  for (const auto& rv : rigid_vel)
    vmax = std::max(vmax, std::max({std::abs(rv.x), std::abs(rv.y), std::abs(rv.z)}));
  if (vmax * dt > scene_.cfl * dx)
    fail(format("step: CFL violation, max speed %g exceeds %g at dt=%g",
                double(vmax), double(scene_.cfl * dx / dt), double(dt)));

  ws.gm.resize(G3);
  std::memset(ws.gm.data(), 0, G3 * sizeof(Real));
  ws.gmom.resize(G3);
  std::memset(ws.gmom.data(), 0, G3 * sizeof(Vec3<Real>));
  if (save_intermediates) ws.pd.resize(n);

  out.x.resize(n);
  out.v.resize(n);
  out.F.resize(n);
  out.C.resize(n);

  const Real stress_coef = -dt * p_vol * Real(4) * inv_dx * inv_dx;

  // P2G: deformation update, plasticity, stress, scatter. Serial so the
  // accumulation order (and thus the result) is deterministic.
  for (size_t p = 0; p < n; p++) {
    const Vec3<Real>& x = in.x[p];
    int base[3];
    Vec3<Real> fx;
    for (int a = 0; a < 3; a++) {
      Real s = x[a] * inv_dx - Real(0.5);
      base[a] = int(std::floor(s));
      fx[a] = x[a] * inv_dx - Real(base[a]);
      if (base[a] < 0 || base[a] > G - 3)
        fail(format("step: particle %zu escaped the domain (coord %d = %g)", p, a,
                    double(x[a])));
    }
    Mat3<Real> Ftr = (Mat3<Real>::identity() + in.C[p] * dt) * in.F[p];
    Real detFtr = Ftr.det();
    if (!(detFtr > Real(0)))
      fail(format("step: det(F) = %g <= 0 at particle %zu", double(detFtr), p));

    Svd3<Real> svd = svd3(Ftr);
    bool yielding = false;
    Vec3<Real> eps;
    Real ehn = 0;
    Vec3<Real> sig_new = von_mises_project(svd.sigma, mu,
                                           scene_.material.yield_stress, yielding,
                                           eps, ehn);
    Mat3<Real> Fnew =
        yielding ? svd.U * Mat3<Real>::diag(sig_new) * svd.V.transposed() : Ftr;
    Mat3<Real> R = svd.U * svd.V.transposed();
    Real J = sig_new.x * sig_new.y * sig_new.z;
    Mat3<Real> tau = (Fnew - R) * Fnew.transposed() * (Real(2) * mu);
    Real pressure = la * J * (J - Real(1));
    tau(0, 0) += pressure;
    tau(1, 1) += pressure;
    tau(2, 2) += pressure;
    Mat3<Real> Q = tau * stress_coef + in.C[p] * p_mass;

    Real w[3][3], dw[3][3];
    bspline_weights(fx, w, dw);
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++)
        for (int k = 0; k < 3; k++) {
          Real wt = w[0][i] * w[1][j] * w[2][k];
          Vec3<Real> d{(Real(i) - fx.x) * dx, (Real(j) - fx.y) * dx,
                       (Real(k) - fx.z) * dx};
          size_t node = size_t((base[0] + i) * G + (base[1] + j)) * size_t(G) +
                        size_t(base[2] + k);
          ws.gm[node] += wt * p_mass;
          ws.gmom[node] += (in.v[p] * p_mass + Q * d) * wt;
        }

    out.F[p] = Fnew;
    if (save_intermediates) {
      ParticleScratch<Real>& s = ws.pd[p];
      s.base[0] = base[0]; s.base[1] = base[1]; s.base[2] = base[2];
      s.fx = fx;
      s.Ftr = Ftr;
      s.svd = svd;
      s.sigma_new = sig_new;
      s.yielding = yielding;
      s.eps = eps;
      s.eps_hat_norm = ehn;
      s.Fnew = Fnew;
      s.R = R;
      s.tau = tau;
      s.Q = Q;
      s.J = J;
    }
  }

  if (conservation_probe) {
    ConservationSample<Real> cs;
    cs.particle_mass = p_mass * Real(n);
    for (size_t p = 0; p < n; p++) cs.particle_momentum += in.v[p] * p_mass;
    for (size_t i = 0; i < G3; i++) {
      cs.grid_mass += ws.gm[i];
      cs.grid_momentum += ws.gmom[i];
    }
    conservation_probe(cs);
  }

  // Grid update: momentum to velocity, gravity, rigid contact, boundary.
  // gu is only read at nodes that carry mass, which are all written below.
  ws.gu.resize(G3);
  const int bc = scene_.boundary_cells;
#pragma omp parallel for schedule(static) if (G3 >= 1048576)
  for (long node = 0; node < long(G3); node++) {
    if (ws.gm[node] <= Real(0)) continue;
    Vec3<Real> u = ws.gmom[node] / ws.gm[node] + scene_.gravity * dt;
    int gi = int(node / (G * G)), gj = int((node / G) % G), gk = int(node % G);
    Vec3<Real> gx{Real(gi) * dx, Real(gj) * dx, Real(gk) * dx};
    for (size_t b = 0; b < scene_.primitives.size(); b++) {
      geom::RigidPrimitive<Real> prim = scene_.primitives[b];
      prim.trans = in.rigid_trans[b];
      auto s = geom::sdf_eval(prim, gx);
      if (s.dist >= Real(0)) continue;
      Vec3<Real> vr = rigid_vel[b];
      Vec3<Real> rel = u - vr;
      Real vn = s.grad.dot(rel);
      if (vn >= Real(0)) continue;  // separating
      Vec3<Real> vt = rel - s.grad * vn;
      Real lt = vt.norm();
      Real mu_c = prim.friction;
      if (lt <= Real(1e-20)) {
        u = vr;
      } else {
        Real f = std::max(Real(0), Real(1) + mu_c * vn / lt);
        u = vt * f + vr;
      }
    }
    bool in_band = gi < bc || gi >= G - bc || gj < bc || gj >= G - bc ||
                   gk < bc || gk >= G - bc;
    if (in_band) {
      if (scene_.sticky_boundary) {
        u = {0, 0, 0};
      } else {
        int idx3[3] = {gi, gj, gk};
        for (int a = 0; a < 3; a++) {
          if (idx3[a] < bc && u[a] < Real(0)) u[a] = Real(0);
          if (idx3[a] >= G - bc && u[a] > Real(0)) u[a] = Real(0);
        }
      }
    }
    ws.gu[node] = u;
  }

  // G2P: gather velocities, rebuild APIC matrices, advect.
  const Real apic_coef = Real(4) * inv_dx * inv_dx;
#pragma omp parallel for schedule(static) if (n >= 16384)
  for (long pp = 0; pp < long(n); pp++) {
    size_t p = size_t(pp);
    const Vec3<Real>& x = in.x[p];
    int base[3];
    Vec3<Real> fx;
    for (int a = 0; a < 3; a++) {
      Real s = x[a] * inv_dx - Real(0.5);
      base[a] = int(std::floor(s));
      fx[a] = x[a] * inv_dx - Real(base[a]);
    }
    Real w[3][3], dw[3][3];
    bspline_weights(fx, w, dw);
    Vec3<Real> vnew{0, 0, 0};
    Mat3<Real> Cnew = Mat3<Real>::zero();
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++)
        for (int k = 0; k < 3; k++) {
          Real wt = w[0][i] * w[1][j] * w[2][k];
          Vec3<Real> d{(Real(i) - fx.x) * dx, (Real(j) - fx.y) * dx,
                       (Real(k) - fx.z) * dx};
          size_t node = size_t((base[0] + i) * G + (base[1] + j)) * size_t(G) +
                        size_t(base[2] + k);
          const Vec3<Real>& u = ws.gu[node];
          vnew += u * wt;
          Cnew += Mat3<Real>::outer(u, d) * (wt * apic_coef);
        }
    out.v[p] = vnew;
    out.C[p] = Cnew;
    out.x[p] = x + vnew * dt;
  }

  // Escape check after advection (hard error, not a clamp).
  for (size_t p = 0; p < n; p++) {
    const Vec3<Real>& x = out.x[p];
    for (int a = 0; a < 3; a++) {
      Real s = x[a] * inv_dx - Real(0.5);
      int b = int(std::floor(s));
      if (b < 0 || b > G - 3)
        fail(format("step: particle %zu escaped the domain after advection "
                    "(coord %d = %g)", p, a, double(x[a])));
    }
  }

  out.rigid_trans.resize(rigid_vel.size());
  for (size_t b = 0; b < rigid_vel.size(); b++)
    out.rigid_trans[b] = in.rigid_trans[b] + rigid_vel[b] * dt;
  out.time = in.time + dt;
}

template <class Real>
FullState<Real> MpmSim<Real>::step(const FullState<Real>& state,
                                   const Action<Real>& action) const {
  require(state.size() >= 1, "step: empty state");
  require(state.rigid_trans.size() == scene_.primitives.size(),
          "step: state rigid pose count does not match scene");
  std::vector<Vec3<Real>> rvel = rigid_velocities(action);
  Workspace ws;
  FullState<Real> cur = state;
  FullState<Real> next;
  for (int s = 0; s < scene_.substeps; s++) {
    substep(cur, next, rvel, ws, false);
    std::swap(cur, next);
  }
  return cur;
}

template <class Real>
std::vector<FullState<Real>> MpmSim<Real>::rollout(
    const FullState<Real>& state, const std::vector<Action<Real>>& actions) const {
  require(!actions.empty(), "rollout: need at least one action");
  std::vector<FullState<Real>> out;
  out.reserve(actions.size());
  const FullState<Real>* cur = &state;
  for (const auto& a : actions) {
    out.push_back(step(*cur, a));
    cur = &out.back();
  }
  return out;
}

template class MpmSim<float>;
template class MpmSim<double>;
template metrics::PointCloud<float> observe(const FullState<float>&);
template metrics::PointCloud<double> observe(const FullState<double>&);
template metrics::PointCloud<float> observe_subsampled(const FullState<float>&, size_t, uint64_t);
template metrics::PointCloud<double> observe_subsampled(const FullState<double>&, size_t, uint64_t);
template GridField<float> compute_grid_mass(const SceneConfig<float>&, const metrics::PointCloud<float>&, float);
template GridField<double> compute_grid_mass(const SceneConfig<double>&, const metrics::PointCloud<double>&, double);

}  // namespace diffsrl::sim
