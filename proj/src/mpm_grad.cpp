#include <algorithm>
#include <cstring>

#include "mpm_internal.hpp"

namespace diffsrl::sim {

namespace {

// Adjoint of B = U diag(h) V^T with respect to F, where (U, sigma, V) is the
// SVD of F. Off-diagonal pairs follow the fused rotation formula
//   a_ij = (s_j h_j - s_i h_i) / (s_j^2 - s_i^2),
//   b_ij = (s_i h_j - s_j h_i) / (s_j^2 - s_i^2),
// whose singularities are removable for symmetric h; h == 1 (rotation) and
// h == sigma (identity) are handled exactly. `sigma_bar` carries the adjoint
// of the h-values themselves (diagonal coupling), already mapped to
// d/d(sigma) by the caller.
template <class Real>
void accumulate_spectral_adjoint(const Svd3<Real>& svd, const Vec3<Real>& h,
                                 bool h_is_one, const Mat3<Real>& Bbar,
                                 Mat3<Real>& Ftilde_bar) {
  Mat3<Real> Bt = svd.U.transposed() * Bbar * svd.V;
  const Vec3<Real>& s = svd.sigma;
  for (int i = 0; i < 3; i++) {
    for (int j = i + 1; j < 3; j++) {
      Real alpha, beta;
      if (h_is_one) {
        alpha = Real(1) / (s[i] + s[j]);
        beta = -alpha;
      } else {
        Real D = s[j] * s[j] - s[i] * s[i];
        Real scale = s[i] * s[i] + s[j] * s[j] + Real(1e-30);
        Real Dmin = scale * Real(1e-10);
        if (std::abs(D) < Dmin) D = (D >= 0 ? Dmin : -Dmin);
        alpha = (s[j] * h[j] - s[i] * h[i]) / D;
        beta = (s[i] * h[j] - s[j] * h[i]) / D;
      }
      Ftilde_bar(i, j) += alpha * Bt(i, j) + beta * Bt(j, i);
      Ftilde_bar(j, i) += beta * Bt(i, j) + alpha * Bt(j, i);
    }
  }
  // Diagonal coupling (d sigma_k = dF~_kk) is applied by the caller, which
  // owns the h-Jacobian.
}

}  // namespace

template <class Real>
void MpmSim<Real>::substep_backward(Workspace& ws,
                                    const std::vector<Vec3<Real>>& rigid_vel,
                                    StateAdjoint<Real>& adj,
                                    std::vector<Vec3<Real>>* rigid_vel_adj) const {
  const int G = scene_.grid_res;
  const size_t G3 = size_t(G) * G * G;
  const Real dx = scene_.dx();
  const Real inv_dx = scene_.inv_dx();
  const Real dt = scene_.dt;
  const Real p_mass = scene_.particle_mass();
  const Real p_vol = scene_.particle_volume();
  const Real mu = scene_.material.mu();
  const Real la = scene_.material.lambda();
  const size_t n = ws.in.size();
  const Real stress_coef = -dt * p_vol * Real(4) * inv_dx * inv_dx;
  const Real apic_coef = Real(4) * inv_dx * inv_dx;

  StateAdjoint<Real> inadj = StateAdjoint<Real>::zeros(n);
  std::vector<Vec3<Real>> gubar(G3);
  std::memset(gubar.data(), 0, G3 * sizeof(Vec3<Real>));

  // ---- G2P reverse: push output adjoints onto grid velocities and x. ----
  for (size_t p = 0; p < n; p++) {
    const ParticleScratch<Real>& sd = ws.pd[p];
    Real w[3][3], dwf[3][3];
    bspline_weights(sd.fx, w, dwf);
    Vec3<Real> xb = adj.x[p];
    Vec3<Real> veff = adj.v[p] + xb * dt;
    const Mat3<Real>& Cb = adj.C[p];
    Mat3<Real> CbT = Cb.transposed();
    inadj.x[p] += xb;  // x' = x + dt v'
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++)
        for (int k = 0; k < 3; k++) {
          Real wt = w[0][i] * w[1][j] * w[2][k];
          Vec3<Real> d{(Real(i) - sd.fx.x) * dx, (Real(j) - sd.fx.y) * dx,
                       (Real(k) - sd.fx.z) * dx};
          size_t node = size_t((sd.base[0] + i) * G + (sd.base[1] + j)) * size_t(G) +
                        size_t(sd.base[2] + k);
          const Vec3<Real>& u = ws.gu[node];
          gubar[node] += veff * wt + (Cb * d) * (wt * apic_coef);
          Vec3<Real> grad_w{dwf[0][i] * w[1][j] * w[2][k] * inv_dx,
                            w[0][i] * dwf[1][j] * w[2][k] * inv_dx,
                            w[0][i] * w[1][j] * dwf[2][k] * inv_dx};
          Real c_term = u.dot(Cb * d) * apic_coef;
          inadj.x[p] += grad_w * (veff.dot(u) + c_term);
          inadj.x[p] -= (CbT * u) * (wt * apic_coef);
        }
  }

  // ---- Grid reverse: boundary, contacts (reverse order), mass division. ----
  std::vector<Vec3<Real>> gmombar(G3);
  std::memset(gmombar.data(), 0, G3 * sizeof(Vec3<Real>));
  std::vector<Real> gmbar(G3, Real(0));
  const int bc = scene_.boundary_cells;
  std::vector<Vec3<Real>> rvbar(rigid_vel.size(), Vec3<Real>{0, 0, 0});

  for (size_t node = 0; node < G3; node++) {
    if (ws.gm[node] <= Real(0)) continue;
    Vec3<Real> ubar = gubar[node];
    int gi = int(node / (size_t(G) * G)), gj = int((node / G) % G), gk = int(node % G);

    bool in_band = gi < bc || gi >= G - bc || gj < bc || gj >= G - bc ||
                   gk < bc || gk >= G - bc;
    if (in_band) {
      if (scene_.sticky_boundary) {
        ubar = {0, 0, 0};
      } else {
        // Recompute which axes were clamped; grid velocity before the
        // boundary op is needed, so replay the pre-boundary chain first.
      }
    }

    // Replay the contact chain to capture branch data.
    Vec3<Real> gx{Real(gi) * dx, Real(gj) * dx, Real(gk) * dx};
    Vec3<Real> u = ws.gmom[node] / ws.gm[node] + scene_.gravity * dt;
    struct Rec {
      int b;
      bool stick;
      Vec3<Real> u_in, normal, vt, vr;
      Real vn, lt, f, mu_c;
    };
    Rec recs[8];
    int nrec = 0;
    for (size_t b = 0; b < scene_.primitives.size(); b++) {
      geom::RigidPrimitive<Real> prim = scene_.primitives[b];
      prim.trans = ws.in.rigid_trans[b];
      auto s = geom::sdf_eval(prim, gx);
      if (s.dist >= Real(0)) continue;
      Vec3<Real> vr = rigid_vel[b];
      Vec3<Real> rel = u - vr;
      Real vn = s.grad.dot(rel);
      if (vn >= Real(0)) continue;
      Vec3<Real> vt = rel - s.grad * vn;
      Real lt = vt.norm();
      Rec r;
      r.b = int(b);
      r.u_in = u;
      r.normal = s.grad;
      r.vr = vr;
      r.vn = vn;
      r.vt = vt;
      r.lt = lt;
      r.mu_c = prim.friction;
      if (lt <= Real(1e-20)) {
        r.stick = true;
        r.f = 0;
        u = vr;
      } else {
        r.stick = false;
        r.f = std::max(Real(0), Real(1) + r.mu_c * vn / lt);
        u = vt * r.f + vr;
      }
      if (nrec < 8) recs[nrec++] = r;
    }

    if (in_band && !scene_.sticky_boundary) {
      int idx3[3] = {gi, gj, gk};
      for (int a = 0; a < 3; a++) {
        bool clamped = (idx3[a] < bc && u[a] < Real(0)) ||
                       (idx3[a] >= G - bc && u[a] > Real(0));
        if (clamped) ubar[a] = Real(0);
      }
    }

    for (int r = nrec - 1; r >= 0; r--) {
      const Rec& rc = recs[r];
      Vec3<Real>& vrb = rvbar[size_t(rc.b)];
      if (rc.stick) {
        vrb += ubar;
        ubar = {0, 0, 0};
        continue;
      }
      // u_out = vt*f + vr with vt = P(u_in - vr), vn = n.(u_in - vr),
      // f = max(0, 1 + mu*vn/lt), lt = |vt|.
      Vec3<Real> vtbar = ubar * rc.f;
      Real fbar = rc.vt.dot(ubar);
      vrb += ubar;
      Real vnbar = 0, ltbar = 0;
      if (rc.f > Real(0)) {
        vnbar = fbar * rc.mu_c / rc.lt;
        ltbar = -fbar * rc.mu_c * rc.vn / (rc.lt * rc.lt);
      }
      vtbar += (rc.vt / rc.lt) * ltbar;
      Vec3<Real> relbar = vtbar - rc.normal * rc.normal.dot(vtbar) +
                          rc.normal * vnbar;
      ubar = relbar;
      vrb -= relbar;
    }

    // u0 = mom/m + g*dt
    gmombar[node] = ubar / ws.gm[node];
    Vec3<Real> u0div = ws.gmom[node] / ws.gm[node];
    gmbar[node] = -ubar.dot(u0div) / ws.gm[node];
  }

  // ---- P2G reverse: stress, plasticity, SVD, transfer terms. ----
  for (size_t p = 0; p < n; p++) {
    const ParticleScratch<Real>& sd = ws.pd[p];
    Real w[3][3], dwf[3][3];
    bspline_weights(sd.fx, w, dwf);
    Mat3<Real> Qbar = Mat3<Real>::zero();
    Mat3<Real> QT = sd.Q.transposed();
    Vec3<Real> mv = ws.in.v[p] * p_mass;
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++)
        for (int k = 0; k < 3; k++) {
          Real wt = w[0][i] * w[1][j] * w[2][k];
          Vec3<Real> d{(Real(i) - sd.fx.x) * dx, (Real(j) - sd.fx.y) * dx,
                       (Real(k) - sd.fx.z) * dx};
          size_t node = size_t((sd.base[0] + i) * G + (sd.base[1] + j)) * size_t(G) +
                        size_t(sd.base[2] + k);
          const Vec3<Real>& mb = gmombar[node];
          Real massb = gmbar[node];
          inadj.v[p] += mb * (wt * p_mass);
          Qbar += Mat3<Real>::outer(mb, d) * wt;
          Vec3<Real> grad_w{dwf[0][i] * w[1][j] * w[2][k] * inv_dx,
                            w[0][i] * dwf[1][j] * w[2][k] * inv_dx,
                            w[0][i] * w[1][j] * dwf[2][k] * inv_dx};
          inadj.x[p] += grad_w * (mb.dot(mv + sd.Q * d) + massb * p_mass);
          inadj.x[p] -= (QT * mb) * wt;
        }

    // Q = stress_coef * tau + p_mass * C
    Mat3<Real> taubar = Qbar * stress_coef;
    inadj.C[p] += Qbar * p_mass;

    // tau = 2mu (Fn - R) Fn^T + la J(J-1) I
    const Mat3<Real>& Fn = sd.Fnew;
    Mat3<Real> Fnbar = (taubar * Fn + taubar.transposed() * (Fn - sd.R)) * (Real(2) * mu);
    Mat3<Real> Rbar = taubar * Fn * (Real(-2) * mu);
    Real Jbar = taubar.trace() * la * (Real(2) * sd.J - Real(1));

    // Output adjoint of the substep's F (written in P2G).
    Fnbar += adj.F[p];

    Mat3<Real> Ftrbar = Mat3<Real>::zero();
    Mat3<Real> Ftilde_bar = Mat3<Real>::zero();

    // Rotation route: R = U I V^T. Exact pair coefficients.
    accumulate_spectral_adjoint(sd.svd, Vec3<Real>{1, 1, 1}, true, Rbar, Ftilde_bar);

    if (!sd.yielding) {
      // Elastic: F_new == F_tr identically, J = det(F_tr).
      Ftrbar += Fnbar;
      Ftrbar += sd.Ftr.inverse().transposed() * (Jbar * sd.J);
    } else {
      // Plastic: F_new = U diag(sig_new(sigma)) V^T.
      accumulate_spectral_adjoint(sd.svd, sd.sigma_new, false, Fnbar, Ftilde_bar);
      // Diagonal coupling: sig_new_bar collects dB~_ii plus the J route,
      // then maps through the plasticity Jacobian onto d sigma = dF~_kk.
      Mat3<Real> Bt = sd.svd.U.transposed() * Fnbar * sd.svd.V;
      Vec3<Real> sig_new_bar{Bt(0, 0), Bt(1, 1), Bt(2, 2)};
      for (int c = 0; c < 3; c++)
        sig_new_bar[c] += Jbar * sd.J / sd.sigma_new[c];
      Mat3<Real> Jac = von_mises_jacobian(sd.svd.sigma, sd.sigma_new, sd.eps,
                                          sd.eps_hat_norm, mu,
                                          scene_.material.yield_stress);
      Vec3<Real> sigma_bar = Jac.transpose_mul(sig_new_bar);
      for (int c = 0; c < 3; c++) Ftilde_bar(c, c) += sigma_bar[c];
    }
    Ftrbar += sd.svd.U * Ftilde_bar * sd.svd.V.transposed();

    // F_tr = (I + dt C) F
    Mat3<Real> IdtC = Mat3<Real>::identity() + ws.in.C[p] * dt;
    inadj.F[p] += IdtC.transposed() * Ftrbar;
    inadj.C[p] += Ftrbar * ws.in.F[p].transposed() * dt;
  }

  // Non-yielding diagonal of the F route is exact via the elastic shortcut;
  // for the yielding case the diagonal went through the plasticity Jacobian.

  for (size_t p = 0; p < n; p++) {
    if (!inadj.x[p].all_finite() || !inadj.v[p].all_finite() ||
        !inadj.F[p].all_finite() || !inadj.C[p].all_finite())
      fail(format("step_backward: non-finite adjoint at particle %zu (t=%g)", p,
                  double(ws.in.time)));
  }

  if (rigid_vel_adj) {
    for (size_t b = 0; b < rvbar.size(); b++) (*rigid_vel_adj)[b] += rvbar[b];
  }
  adj = std::move(inadj);
}

template <class Real>
void MpmSim<Real>::step_backward(const FullState<Real>& state_in,
                                 const Action<Real>& action,
                                 const StateAdjoint<Real>& out_adj,
                                 StateAdjoint<Real>& in_adj,
                                 std::vector<Real>* action_adj) const {
  std::vector<Vec3<Real>> rvel = rigid_velocities(action);
  const int S = scene_.substeps;

  // Checkpoint replay: one saving forward pass over the control step, then
  // walk the stored substeps backwards.
  std::vector<Workspace> wss;
  wss.resize(size_t(S));
  FullState<Real> cur = state_in;
  FullState<Real> tmp;
  for (int s = 0; s < S; s++) {
    wss[size_t(s)].in = cur;
    substep(wss[size_t(s)].in, tmp, rvel, wss[size_t(s)], true);
    std::swap(cur, tmp);
  }

  StateAdjoint<Real> adj = out_adj;
  std::vector<Vec3<Real>> rvbar(rvel.size(), Vec3<Real>{0, 0, 0});
  for (int s = S - 1; s >= 0; s--) {
    substep_backward(wss[size_t(s)], rvel, adj, &rvbar);
  }

  size_t n = state_in.size();
  if (in_adj.x.size() != n) in_adj = StateAdjoint<Real>::zeros(n);
  for (size_t p = 0; p < n; p++) {
    in_adj.x[p] += adj.x[p];
    in_adj.v[p] += adj.v[p];
    in_adj.F[p] += adj.F[p];
    in_adj.C[p] += adj.C[p];
  }

  if (action_adj) {
    require(action_adj->size() == scene_.action_dim(),
            "step_backward: action adjoint size mismatch");
    size_t k = 0;
    for (size_t b = 0; b < scene_.primitives.size(); b++) {
      if (!scene_.primitives[b].actuated) continue;
      for (int c = 0; c < 3; c++) {
        // Pass-through inside the clamp, zero outside.
        Real a = action[k];
        if (a > -scene_.action_max && a < scene_.action_max)
          (*action_adj)[k] += rvbar[b][c];
        k++;
      }
    }
  }
}

template void MpmSim<float>::substep_backward(Workspace&, const std::vector<Vec3<float>>&, StateAdjoint<float>&, std::vector<Vec3<float>>*) const;
template void MpmSim<double>::substep_backward(Workspace&, const std::vector<Vec3<double>>&, StateAdjoint<double>&, std::vector<Vec3<double>>*) const;
template void MpmSim<float>::step_backward(const FullState<float>&, const Action<float>&, const StateAdjoint<float>&, StateAdjoint<float>&, std::vector<float>*) const;
template void MpmSim<double>::step_backward(const FullState<double>&, const Action<double>&, const StateAdjoint<double>&, StateAdjoint<double>&, std::vector<double>*) const;

}  // namespace diffsrl::sim
