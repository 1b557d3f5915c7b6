#pragma once

#include "diffsrl/mpm.hpp"
#include "diffsrl/svd3.hpp"

namespace diffsrl::sim {

// Quadratic B-spline weights per axis for fx in [0.5, 1.5); dw is d/d(fx).
template <class Real>
inline void bspline_weights(const Vec3<Real>& fx, Real w[3][3], Real dw[3][3]) {
  for (int a = 0; a < 3; a++) {
    Real f = fx[a];
    w[a][0] = Real(0.5) * (Real(1.5) - f) * (Real(1.5) - f);
    w[a][1] = Real(0.75) - (f - Real(1)) * (f - Real(1));
    w[a][2] = Real(0.5) * (f - Real(0.5)) * (f - Real(0.5));
    dw[a][0] = f - Real(1.5);
    dw[a][1] = Real(-2) * (f - Real(1));
    dw[a][2] = f - Real(0.5);
  }
}

// Saved per-particle intermediates of one substep, consumed by the adjoint.
template <class Real>
struct ParticleScratch {
  int base[3] = {0, 0, 0};
  Vec3<Real> fx{0, 0, 0};
  Mat3<Real> Ftr;
  Svd3<Real> svd;
  Vec3<Real> sigma_new{1, 1, 1};
  bool yielding = false;
  Vec3<Real> eps{0, 0, 0};
  Real eps_hat_norm = 0;
  Mat3<Real> Fnew, R, tau, Q;
  Real J = 1;
};

template <class Real>
struct MpmSim<Real>::Workspace {
  FullState<Real> in;  // substep input (checkpoint)
  std::vector<Real> gm;
  std::vector<Vec3<Real>> gmom;
  std::vector<Vec3<Real>> gu;
  std::vector<ParticleScratch<Real>> pd;
};

// von Mises return mapping in principal-stretch space. Returns the projected
// singular values and fills the 3x3 Jacobian d sigma_new / d sigma when
// yielding (identity otherwise).
template <class Real>
inline Vec3<Real> von_mises_project(const Vec3<Real>& sigma, Real mu,
                                    Real yield_stress, bool& yielding,
                                    Vec3<Real>& eps_out, Real& eps_hat_norm_out) {
  Vec3<Real> eps{std::log(sigma.x), std::log(sigma.y), std::log(sigma.z)};
  Real mean = (eps.x + eps.y + eps.z) / Real(3);
  Vec3<Real> ehat = eps - Vec3<Real>{mean, mean, mean};
  Real n = ehat.norm();
  Real kappa = yield_stress / (Real(2) * mu);
  eps_out = eps;
  eps_hat_norm_out = n;
  if (n > kappa && n > Real(0)) {
    yielding = true;
    Vec3<Real> eps_proj = eps - ehat * ((n - kappa) / n);
    return {std::exp(eps_proj.x), std::exp(eps_proj.y), std::exp(eps_proj.z)};
  }
  yielding = false;
  return sigma;
}

// d sigma_new / d sigma for the yielding branch.
template <class Real>
inline Mat3<Real> von_mises_jacobian(const Vec3<Real>& sigma,
                                     const Vec3<Real>& sigma_new,
                                     const Vec3<Real>& eps, Real eps_hat_norm,
                                     Real mu, Real yield_stress) {
  Real kappa = yield_stress / (Real(2) * mu);
  Real mean = (eps.x + eps.y + eps.z) / Real(3);
  Vec3<Real> ehat = eps - Vec3<Real>{mean, mean, mean};
  Real n = eps_hat_norm;
  // d eps_proj / d eps = M + (kappa/n) (P_dev - ehat ehat^T / n^2),
  // M = ones/3, P_dev = I - M.
  Mat3<Real> J_eps;
  for (int i = 0; i < 3; i++)
    for (int j = 0; j < 3; j++) {
      Real m = Real(1) / Real(3);
      Real pdev = (i == j ? Real(1) : Real(0)) - m;
      J_eps(i, j) = m + (kappa / n) * (pdev - ehat[i] * ehat[j] / (n * n));
    }
  // Chain through eps = log(sigma) and sigma_new = exp(eps_proj).
  Mat3<Real> J;
  for (int i = 0; i < 3; i++)
    for (int j = 0; j < 3; j++) J(i, j) = sigma_new[i] * J_eps(i, j) / sigma[j];
  return J;
}

}  // namespace diffsrl::sim
