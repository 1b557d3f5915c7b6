#pragma once

#include "diffsrl/common.hpp"

namespace diffsrl::sim {

template <class Real>
struct Svd3 {
  Mat3<Real> U, V;       // proper rotations (det = +1) when det(F) > 0
  Vec3<Real> sigma;      // descending, positive for det(F) > 0
};

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric 3x3. Robust for clustered
// eigenvalues, which is the common case here (F near identity).
template <class Real>
void jacobi_eigen(Mat3<Real> A, Mat3<Real>& V, Vec3<Real>& lam) {
  V = Mat3<Real>::identity();
  Real scale = Real(0);
  for (int i = 0; i < 3; i++)
    for (int j = 0; j < 3; j++) scale = std::max(scale, std::abs(A(i, j)));
  if (scale == Real(0)) {
    lam = {0, 0, 0};
    return;
  }
  const Real tol = scale * Real(1e-15);
  for (int sweep = 0; sweep < 24; sweep++) {
    Real off = std::max({std::abs(A(0, 1)), std::abs(A(0, 2)), std::abs(A(1, 2))});
    if (off <= tol) break;
    for (int p = 0; p < 2; p++) {
      for (int q = p + 1; q < 3; q++) {
        Real apq = A(p, q);
        if (std::abs(apq) <= tol * Real(1e-3)) continue;
        Real tau = (A(q, q) - A(p, p)) / (Real(2) * apq);
        Real t = (tau >= 0 ? Real(1) : Real(-1)) /
                 (std::abs(tau) + std::sqrt(Real(1) + tau * tau));
        Real c = Real(1) / std::sqrt(Real(1) + t * t);
        Real s = t * c;
        // A <- J^T A J, V <- V J with J the (p,q) rotation.
        for (int k = 0; k < 3; k++) {
          Real akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < 3; k++) {
          Real apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < 3; k++) {
          Real vkp = V(k, p), vkq = V(k, q);
          V(k, p) = c * vkp - s * vkq;
          V(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  lam = {A(0, 0), A(1, 1), A(2, 2)};
}

}  // namespace detail

// SVD via eigendecomposition of F^T F. Requires det(F) > 0 (enforced as a
// simulator invariant); U and V are then proper rotations.
template <class Real>
Svd3<Real> svd3(const Mat3<Real>& F) {
  Mat3<Real> A = F.transposed() * F;
  Mat3<Real> V;
  Vec3<Real> lam;
  detail::jacobi_eigen(A, V, lam);

  // Sort descending.
  int idx[3] = {0, 1, 2};
  for (int i = 0; i < 2; i++)
    for (int j = i + 1; j < 3; j++)
      if (lam[idx[j]] > lam[idx[i]]) std::swap(idx[i], idx[j]);
  Svd3<Real> out;
  Mat3<Real> Vs;
  for (int c = 0; c < 3; c++) {
    out.sigma[c] = std::sqrt(std::max(lam[idx[c]], Real(0)));
    for (int r = 0; r < 3; r++) Vs(r, c) = V(r, idx[c]);
  }
  // Make V a proper rotation.
  if (Vs.det() < Real(0))
    for (int r = 0; r < 3; r++) Vs(r, 2) = -Vs(r, 2);
  out.V = Vs;

  Real smax = std::max(out.sigma[0], Real(1e-30));
  Vec3<Real> inv;
  for (int c = 0; c < 3; c++)
    inv[c] = Real(1) / std::max(out.sigma[c], smax * Real(1e-12));
  Mat3<Real> FV = F * Vs;
  for (int c = 0; c < 3; c++)
    for (int r = 0; r < 3; r++) out.U(r, c) = FV(r, c) * inv[c];

  // Near-singular columns lose orthogonality; rebuild the worst one.
  if (out.sigma[2] < smax * Real(1e-8)) {
    Vec3<Real> u0{out.U(0, 0), out.U(1, 0), out.U(2, 0)};
    Vec3<Real> u1{out.U(0, 1), out.U(1, 1), out.U(2, 1)};
    Vec3<Real> u2 = u0.cross(u1).normalized();
    for (int r = 0; r < 3; r++) out.U(r, 2) = u2[r];
  }
  return out;
}

}  // namespace diffsrl::sim
