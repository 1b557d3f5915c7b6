#include "diffsrl/geometry.hpp"

#include <algorithm>

namespace diffsrl::geom {

template <class Real>
void RigidPrimitive<Real>::validate() const {
  switch (kind) {
    case ShapeKind::Sphere:
      require(radius > Real(0), "primitive: sphere radius must be positive");
      break;
    case ShapeKind::Capsule:
      require(radius > Real(0) && half_length > Real(0),
              "primitive: capsule radius/half_length must be positive");
      break;
    case ShapeKind::Box:
      require(half_extents.x > Real(0) && half_extents.y > Real(0) &&
                  half_extents.z > Real(0),
              "primitive: box half_extents must be positive");
      break;
  }
  Mat3<Real> e = rot.transposed() * rot - Mat3<Real>::identity();
  Real mx = 0;
  for (int i = 0; i < 3; i++)
    for (int j = 0; j < 3; j++) mx = std::max(mx, std::abs(e(i, j)));
  require(double(mx) < 1e-6, "primitive: rotation is not orthonormal");
}

namespace {

// Local-frame SDFs. Distances are exact Euclidean distances to the surface.

template <class Real>
SdfResult<Real> sdf_sphere(Real radius, const Vec3<Real>& p) {
  Real n = p.norm();
  SdfResult<Real> r;
  r.dist = n - radius;
  r.grad = n > Real(0) ? p / n : Vec3<Real>{1, 0, 0};
  return r;
}

template <class Real>
SdfResult<Real> sdf_capsule(Real radius, Real half_length, const Vec3<Real>& p) {
  Real cy = std::clamp(p.y, -half_length, half_length);
  Vec3<Real> q{p.x, p.y - cy, p.z};
  Real n = q.norm();
  SdfResult<Real> r;
  r.dist = n - radius;
  r.grad = n > Real(0) ? q / n : Vec3<Real>{1, 0, 0};
  return r;
}

template <class Real>
SdfResult<Real> sdf_box(const Vec3<Real>& he, const Vec3<Real>& p) {
  Vec3<Real> a{std::abs(p.x), std::abs(p.y), std::abs(p.z)};
  Vec3<Real> q = a - he;
  Vec3<Real> sgn{p.x >= 0 ? Real(1) : Real(-1), p.y >= 0 ? Real(1) : Real(-1),
                 p.z >= 0 ? Real(1) : Real(-1)};
  SdfResult<Real> r;
  Real qmax = q.max_coeff();
  if (qmax <= Real(0)) {
    // Inside: distance is to the nearest face plane.
    r.dist = qmax;
    int axis = (q.x >= q.y && q.x >= q.z) ? 0 : (q.y >= q.z ? 1 : 2);
    Vec3<Real> g{0, 0, 0};
    g[axis] = sgn[axis];
    r.grad = g;
  } else {
    Vec3<Real> qp = q.cwise_max(Vec3<Real>{0, 0, 0});
    Real n = qp.norm();
    r.dist = n;
    r.grad = (n > Real(0)) ? Vec3<Real>{sgn.x * qp.x / n, sgn.y * qp.y / n,
                                        sgn.z * qp.z / n}
                           : Vec3<Real>{1, 0, 0};
  }
  return r;
}

// Hessian of ||u|| is (I - u u^T/|u|^2)/|u|.
template <class Real>
Mat3<Real> norm_hessian(const Vec3<Real>& u) {
  Real n = u.norm();
  if (n <= Real(1e-12)) return Mat3<Real>::zero();
  Vec3<Real> uh = u / n;
  Mat3<Real> h = Mat3<Real>::identity() - Mat3<Real>::outer(uh, uh);
  return h * (Real(1) / n);
}

template <class Real>
Mat3<Real> hess_local(const RigidPrimitive<Real>& prim, const Vec3<Real>& p) {
  switch (prim.kind) {
    case ShapeKind::Sphere:
      return norm_hessian(p);
    case ShapeKind::Capsule: {
      Real cy = std::clamp(p.y, -prim.half_length, prim.half_length);
      Vec3<Real> q{p.x, p.y - cy, p.z};
      Real s = (std::abs(p.y) > prim.half_length) ? Real(1) : Real(0);
      Mat3<Real> J = Mat3<Real>::diag({Real(1), s, Real(1)});
      Mat3<Real> h = norm_hessian(q);
      return J * h * J;
    }
    case ShapeKind::Box: {
      Vec3<Real> a{std::abs(p.x), std::abs(p.y), std::abs(p.z)};
      Vec3<Real> q = a - prim.half_extents;
      if (q.max_coeff() <= Real(0)) return Mat3<Real>::zero();
      Vec3<Real> qp = q.cwise_max(Vec3<Real>{0, 0, 0});
      Vec3<Real> sgn{p.x >= 0 ? Real(1) : Real(-1), p.y >= 0 ? Real(1) : Real(-1),
                     p.z >= 0 ? Real(1) : Real(-1)};
      // d(qp)/dp = diag(active_i * sgn_i); chain through the norm Hessian.
      Vec3<Real> jd{q.x > 0 ? sgn.x : Real(0), q.y > 0 ? sgn.y : Real(0),
                    q.z > 0 ? sgn.z : Real(0)};
      Mat3<Real> J = Mat3<Real>::diag(jd);
      Mat3<Real> h = norm_hessian(qp);
      return J * h * J;
    }
  }
  return Mat3<Real>::zero();
}

}  // namespace

template <class Real>
SdfResult<Real> sdf_eval(const RigidPrimitive<Real>& prim, const Vec3<Real>& p) {
  Vec3<Real> local = prim.rot.transpose_mul(p - prim.trans);
  SdfResult<Real> r;
  switch (prim.kind) {
    case ShapeKind::Sphere: r = sdf_sphere(prim.radius, local); break;
    case ShapeKind::Capsule: r = sdf_capsule(prim.radius, prim.half_length, local); break;
    case ShapeKind::Box: r = sdf_box(prim.half_extents, local); break;
  }
  r.grad = prim.rot * r.grad;
  return r;
}

template <class Real>
Mat3<Real> sdf_hessian(const RigidPrimitive<Real>& prim, const Vec3<Real>& p) {
  Vec3<Real> local = prim.rot.transpose_mul(p - prim.trans);
  Mat3<Real> h = hess_local(prim, local);
  return prim.rot * h * prim.rot.transposed();
}

template <class Real>
int first_violation(const std::vector<RigidPrimitive<Real>>& prims,
                    const Vec3<Real>& point, Real margin) {
  for (size_t b = 0; b < prims.size(); b++) {
    if (double(sdf_eval(prims[b], point).dist) < double(margin) - kFeasTol)
      return int(b);
  }
  return -1;
}

namespace {

template <class Real>
bool sequential_project(const std::vector<RigidPrimitive<Real>>& prims,
                        Vec3<Real>& p, Real margin) {
  for (int round = 0; round < kMaxProjectionRounds; round++) {
    bool moved = false;
    for (const auto& prim : prims) {
      SdfResult<Real> s = sdf_eval(prim, p);
      if (double(s.dist) < double(margin) - kFeasTol) {
        p += s.grad * (margin - s.dist);
        moved = true;
      }
    }
    if (!moved) return true;
  }
  return first_violation(prims, p, margin) < 0;
}

// Smallest t with p + t*dir feasible, by doubling then bisection.
template <class Real>
bool ray_exit(const std::vector<RigidPrimitive<Real>>& prims, const Vec3<Real>& p,
              const Vec3<Real>& dir, Real margin, Real t0, Vec3<Real>& out) {
  Real hi = t0;
  bool found = false;
  for (int i = 0; i < 40; i++) {
    if (first_violation(prims, p + dir * hi, margin) < 0) {
      found = true;
      break;
    }
    hi *= Real(2);
  }
  if (!found) return false;
  Real lo = 0;
  for (int i = 0; i < 60; i++) {
    Real mid = (lo + hi) / Real(2);
    if (first_violation(prims, p + dir * mid, margin) < 0)
      hi = mid;
    else
      lo = mid;
  }
  out = p + dir * hi;
  return true;
}

}  // namespace

template <class Real>
ExitResult<Real> min_exit_displacement(const std::vector<RigidPrimitive<Real>>& prims,
                                       const Vec3<Real>& point, Real margin) {
  require(margin >= Real(0), "min_exit_displacement: margin must be >= 0");
  ExitResult<Real> r;
  if (first_violation(prims, point, margin) < 0) return r;

  std::vector<int> violated;
  for (size_t b = 0; b < prims.size(); b++)
    if (double(sdf_eval(prims[b], point).dist) < double(margin) - kFeasTol)
      violated.push_back(int(b));

  std::vector<Vec3<Real>> candidates;
  auto add_candidate = [&](Vec3<Real> q) {
    if (sequential_project(prims, q, margin) &&
        first_violation(prims, q, margin) < 0)
      candidates.push_back(q);
  };

  // Round-robin from the point itself, and from each single-body exit first
  // (the body order matters when penetrations overlap).
  add_candidate(point);
  for (int b : violated) {
    SdfResult<Real> s = sdf_eval(prims[size_t(b)], point);
    add_candidate(point + s.grad * (margin - s.dist));
  }

  // Opposing penetrations (e.g. the gap between two spheres) are cheapest to
  // leave sideways; round-robin alone ping-pongs along the opposing axis.
  for (size_t i = 0; i < violated.size(); i++) {
    for (size_t j = i + 1; j < violated.size(); j++) {
      Vec3<Real> g1 = sdf_eval(prims[size_t(violated[i])], point).grad;
      Vec3<Real> g2 = sdf_eval(prims[size_t(violated[j])], point).grad;
      if (double(g1.dot(g2)) > -0.1) continue;
      Vec3<Real> axis = (g1 - g2).normalized();
      Vec3<Real> ref = std::abs(axis.x) < Real(0.9) ? Vec3<Real>{1, 0, 0}
                                                    : Vec3<Real>{0, 1, 0};
      Vec3<Real> e1 = axis.cross(ref).normalized();
      Vec3<Real> e2 = axis.cross(e1);
      Real depth = std::max(margin - sdf_eval(prims[size_t(violated[i])], point).dist,
                            margin - sdf_eval(prims[size_t(violated[j])], point).dist);
      for (int k = 0; k < 8; k++) {
        Real a = Real(2) * Real(3.14159265358979323846) * Real(k) / Real(8);
        Vec3<Real> dir = e1 * std::cos(a) + e2 * std::sin(a);
        Vec3<Real> q;
        if (ray_exit(prims, point, dir, margin, std::max(depth, Real(1e-6)), q))
          add_candidate(q);
      }
    }
  }

  if (candidates.empty()) {
    Real worst = 0;
    for (const auto& prim : prims)
      worst = std::min(worst, sdf_eval(prim, point).dist - margin);
    fail(format("min_exit_displacement: infeasible after %d rounds, residual "
                "penetration depth %g",
                kMaxProjectionRounds, double(-worst)));
  }
  Vec3<Real> best = candidates[0];
  for (const auto& q : candidates)
    if ((q - point).norm2() < (best - point).norm2()) best = q;
  r.displacement = best - point;
  r.cost = r.displacement.norm();
  return r;
}

template struct RigidPrimitive<float>;
template struct RigidPrimitive<double>;
template SdfResult<float> sdf_eval(const RigidPrimitive<float>&, const Vec3<float>&);
template SdfResult<double> sdf_eval(const RigidPrimitive<double>&, const Vec3<double>&);
template Mat3<float> sdf_hessian(const RigidPrimitive<float>&, const Vec3<float>&);
template Mat3<double> sdf_hessian(const RigidPrimitive<double>&, const Vec3<double>&);
template ExitResult<float> min_exit_displacement(const std::vector<RigidPrimitive<float>>&, const Vec3<float>&, float);
template ExitResult<double> min_exit_displacement(const std::vector<RigidPrimitive<double>>&, const Vec3<double>&, double);
template int first_violation(const std::vector<RigidPrimitive<float>>&, const Vec3<float>&, float);
template int first_violation(const std::vector<RigidPrimitive<double>>&, const Vec3<double>&, double);

}  // namespace diffsrl::geom
