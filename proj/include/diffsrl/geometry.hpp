#pragma once

#include <vector>

#include "diffsrl/common.hpp"

namespace diffsrl::geom {

enum class ShapeKind { Sphere, Capsule, Box };

// Kinematic rigid primitive with an analytic signed distance field.
// Capsule axis is the local Y axis; box half_extents are per local axis.
template <class Real>
struct RigidPrimitive {
  ShapeKind kind = ShapeKind::Sphere;
  Real radius = Real(0.05);              // sphere, capsule
  Real half_length = Real(0.05);         // capsule
  Vec3<Real> half_extents{Real(0.05), Real(0.05), Real(0.05)};  // box

  Mat3<Real> rot = Mat3<Real>::identity();
  Vec3<Real> trans{Real(0.5), Real(0.5), Real(0.5)};
  Vec3<Real> velocity{0, 0, 0};

  Real friction = Real(0.9);
  bool actuated = false;  // velocity driven by the action vector

  void validate() const;

  template <class U>
  RigidPrimitive<U> cast() const {
    RigidPrimitive<U> r;
    r.kind = kind;
    r.radius = U(radius);
    r.half_length = U(half_length);
    r.half_extents = half_extents.template cast<U>();
    r.rot = rot.template cast<U>();
    r.trans = trans.template cast<U>();
    r.velocity = velocity.template cast<U>();
    r.friction = U(friction);
    r.actuated = actuated;
    return r;
  }
};

template <class Real>
struct SdfResult {
  Real dist = 0;
  Vec3<Real> grad{1, 0, 0};  // unit, pointing toward increasing distance
};

// Signed distance and its gradient in world frame. Negative strictly inside.
// At the medial axis the gradient is an arbitrary valid subgradient.
template <class Real>
SdfResult<Real> sdf_eval(const RigidPrimitive<Real>& prim, const Vec3<Real>& p);

// Hessian of the signed distance (world frame, a.e. defined). Used by the
// regulator to differentiate through projection paths.
template <class Real>
Mat3<Real> sdf_hessian(const RigidPrimitive<Real>& prim, const Vec3<Real>& p);

template <class Real>
struct ExitResult {
  Vec3<Real> displacement{0, 0, 0};
  Real cost = 0;  // ||displacement||_2
};

// Feasibility tolerance shared with the regulator: a point is accepted when
// sdf >= margin - kFeasTol against every primitive.
constexpr double kFeasTol = 1e-6;
constexpr int kMaxProjectionRounds = 16;

// Smallest displacement that moves `point` to sdf >= margin for all
// primitives. Single violated primitive: closed-form projection along the
// SDF gradient. Several at once: round-robin sequential projection, capped at
// kMaxProjectionRounds; throws with the residual penetration depth if the cap
// is hit while still infeasible.
template <class Real>
ExitResult<Real> min_exit_displacement(const std::vector<RigidPrimitive<Real>>& prims,
                                       const Vec3<Real>& point, Real margin);

// One straightened projection step, exposed for the regulator which needs the
// per-step path for its differentiable loss. Returns the index of the first
// violated primitive or -1 if feasible.
template <class Real>
int first_violation(const std::vector<RigidPrimitive<Real>>& prims,
                    const Vec3<Real>& point, Real margin);

extern template struct RigidPrimitive<float>;
extern template struct RigidPrimitive<double>;
extern template SdfResult<float> sdf_eval(const RigidPrimitive<float>&, const Vec3<float>&);
extern template SdfResult<double> sdf_eval(const RigidPrimitive<double>&, const Vec3<double>&);
extern template Mat3<float> sdf_hessian(const RigidPrimitive<float>&, const Vec3<float>&);
extern template Mat3<double> sdf_hessian(const RigidPrimitive<double>&, const Vec3<double>&);
extern template ExitResult<float> min_exit_displacement(const std::vector<RigidPrimitive<float>>&, const Vec3<float>&, float);
extern template ExitResult<double> min_exit_displacement(const std::vector<RigidPrimitive<double>>&, const Vec3<double>&, double);
extern template int first_violation(const std::vector<RigidPrimitive<float>>&, const Vec3<float>&, float);
extern template int first_violation(const std::vector<RigidPrimitive<double>>&, const Vec3<double>&, double);

}  // namespace diffsrl::geom
