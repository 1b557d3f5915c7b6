#pragma once

#include <functional>
#include <vector>

#include "diffsrl/common.hpp"
#include "diffsrl/geometry.hpp"
#include "diffsrl/metrics.hpp"

namespace diffsrl::sim {

template <class Real>
struct MaterialParams {
  Real youngs_modulus = Real(5e3);
  Real poisson_ratio = Real(0.2);
  Real yield_stress = Real(50);
  Real density = Real(1);
  Real friction = Real(0.9);

  Real mu() const {
    return youngs_modulus / (Real(2) * (Real(1) + poisson_ratio));
  }
  Real lambda() const {
    return youngs_modulus * poisson_ratio /
           ((Real(1) + poisson_ratio) * (Real(1) - Real(2) * poisson_ratio));
  }
  void validate() const {
    require(youngs_modulus > Real(0), "material: youngs_modulus must be positive");
    require(poisson_ratio > Real(0) && poisson_ratio < Real(0.5),
            "material: poisson_ratio must be in (0, 0.5)");
    require(yield_stress > Real(0), "material: yield_stress must be positive");
    require(density > Real(0), "material: density must be positive");
    require(friction >= Real(0), "material: friction must be >= 0");
  }
  template <class U>
  MaterialParams<U> cast() const {
    return {U(youngs_modulus), U(poisson_ratio), U(yield_stress), U(density),
            U(friction)};
  }
};

enum class SamplerKind { Blob, Rope };

// Axis-aligned particle sampling region. Rope is an elongated blob along x.
template <class Real>
struct ParticleSampler {
  SamplerKind kind = SamplerKind::Blob;
  Vec3<Real> center{Real(0.5), Real(0.2), Real(0.5)};
  Vec3<Real> half_extents{Real(0.08), Real(0.08), Real(0.08)};
  size_t count = 512;
  uint64_t seed = 1;
  template <class U>
  ParticleSampler<U> cast() const {
    return {kind, center.template cast<U>(), half_extents.template cast<U>(),
            count, seed};
  }
};

template <class Real>
struct SceneConfig {
  int grid_res = 32;
  Real dt = Real(2e-4);   // substep timestep
  int substeps = 20;      // substeps per control step
  Vec3<Real> gravity{Real(0), Real(-9.8), Real(0)};
  int boundary_cells = 3;
  bool sticky_boundary = true;
  Real cfl = Real(0.5);
  Real action_max = Real(1);
  bool deterministic = true;
  MaterialParams<Real> material;
  std::vector<geom::RigidPrimitive<Real>> primitives;
  ParticleSampler<Real> sampler;
  Vec3<Real> target_offset{Real(0.15), Real(0), Real(0)};  // task target shift

  Real dx() const { return Real(1) / Real(grid_res); }
  Real inv_dx() const { return Real(grid_res); }
  Real particle_volume() const {
    Real h = dx() * Real(0.5);
    return h * h * h;
  }
  Real particle_mass() const { return particle_volume() * material.density; }
  Real margin() const { return Real(0.5) * dx(); }
  int num_actuated() const {
    int n = 0;
    for (const auto& p : primitives) n += p.actuated ? 1 : 0;
    return n;
  }
  size_t action_dim() const { return size_t(3 * num_actuated()); }

  void validate() const {
    require(grid_res >= 8 && grid_res <= 256, "scene: grid_res out of range");
    require(dt > Real(0), "scene: dt must be positive");
    require(substeps >= 1, "scene: substeps must be >= 1");
    require(boundary_cells >= 1 && boundary_cells < grid_res / 2,
            "scene: boundary_cells out of range");
    require(action_max > Real(0), "scene: action_max must be positive");
    require(sampler.count >= 1, "scene: particle count must be >= 1");
    material.validate();
    for (const auto& p : primitives) p.validate();
  }

  template <class U>
  SceneConfig<U> cast() const {
    SceneConfig<U> s;
    s.grid_res = grid_res;
    s.dt = U(dt);
    s.substeps = substeps;
    s.gravity = gravity.template cast<U>();
    s.boundary_cells = boundary_cells;
    s.sticky_boundary = sticky_boundary;
    s.cfl = U(cfl);
    s.action_max = U(action_max);
    s.deterministic = deterministic;
    s.material = material.template cast<U>();
    for (const auto& p : primitives) s.primitives.push_back(p.template cast<U>());
    s.sampler = sampler.template cast<U>();
    s.target_offset = target_offset.template cast<U>();
    return s;
  }
};

// Complete simulator state: particle fields plus rigid-body translations
// (rotations are fixed; manipulators translate kinematically).
template <class Real>
struct FullState {
  std::vector<Vec3<Real>> x;   // positions
  std::vector<Vec3<Real>> v;   // velocities
  std::vector<Mat3<Real>> F;   // deformation gradients
  std::vector<Mat3<Real>> C;   // APIC affine velocity matrices
  std::vector<Vec3<Real>> rigid_trans;
  Real time = 0;

  size_t size() const { return x.size(); }
  void validate() const {
    require(x.size() == v.size() && x.size() == F.size() && x.size() == C.size(),
            "state: field sizes disagree");
    for (size_t i = 0; i < x.size(); i++) {
      if (!x[i].all_finite() || !v[i].all_finite() || !F[i].all_finite() ||
          !C[i].all_finite())
        fail(format("state: non-finite field at particle %zu", i));
      if (!(F[i].det() > Real(0)))
        fail(format("state: det(F) <= 0 at particle %zu", i));
    }
  }
  template <class U>
  FullState<U> cast() const {
    FullState<U> s;
    s.x.reserve(x.size());
    s.v.reserve(v.size());
    s.F.reserve(F.size());
    s.C.reserve(C.size());
    for (const auto& p : x) s.x.push_back(p.template cast<U>());
    for (const auto& p : v) s.v.push_back(p.template cast<U>());
    for (const auto& m : F) s.F.push_back(m.template cast<U>());
    for (const auto& m : C) s.C.push_back(m.template cast<U>());
    for (const auto& p : rigid_trans) s.rigid_trans.push_back(p.template cast<U>());
    s.time = U(time);
    return s;
  }
};

// Per-manipulator velocity command, 3 components each, clamped to
// [-action_max, action_max] on entry to step().
template <class Real>
using Action = std::vector<Real>;

template <class Real>
struct GridField {
  int res = 0;
  Real dx = 0;
  std::vector<Real> mass;  // res^3 nodes, x-major

  Real total_mass() const {
    Real s = 0;
    for (Real m : mass) s += m;
    return s;
  }
};

// Observation extraction: the positions as an unordered point cloud.
template <class Real>
metrics::PointCloud<Real> observe(const FullState<Real>& state);

// Robustness mode: M distinct points sampled without replacement.
template <class Real>
metrics::PointCloud<Real> observe_subsampled(const FullState<Real>& state,
                                             size_t m, uint64_t seed);

// Quadratic B-spline mass scatter onto the grid (particle-in-cell).
// Points must lie inside the unit cube.
template <class Real>
GridField<Real> compute_grid_mass(const SceneConfig<Real>& scene,
                                  const metrics::PointCloud<Real>& points,
                                  Real particle_mass);

// Adjoint of one control step with respect to particle state and action.
template <class Real>
struct StateAdjoint {
  std::vector<Vec3<Real>> x, v;
  std::vector<Mat3<Real>> F, C;

  static StateAdjoint zeros(size_t n) {
    StateAdjoint a;
    a.x.assign(n, Vec3<Real>{0, 0, 0});
    a.v.assign(n, Vec3<Real>{0, 0, 0});
    a.F.assign(n, Mat3<Real>::zero());
    a.C.assign(n, Mat3<Real>::zero());
    return a;
  }
};

template <class Real>
struct ConservationSample {
  Real particle_mass = 0, grid_mass = 0;
  Vec3<Real> particle_momentum{0, 0, 0}, grid_momentum{0, 0, 0};
};

// Differentiable MLS-MPM simulator: APIC transfers, quadratic B-spline
// weights, fixed-corotated elasticity with von Mises return mapping, explicit
// symplectic-Euler grid update, kinematic rigid primitives with grid-level
// contact projection.
template <class Real>
class MpmSim {
 public:
  explicit MpmSim(SceneConfig<Real> scene);

  const SceneConfig<Real>& scene() const { return scene_; }

  // Samples the initial particle set and rest state from the scene config.
  FullState<Real> initial_state() const;

  FullState<Real> step(const FullState<Real>& state, const Action<Real>& action) const;

  std::vector<FullState<Real>> rollout(const FullState<Real>& state,
                                       const std::vector<Action<Real>>& actions) const;

  // Reverse-mode adjoint of step(). Recomputes substeps from the input state
  // (checkpoint) and accumulates into in_adj / action_adj.
  void step_backward(const FullState<Real>& state_in, const Action<Real>& action,
                     const StateAdjoint<Real>& out_adj, StateAdjoint<Real>& in_adj,
                     std::vector<Real>* action_adj) const;

  // Invoked after every P2G scatter when set (conservation instrumentation).
  mutable std::function<void(const ConservationSample<Real>&)> conservation_probe;

 private:
  struct Workspace;
  void substep(const FullState<Real>& in, FullState<Real>& out,
               const std::vector<Vec3<Real>>& rigid_vel, Workspace& ws,
               bool save_intermediates) const;
  void substep_backward(Workspace& ws, const std::vector<Vec3<Real>>& rigid_vel,
                        StateAdjoint<Real>& adj,
                        std::vector<Vec3<Real>>* rigid_vel_adj) const;
  std::vector<Vec3<Real>> rigid_velocities(const Action<Real>& action) const;

  SceneConfig<Real> scene_;
};

extern template class MpmSim<float>;
extern template class MpmSim<double>;
extern template metrics::PointCloud<float> observe(const FullState<float>&);
extern template metrics::PointCloud<double> observe(const FullState<double>&);
extern template metrics::PointCloud<float> observe_subsampled(const FullState<float>&, size_t, uint64_t);
extern template metrics::PointCloud<double> observe_subsampled(const FullState<double>&, size_t, uint64_t);
extern template GridField<float> compute_grid_mass(const SceneConfig<float>&, const metrics::PointCloud<float>&, float);
extern template GridField<double> compute_grid_mass(const SceneConfig<double>&, const metrics::PointCloud<double>&, double);

}  // namespace diffsrl::sim
