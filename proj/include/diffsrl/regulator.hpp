#pragma once

#include "diffsrl/geometry.hpp"
#include "diffsrl/metrics.hpp"
#include "diffsrl/mpm.hpp"
#include "diffsrl/tape.hpp"

namespace diffsrl::reg {

template <class Real>
struct RegulateOptions {
  Real margin = Real(-1);          // < 0: use the scene's default margin
  int emd_max_iters = 3000;
  bool add_matching_residual = false;  // add the EMD residual to the loss
  // Ablation: move penetrating particles (safety clamp before stepping) but
  // exclude them from the loss and detach the movement from gradients.
  bool penetration_loss = true;
};

// One projection step of a particle's exit path.
template <class Real>
struct PathStep {
  int body = -1;
  Vec3<Real> point{0, 0, 0};  // where the sdf was evaluated
  Real step = 0;              // margin - sdf, > 0
};

template <class Real>
struct ProjectionResult {
  metrics::PointCloud<Real> points;        // moved cloud
  Real loss = 0;                           // sum of path step lengths
  std::vector<std::vector<PathStep<Real>>> paths;  // per moved particle
  std::vector<uint32_t> moved;             // indices with non-empty paths
  size_t gated_checked = 0;                // particles that ran the exact test
};

// Grid-gated penetration resolution (Algorithm-1 style): grid mass occupancy
// plus a node-level SDF band selects candidate particles; only those run the
// exact per-particle test, which matches a dense all-particle scan.
template <class Real>
ProjectionResult<Real> resolve_penetration(const sim::SceneConfig<Real>& scene,
                                           const std::vector<geom::RigidPrimitive<Real>>& rigids,
                                           const metrics::PointCloud<Real>& decoded,
                                           Real margin);

// Reorders `points` by the EMD matching so index i corresponds to
// ground-truth particle i. The multiset of points is unchanged.
template <class Real>
metrics::PointCloud<Real> resolve_smoothness(const metrics::PointCloud<Real>& ground_truth_obs,
                                             const metrics::PointCloud<Real>& points,
                                             int max_iters,
                                             metrics::MatchResult* match_out = nullptr);

template <class Real>
struct RegulatedState {
  sim::FullState<Real> state;
  Real constraint_loss = 0;
  metrics::MatchResult matching;
};

// Full Algorithm-1 pipeline: resolve penetration, establish correspondence,
// splice positions with ground-truth imperceptible fields.
template <class Real>
RegulatedState<Real> regulate(const sim::SceneConfig<Real>& scene,
                              const sim::FullState<Real>& ground_truth,
                              const metrics::PointCloud<Real>& decoded_obs,
                              const RegulateOptions<Real>& opts = {});

// Tape variant used in training: decoded positions flow through the exit
// paths and the reordering; the constraint loss is differentiable.
struct RegulateVars {
  ad::VarId positions = ad::kNoVar;  // n x 3 regulated positions
  ad::VarId loss = ad::kNoVar;       // scalar constraint loss
};

template <class Real>
RegulateVars regulate_op(ad::Tape<Real>& t, const sim::SceneConfig<Real>& scene,
                         const sim::FullState<Real>& ground_truth,
                         ad::VarId decoded, const RegulateOptions<Real>& opts,
                         metrics::MatchResult* match_out = nullptr);

extern template ProjectionResult<float> resolve_penetration(const sim::SceneConfig<float>&, const std::vector<geom::RigidPrimitive<float>>&, const metrics::PointCloud<float>&, float);
extern template ProjectionResult<double> resolve_penetration(const sim::SceneConfig<double>&, const std::vector<geom::RigidPrimitive<double>>&, const metrics::PointCloud<double>&, double);
extern template metrics::PointCloud<float> resolve_smoothness(const metrics::PointCloud<float>&, const metrics::PointCloud<float>&, int, metrics::MatchResult*);
extern template metrics::PointCloud<double> resolve_smoothness(const metrics::PointCloud<double>&, const metrics::PointCloud<double>&, int, metrics::MatchResult*);
extern template RegulatedState<float> regulate(const sim::SceneConfig<float>&, const sim::FullState<float>&, const metrics::PointCloud<float>&, const RegulateOptions<float>&);
extern template RegulatedState<double> regulate(const sim::SceneConfig<double>&, const sim::FullState<double>&, const metrics::PointCloud<double>&, const RegulateOptions<double>&);
extern template RegulateVars regulate_op(ad::Tape<float>&, const sim::SceneConfig<float>&, const sim::FullState<float>&, ad::VarId, const RegulateOptions<float>&, metrics::MatchResult*);
extern template RegulateVars regulate_op(ad::Tape<double>&, const sim::SceneConfig<double>&, const sim::FullState<double>&, ad::VarId, const RegulateOptions<double>&, metrics::MatchResult*);

}  // namespace diffsrl::reg
