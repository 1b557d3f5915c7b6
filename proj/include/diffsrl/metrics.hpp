#pragma once

#include <cstdint>
#include <vector>

#include "diffsrl/common.hpp"
#include "diffsrl/tape.hpp"

namespace diffsrl::metrics {

template <class Real>
using PointCloud = std::vector<Vec3<Real>>;

// Uniform-grid spatial hash for exact nearest-neighbor queries. Cell size is
// the target cloud's largest extent / 32.
template <class Real>
class GridNN {
 public:
  explicit GridNN(const PointCloud<Real>& points);

  // Index of the nearest point and the squared distance. `exclude` skips one
  // index (used for self-queries).
  std::pair<uint32_t, Real> query(const Vec3<Real>& p, int64_t exclude = -1) const;

 private:
  const PointCloud<Real>& pts_;
  Vec3<Real> lo_{0, 0, 0};
  Real cell_ = 1;
  int res_[3] = {1, 1, 1};
  std::vector<uint32_t> cell_start_;
  std::vector<uint32_t> order_;

  int cell_index(int cx, int cy, int cz) const {
    return (cx * res_[1] + cy) * res_[2] + cz;
  }
};

// Chamfer distance: sum over A of min squared distance to B plus the symmetric
// term. Both directional sums are computed, so chamfer(A,B) == chamfer(B,A).
template <class Real>
Real chamfer(const PointCloud<Real>& a, const PointCloud<Real>& b);

// Variant that also reports the nearest-neighbor index per point, which the
// tape node's backward treats as constant.
template <class Real>
Real chamfer_with_indices(const PointCloud<Real>& a, const PointCloud<Real>& b,
                          std::vector<uint32_t>& nn_ab,
                          std::vector<uint32_t>& nn_ba);

struct MatchResult {
  // permutation[i] = j matches point i of A with point j of B.
  std::vector<uint32_t> permutation;
  double cost = 0;  // sum of matched squared distances
};

// One-to-one matching by epsilon-scaling auction on squared Euclidean cost,
// warm-started from greedy nearest neighbors. The returned assignment is the
// best complete one seen, so the reported cost is non-increasing in the
// iteration budget. Within 1% of the exact optimum on small instances.
MatchResult emd_match(const PointCloud<double>& a, const PointCloud<double>& b,
                      int max_iters = 3000);

// Exact minimum-cost bijection (Hungarian), |A| = |B| <= 256. Test oracle and
// reference for emd_match.
MatchResult matching_oracle(const PointCloud<double>& a, const PointCloud<double>& b);

// ---------------------------------------------------------------------------
// Tape integration
// ---------------------------------------------------------------------------

// chamfer(A, B) as a differentiable scalar; nearest-neighbor indices are
// fixed during backward.
template <class Real>
ad::VarId chamfer_op(ad::Tape<Real>& t, ad::VarId A, ad::VarId B);

template <class Real>
PointCloud<Real> cloud_from_flat(const std::vector<Real>& flat);
template <class Real>
std::vector<Real> flat_from_cloud(const PointCloud<Real>& cloud);

extern template class GridNN<float>;
extern template class GridNN<double>;
extern template float chamfer(const PointCloud<float>&, const PointCloud<float>&);
extern template double chamfer(const PointCloud<double>&, const PointCloud<double>&);
extern template float chamfer_with_indices(const PointCloud<float>&, const PointCloud<float>&, std::vector<uint32_t>&, std::vector<uint32_t>&);
extern template double chamfer_with_indices(const PointCloud<double>&, const PointCloud<double>&, std::vector<uint32_t>&, std::vector<uint32_t>&);
extern template ad::VarId chamfer_op(ad::Tape<float>&, ad::VarId, ad::VarId);
extern template ad::VarId chamfer_op(ad::Tape<double>&, ad::VarId, ad::VarId);
extern template PointCloud<float> cloud_from_flat(const std::vector<float>&);
extern template PointCloud<double> cloud_from_flat(const std::vector<double>&);
extern template std::vector<float> flat_from_cloud(const PointCloud<float>&);
extern template std::vector<double> flat_from_cloud(const PointCloud<double>&);

}  // namespace diffsrl::metrics
