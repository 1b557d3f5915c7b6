#include "diffsrl/metrics.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace diffsrl::metrics {

template <class Real>
GridNN<Real>::GridNN(const PointCloud<Real>& points) : pts_(points) {
  require(!points.empty(), "GridNN: empty point cloud");
  Vec3<Real> hi = points[0];
  lo_ = points[0];
  for (const auto& p : points) {
    lo_ = {std::min(lo_.x, p.x), std::min(lo_.y, p.y), std::min(lo_.z, p.z)};
    hi = hi.cwise_max(p);
  }
  Real extent = std::max({hi.x - lo_.x, hi.y - lo_.y, hi.z - lo_.z, Real(1e-9)});
  cell_ = extent / Real(32);
  for (int a = 0; a < 3; a++) {
    Real e = (&hi.x)[a] - (&lo_.x)[a];
    res_[a] = std::max(1, std::min(32, int(e / cell_) + 1));
  }
  int ncells = res_[0] * res_[1] * res_[2];
  std::vector<uint32_t> count(ncells + 1, 0);
  auto cell_of = [&](const Vec3<Real>& p, int c[3]) {
    for (int a = 0; a < 3; a++) {
      int i = int(((&p.x)[a] - (&lo_.x)[a]) / cell_);
      c[a] = std::clamp(i, 0, res_[a] - 1);
    }
  };
  std::vector<int> pc(points.size());
  for (size_t i = 0; i < points.size(); i++) {
    int c[3];
    cell_of(points[i], c);
    pc[i] = cell_index(c[0], c[1], c[2]);
    count[pc[i] + 1]++;
  }
  for (int i = 0; i < ncells; i++) count[i + 1] += count[i];
  cell_start_ = count;
  order_.resize(points.size());
  std::vector<uint32_t> cursor(cell_start_.begin(), cell_start_.end() - 1);
  for (size_t i = 0; i < points.size(); i++) order_[cursor[pc[i]]++] = uint32_t(i);
}

template <class Real>
std::pair<uint32_t, Real> GridNN<Real>::query(const Vec3<Real>& p,
                                              int64_t exclude) const {
  // Far-outside queries would walk many empty shells; a linear scan is both
  // exact and cheaper there.
  bool far_outside = false;
  for (int a = 0; a < 3; a++) {
    Real lo = (&lo_.x)[a], hi = lo + Real(res_[a]) * cell_;
    Real pa = (&p.x)[a];
    far_outside |= (pa < lo - cell_) || (pa > hi + cell_);
  }
  if (far_outside) {
    Real best = std::numeric_limits<Real>::max();
    uint32_t besti = 0;
    for (size_t i = 0; i < pts_.size(); i++) {
      if (int64_t(i) == exclude) continue;
      Real d2 = (pts_[i] - p).norm2();
      if (d2 < best) {
        best = d2;
        besti = uint32_t(i);
      }
    }
    return {besti, best};
  }

  int cq[3];
  for (int a = 0; a < 3; a++) {
    int i = int(((&p.x)[a] - (&lo_.x)[a]) / cell_);
    cq[a] = std::clamp(i, 0, res_[a] - 1);
  }
  Real best = std::numeric_limits<Real>::max();
  uint32_t besti = 0;
  int max_ring = std::max({res_[0], res_[1], res_[2]});

  auto scan_cell = [&](int cx, int cy, int cz) {
    if (cx < 0 || cy < 0 || cz < 0 || cx >= res_[0] || cy >= res_[1] || cz >= res_[2])
      return;
    int ci = cell_index(cx, cy, cz);
    for (uint32_t k = cell_start_[ci]; k < cell_start_[ci + 1]; k++) {
      uint32_t idx = order_[k];
      if (int64_t(idx) == exclude) continue;
      Vec3<Real> d = pts_[idx] - p;
      Real d2 = d.norm2();
      if (d2 < best) {
        best = d2;
        besti = idx;
      }
    }
  };

  // Distance from p to the nearest face of the ring-r cell shell; any point
  // in ring r is at least this far away.
  auto ring_lower_bound = [&](int r) -> Real {
    Real lb = std::numeric_limits<Real>::max();
    for (int a = 0; a < 3; a++) {
      for (int s = -1; s <= 1; s += 2) {
        int idx = cq[a] + s * r;
        Real slab_lo = (&lo_.x)[a] + Real(idx) * cell_;
        Real slab_hi = slab_lo + cell_;
        Real pa = (&p.x)[a];
        Real d = std::max({Real(0), slab_lo - pa, pa - slab_hi});
        lb = std::min(lb, d);
      }
    }
    return lb;
  };

  for (int r = 0; r <= max_ring; r++) {
    if (r > 0 && best < std::numeric_limits<Real>::max()) {
      Real lb = ring_lower_bound(r);
      if (lb * lb > best) break;
    }
    if (r == 0) {
      scan_cell(cq[0], cq[1], cq[2]);
      continue;
    }
    for (int dx = -r; dx <= r; dx++) {
      for (int dy = -r; dy <= r; dy++) {
        for (int dz = -r; dz <= r; dz++) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
          scan_cell(cq[0] + dx, cq[1] + dy, cq[2] + dz);
        }
      }
    }
  }
  return {besti, best};
}

template <class Real>
Real chamfer_with_indices(const PointCloud<Real>& a, const PointCloud<Real>& b,
                          std::vector<uint32_t>& nn_ab,
                          std::vector<uint32_t>& nn_ba) {
  require(!a.empty() && !b.empty(), "chamfer: empty point cloud");
  GridNN<Real> gb(b);
  GridNN<Real> ga(a);
  nn_ab.resize(a.size());
  nn_ba.resize(b.size());
  Real s1 = 0, s2 = 0;
  for (size_t i = 0; i < a.size(); i++) {
    auto [j, d2] = gb.query(a[i]);
    nn_ab[i] = j;
    s1 += d2;
  }
  for (size_t j = 0; j < b.size(); j++) {
    auto [i, d2] = ga.query(b[j]);
    nn_ba[j] = i;
    s2 += d2;
  }
  return s1 + s2;
}

template <class Real>
Real chamfer(const PointCloud<Real>& a, const PointCloud<Real>& b) {
  std::vector<uint32_t> ab, ba;
  return chamfer_with_indices(a, b, ab, ba);
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

namespace {

double pair_cost(const Vec3<double>& a, const Vec3<double>& b) {
  return (a - b).norm2();
}

double assignment_cost(const PointCloud<double>& a, const PointCloud<double>& b,
                       const std::vector<int>& owner_of_a) {
  double c = 0;
  for (size_t i = 0; i < a.size(); i++) c += pair_cost(a[i], b[size_t(owner_of_a[i])]);
  return c;
}

}  // namespace

MatchResult emd_match(const PointCloud<double>& a, const PointCloud<double>& b,
                      int max_iters) {
  require(a.size() == b.size(), "emd_match: clouds must have equal cardinality");
  require(max_iters >= 1, "emd_match: max_iters must be >= 1");
  size_t n = a.size();

  // Greedy warm start: everyone grabs its nearest neighbor; first taker wins.
  GridNN<double> gb(b);
  std::vector<int> a_to_b(n, -1), b_to_a(n, -1);
  for (size_t i = 0; i < n; i++) {
    auto [j, d2] = gb.query(a[i]);
    (void)d2;
    if (b_to_a[j] < 0) {
      b_to_a[j] = int(i);
      a_to_b[i] = int(j);
    }
  }

  MatchResult best;
  best.cost = std::numeric_limits<double>::max();
  auto consider = [&](const std::vector<int>& atob) {
    double c = assignment_cost(a, b, atob);
    if (c < best.cost) {
      best.cost = c;
      best.permutation.assign(atob.begin(), atob.end());
    }
  };

  bool complete = true;
  for (size_t i = 0; i < n; i++) complete &= (a_to_b[i] >= 0);
  if (complete) {
    consider(a_to_b);
    if (best.cost <= 0) return best;  // exact matching found by greedy
  }

  // Scale estimate for the epsilon schedule.
  Vec3<double> lo = a[0], hi = a[0];
  for (const auto& p : a) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = hi.cwise_max(p);
  }
  for (const auto& p : b) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
    hi = hi.cwise_max(p);
  }
  double diag2 = (hi - lo).norm2() + 1e-30;

  std::vector<double> price(n, 0.0);
  double eps = diag2 / 8.0;
  int iters = 0;

  while (iters < max_iters) {
    // Forward auction phase at the current epsilon, starting from scratch to
    // keep the eps-complementary-slackness invariant simple.
    std::vector<int> atob(n, -1), btoa(n, -1);
    std::vector<int> unassigned(n);
    std::iota(unassigned.begin(), unassigned.end(), 0);

    while (!unassigned.empty() && iters < max_iters) {
      iters++;
      std::vector<int> still;
      for (int i : unassigned) {
        // Best and second-best net value over all objects.
        double best_v = std::numeric_limits<double>::max();
        double second_v = std::numeric_limits<double>::max();
        int best_j = -1;
        for (size_t j = 0; j < n; j++) {
          double v = pair_cost(a[size_t(i)], b[j]) + price[j];
          if (v < best_v) {
            second_v = best_v;
            best_v = v;
            best_j = int(j);
          } else if (v < second_v) {
            second_v = v;
          }
        }
        double bid = (second_v == std::numeric_limits<double>::max())
                         ? eps
                         : (second_v - best_v) + eps;
        price[size_t(best_j)] += bid;
        int prev = btoa[size_t(best_j)];
        if (prev >= 0) {
          atob[size_t(prev)] = -1;
          still.push_back(prev);
        }
        btoa[size_t(best_j)] = i;
        atob[size_t(i)] = best_j;
      }
      unassigned.swap(still);
    }

    if (unassigned.empty()) {
      consider(atob);
      // Auction optimality gap is at most n*eps; stop once it is negligible
      // next to the best cost seen.
      if (best.cost <= 0) break;
      if (double(n) * eps <= 0.005 * best.cost) break;
    }
    if (eps <= 1e-16 * diag2) break;
    eps /= 8.0;
  }

  if (best.permutation.empty()) {
    // Iteration cap hit before any complete assignment: fall back to the
    // exact solver for small instances, identity otherwise.
    if (n <= 256) return matching_oracle(a, b);
    best.permutation.resize(n);
    std::iota(best.permutation.begin(), best.permutation.end(), 0);
    std::vector<int> id(n);
    std::iota(id.begin(), id.end(), 0);
    best.cost = assignment_cost(a, b, id);
  }
  return best;
}

MatchResult matching_oracle(const PointCloud<double>& a, const PointCloud<double>& b) {
  require(a.size() == b.size(), "matching_oracle: clouds must have equal cardinality");
  require(a.size() <= 256, "matching_oracle: instance too large (n > 256)");
  int n = int(a.size());

  // Jonker-Volgenant style shortest augmenting path assignment.
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; i++) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, std::numeric_limits<double>::max());
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = 0;
      double delta = std::numeric_limits<double>::max();
      for (int j = 1; j <= n; j++) {
        if (used[j]) continue;
        double cur = pair_cost(a[size_t(i0 - 1)], b[size_t(j - 1)]) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; j++) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }

  MatchResult r;
  r.permutation.assign(size_t(n), 0);
  for (int j = 1; j <= n; j++)
    if (p[j] > 0) r.permutation[size_t(p[j] - 1)] = uint32_t(j - 1);
  std::vector<int> atob(r.permutation.begin(), r.permutation.end());
  r.cost = assignment_cost(a, b, atob);
  return r;
}

// ---------------------------------------------------------------------------
// Tape node
// ---------------------------------------------------------------------------

namespace {

template <class Real>
struct ChamferNode final : ad::Node<Real> {
  std::vector<uint32_t> nn_ab, nn_ba;
  const char* name() const override { return "chamfer"; }
  void forward(ad::Tape<Real>& t) override {
    PointCloud<Real> a = cloud_from_flat(t.val(this->ins[0]));
    PointCloud<Real> b = cloud_from_flat(t.val(this->ins[1]));
    t.val(this->outs[0])[0] = chamfer_with_indices(a, b, nn_ab, nn_ba);
  }
  void backward(ad::Tape<Real>& t) override {
    Real d = t.grad(this->outs[0])[0];
    const auto& A = t.val(this->ins[0]);
    const auto& B = t.val(this->ins[1]);
    auto& dA = t.grad(this->ins[0]);
    auto& dB = t.grad(this->ins[1]);
    size_t na = nn_ab.size(), nb = nn_ba.size();
    for (size_t i = 0; i < na; i++) {
      size_t j = nn_ab[i];
      for (int c = 0; c < 3; c++) {
        Real diff = A[i * 3 + size_t(c)] - B[j * 3 + size_t(c)];
        dA[i * 3 + size_t(c)] += d * 2 * diff;
        dB[j * 3 + size_t(c)] -= d * 2 * diff;
      }
    }
    for (size_t j = 0; j < nb; j++) {
      size_t i = nn_ba[j];
      for (int c = 0; c < 3; c++) {
        Real diff = B[j * 3 + size_t(c)] - A[i * 3 + size_t(c)];
        dB[j * 3 + size_t(c)] += d * 2 * diff;
        dA[i * 3 + size_t(c)] -= d * 2 * diff;
      }
    }
  }
};

}  // namespace

template <class Real>
ad::VarId chamfer_op(ad::Tape<Real>& t, ad::VarId A, ad::VarId B) {
  require(t.cols(A) == 3 && t.cols(B) == 3, "chamfer_op: inputs must be n x 3");
  auto n = std::make_unique<ChamferNode<Real>>();
  n->ins = {A, B};
  n->outs = {t.alloc(1, 1)};
  return t.record(std::move(n));
}

template <class Real>
PointCloud<Real> cloud_from_flat(const std::vector<Real>& flat) {
  require(flat.size() % 3 == 0, "cloud_from_flat: size not divisible by 3");
  PointCloud<Real> c(flat.size() / 3);
  for (size_t i = 0; i < c.size(); i++)
    c[i] = {flat[i * 3], flat[i * 3 + 1], flat[i * 3 + 2]};
  return c;
}

template <class Real>
std::vector<Real> flat_from_cloud(const PointCloud<Real>& cloud) {
  std::vector<Real> f(cloud.size() * 3);
  for (size_t i = 0; i < cloud.size(); i++) {
    f[i * 3] = cloud[i].x;
    f[i * 3 + 1] = cloud[i].y;
    f[i * 3 + 2] = cloud[i].z;
  }
  return f;
}

template class GridNN<float>;
template class GridNN<double>;
template float chamfer(const PointCloud<float>&, const PointCloud<float>&);
template double chamfer(const PointCloud<double>&, const PointCloud<double>&);
template float chamfer_with_indices(const PointCloud<float>&, const PointCloud<float>&, std::vector<uint32_t>&, std::vector<uint32_t>&);
template double chamfer_with_indices(const PointCloud<double>&, const PointCloud<double>&, std::vector<uint32_t>&, std::vector<uint32_t>&);
template ad::VarId chamfer_op(ad::Tape<float>&, ad::VarId, ad::VarId);
template ad::VarId chamfer_op(ad::Tape<double>&, ad::VarId, ad::VarId);
template PointCloud<float> cloud_from_flat(const std::vector<float>&);
template PointCloud<double> cloud_from_flat(const std::vector<double>&);
template std::vector<float> flat_from_cloud(const PointCloud<float>&);
template std::vector<double> flat_from_cloud(const PointCloud<double>&);

}  // namespace diffsrl::metrics
