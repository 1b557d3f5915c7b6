#include <doctest.h>

#include <numeric>

#include "diffsrl/metrics.hpp"
#include "oracles.hpp"

using namespace diffsrl;
using namespace diffsrl::metrics;

namespace {

PointCloud<double> random_cloud(size_t n, Pcg32& rng, double lo = 0, double hi = 1) {
  PointCloud<double> c(n);
  for (auto& p : c)
    p = {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
  return c;
}

PointCloud<double> shuffled(const PointCloud<double>& a, Pcg32& rng,
                            std::vector<uint32_t>* perm_out = nullptr) {
  std::vector<uint32_t> idx(a.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (size_t i = a.size(); i > 1; i--)
    std::swap(idx[i - 1], idx[rng.uniform_int(uint32_t(i))]);
  PointCloud<double> b(a.size());
  for (size_t i = 0; i < a.size(); i++) b[i] = a[idx[i]];
  if (perm_out) *perm_out = idx;
  return b;
}

}  // namespace

TEST_CASE("chamfer basics: identity, two points, empty error") {
  Pcg32 rng(3, 1);
  PointCloud<double> a = random_cloud(50, rng);
  CHECK(chamfer(a, a) == 0.0);

  PointCloud<double> s{{0, 0, 0}};
  PointCloud<double> t{{1, 0, 0}};
  CHECK(chamfer(s, t) == doctest::Approx(2.0).epsilon(1e-15));

  PointCloud<double> empty;
  CHECK_THROWS_AS(chamfer(empty, a), Error);
}

TEST_CASE("chamfer equals the brute-force oracle exactly on 100 random pairs") {
  Pcg32 rng(5, 1);
  for (int rep = 0; rep < 100; rep++) {
    PointCloud<double> a = random_cloud(128, rng);
    PointCloud<double> b = random_cloud(128, rng);
    double fast = chamfer(a, b);
    double ref = oracles::brute_chamfer(a, b);
    CHECK(fast == ref);
    CHECK(chamfer(a, b) == chamfer(b, a));
  }
}

TEST_CASE("chamfer handles clouds of unequal size and scale") {
  Pcg32 rng(7, 1);
  PointCloud<double> a = random_cloud(64, rng);
  PointCloud<double> b = random_cloud(200, rng, -3, 5);
  CHECK(chamfer(a, b) == oracles::brute_chamfer(a, b));
}

TEST_CASE("chamfer gradient matches finite differences (fixed neighbors)") {
  Pcg32 rng(9, 1);
  PointCloud<double> a = random_cloud(24, rng);
  PointCloud<double> b = random_cloud(24, rng);
  ad::Program<double> p;
  p.leaves.push_back({flat_from_cloud(a), a.size(), 3});
  p.leaves.push_back({flat_from_cloud(b), b.size(), 3});
  p.build = [](ad::Tape<double>& t, const std::vector<ad::VarId>& l) {
    return chamfer_op(t, l[0], l[1]);
  };
  for (size_t leaf = 0; leaf < 2; leaf++)
    CHECK(ad::check_gradient(p, leaf, 1e-6).max_rel_err < 1e-5);
}

TEST_CASE("emd_match recovers a permutation with zero cost") {
  Pcg32 rng(11, 1);
  PointCloud<double> a = random_cloud(200, rng);
  std::vector<uint32_t> perm;
  PointCloud<double> b = shuffled(a, rng, &perm);
  MatchResult m = emd_match(a, b, 3000);
  CHECK(m.cost < 1e-9);
  for (size_t i = 0; i < a.size(); i++) CHECK((a[i] - b[m.permutation[i]]).norm() == 0.0);
}

TEST_CASE("emd_match within 1% of the Hungarian optimum at n=64") {
  Pcg32 rng(13, 1);
  for (int rep = 0; rep < 50; rep++) {
    PointCloud<double> a = random_cloud(64, rng);
    PointCloud<double> b = random_cloud(64, rng);
    MatchResult approx = emd_match(a, b, 3000);
    MatchResult exact = matching_oracle(a, b);
    CHECK(approx.cost >= exact.cost - 1e-12);
    CHECK(approx.cost <= 1.01 * exact.cost);
  }
}

TEST_CASE("emd_match rejects mismatched sizes") {
  Pcg32 rng(15, 1);
  PointCloud<double> a = random_cloud(8, rng);
  PointCloud<double> b = random_cloud(9, rng);
  CHECK_THROWS_AS(emd_match(a, b, 10), Error);
}

TEST_CASE("matching_oracle equals exhaustive enumeration at n=8") {
  Pcg32 rng(17, 1);
  for (int rep = 0; rep < 20; rep++) {
    PointCloud<double> a = random_cloud(8, rng);
    PointCloud<double> b = random_cloud(8, rng);
    MatchResult m = matching_oracle(a, b);
    double ref = oracles::exhaustive_matching_cost(a, b);
    CHECK(m.cost == doctest::Approx(ref).epsilon(1e-12));
    // Permutation must be a bijection.
    std::vector<char> seen(8, 0);
    for (uint32_t j : m.permutation) seen[j]++;
    for (char s : seen) CHECK(s == 1);
  }
}

TEST_CASE("matching_oracle: identity on identical clouds, crossed pair") {
  Pcg32 rng(19, 1);
  PointCloud<double> a = random_cloud(16, rng);
  MatchResult m = matching_oracle(a, a);
  CHECK(m.cost == 0.0);

  // Crossed arrangement: the non-crossing matching wins.
  PointCloud<double> p{{0, 0, 0}, {1, 0, 0}};
  PointCloud<double> q{{1.1, 0, 0}, {-0.1, 0, 0}};
  MatchResult c = matching_oracle(p, q);
  CHECK(c.permutation[0] == 1);
  CHECK(c.permutation[1] == 0);

  CHECK_THROWS_AS(matching_oracle(random_cloud(300, rng), random_cloud(300, rng)),
                  Error);
}

TEST_CASE("chamfer is zero iff the clouds cover each other") {
  Pcg32 rng(23, 1);
  PointCloud<double> a = random_cloud(20, rng);
  PointCloud<double> b = a;
  b.push_back(a[3]);  // duplicate: still mutual coverage
  std::swap(b[0], b[7]);
  CHECK(chamfer(a, b) == 0.0);

  PointCloud<double> c = a;
  c[5].x += 0.25;  // point of c not in a (and vice versa)
  CHECK(chamfer(a, c) > 0.0);
}
