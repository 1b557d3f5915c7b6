#include <doctest.h>

#include "diffsrl/geometry.hpp"
#include "oracles.hpp"

using namespace diffsrl;
using namespace diffsrl::geom;

namespace {

RigidPrimitive<double> sphere(double r, Vec3<double> c) {
  RigidPrimitive<double> p;
  p.kind = ShapeKind::Sphere;
  p.radius = r;
  p.trans = c;
  return p;
}

RigidPrimitive<double> capsule(double r, double hl, Vec3<double> c) {
  RigidPrimitive<double> p;
  p.kind = ShapeKind::Capsule;
  p.radius = r;
  p.half_length = hl;
  p.trans = c;
  return p;
}

RigidPrimitive<double> box(Vec3<double> he, Vec3<double> c) {
  RigidPrimitive<double> p;
  p.kind = ShapeKind::Box;
  p.half_extents = he;
  p.trans = c;
  return p;
}

Mat3<double> axis_angle(Vec3<double> axis, double angle) {
  axis = axis.normalized();
  Mat3<double> K = Mat3<double>::skew(axis);
  return Mat3<double>::identity() + K * std::sin(angle) +
         K * K * (1 - std::cos(angle));
}

// Dense surface sampling distance oracle.
double sampled_surface_distance(const RigidPrimitive<double>& prim,
                                const Vec3<double>& q, int steps = 160) {
  double best = 1e300;
  Pcg32 rng(99, 1);
  for (int i = 0; i < steps * steps; i++) {
    // Random surface point in local frame.
    Vec3<double> s;
    double u = rng.uniform(), v = rng.uniform();
    double th = 2 * 3.14159265358979323846 * u;
    double z = 2 * v - 1;
    double rxy = std::sqrt(std::max(0.0, 1 - z * z));
    Vec3<double> dir{rxy * std::cos(th), z, rxy * std::sin(th)};
    switch (prim.kind) {
      case ShapeKind::Sphere:
        s = dir * prim.radius;
        break;
      case ShapeKind::Capsule: {
        double t = rng.uniform(-1, 1) * prim.half_length;
        s = dir * prim.radius;
        s.y += t;
        // project back onto the capsule surface
        Vec3<double> core{0, std::clamp(s.y, -prim.half_length, prim.half_length), 0};
        s = core + (s - core).normalized() * prim.radius;
        break;
      }
      case ShapeKind::Box: {
        Vec3<double> r{rng.uniform(-1, 1) * prim.half_extents.x,
                       rng.uniform(-1, 1) * prim.half_extents.y,
                       rng.uniform(-1, 1) * prim.half_extents.z};
        int face = int(rng.uniform_int(3));
        double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        r[face] = sign * prim.half_extents[face];
        s = r;
        break;
      }
    }
    Vec3<double> world = prim.rot * s + prim.trans;
    best = std::min(best, (world - q).norm());
  }
  return best;
}

}  // namespace

TEST_CASE("sphere sdf: radial distance and gradient") {
  auto p = sphere(0.1, {0, 0, 0});
  auto r = sdf_eval(p, {0.2, 0, 0});
  CHECK(r.dist == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(r.grad.x == doctest::Approx(1.0));
  CHECK(r.grad.y == doctest::Approx(0.0));

  auto c = sdf_eval(p, {0, 0, 0});
  CHECK(c.dist == doctest::Approx(-0.1).epsilon(1e-12));
  CHECK(c.grad.norm() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("box corner distance is the Euclidean norm of the offset") {
  auto p = box({1, 1, 1}, {0, 0, 0});
  auto r = sdf_eval(p, {2, 2, 2});
  CHECK(r.dist == doctest::Approx(std::sqrt(3.0)).epsilon(1e-12));
}

TEST_CASE("sdf magnitude equals sampled surface distance") {
  std::vector<RigidPrimitive<double>> prims = {
      sphere(0.12, {0.4, 0.5, 0.6}),
      capsule(0.05, 0.1, {0.5, 0.5, 0.5}),
      box({0.08, 0.05, 0.1}, {0.45, 0.55, 0.5}),
  };
  prims[1].rot = axis_angle({1, 0.4, 0.2}, 0.7);
  prims[2].rot = axis_angle({0.3, 1, -0.5}, -1.1);
  Pcg32 rng(4, 4);
  for (const auto& prim : prims) {
    for (int q = 0; q < 40; q++) {
      Vec3<double> pt{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                      rng.uniform(0.2, 0.8)};
      auto r = sdf_eval(prim, pt);
      double ref = sampled_surface_distance(prim, pt);
      // Sampling resolution limits the oracle; allow its discretization slack.
      CHECK(std::fabs(std::fabs(r.dist) - ref) < 5e-3);
    }
  }
}

TEST_CASE("sdf gradient: unit norm and finite-difference agreement") {
  std::vector<RigidPrimitive<double>> prims = {
      sphere(0.12, {0.4, 0.5, 0.6}),
      capsule(0.05, 0.1, {0.5, 0.5, 0.5}),
      box({0.08, 0.05, 0.1}, {0.45, 0.55, 0.5}),
  };
  prims[1].rot = axis_angle({0.2, 1, 0}, 0.5);
  Pcg32 rng(8, 4);
  for (const auto& prim : prims) {
    for (int q = 0; q < 60; q++) {
      Vec3<double> pt{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                      rng.uniform(0.2, 0.8)};
      auto r = sdf_eval(prim, pt);
      CHECK(std::fabs(r.grad.norm() - 1.0) < 1e-9);
      auto f = [&](const std::vector<double>& v) {
        return sdf_eval(prim, Vec3<double>{v[0], v[1], v[2]}).dist;
      };
      auto g = oracles::fd_gradient(f, {pt.x, pt.y, pt.z}, 1e-6);
      for (int c = 0; c < 3; c++) CHECK(std::fabs(g[size_t(c)] - r.grad[c]) < 1e-5);
    }
  }
}

TEST_CASE("sdf hessian matches finite differences of the gradient") {
  std::vector<RigidPrimitive<double>> prims = {
      sphere(0.12, {0.4, 0.5, 0.6}),
      capsule(0.05, 0.1, {0.5, 0.5, 0.5}),
      box({0.08, 0.05, 0.1}, {0.45, 0.55, 0.5}),
  };
  Pcg32 rng(12, 4);
  for (const auto& prim : prims) {
    for (int q = 0; q < 30; q++) {
      Vec3<double> pt{rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75),
                      rng.uniform(0.25, 0.75)};
      if (sdf_eval(prim, pt).dist < 0.01) continue;  // stay off branch kinks
      Mat3<double> H = sdf_hessian(prim, pt);
      for (int c = 0; c < 3; c++) {
        Vec3<double> e{0, 0, 0};
        e[c] = 1e-5;
        Vec3<double> gp = sdf_eval(prim, pt + e).grad;
        Vec3<double> gm = sdf_eval(prim, pt - e).grad;
        for (int rr = 0; rr < 3; rr++) {
          double num = (gp[rr] - gm[rr]) / 2e-5;
          CHECK(std::fabs(H(rr, c) - num) < 1e-4);
        }
      }
    }
  }
}

TEST_CASE("min exit displacement: sphere center, feasible identity") {
  std::vector<RigidPrimitive<double>> prims = {sphere(0.1, {0.5, 0.5, 0.5})};
  auto r = min_exit_displacement(prims, {0.5, 0.5, 0.5}, 0.002);
  CHECK(r.cost == doctest::Approx(0.102).epsilon(1e-9));
  auto after = Vec3<double>{0.5, 0.5, 0.5} + r.displacement;
  CHECK(sdf_eval(prims[0], after).dist >= 0.002 - 1e-6);

  auto feas = min_exit_displacement(prims, {0.9, 0.5, 0.5}, 0.002);
  CHECK(feas.cost == 0.0);
  CHECK(feas.displacement.norm() == 0.0);
}

TEST_CASE("single-primitive displacement is (margin - sdf) * gradient") {
  auto prim = capsule(0.06, 0.08, {0.5, 0.5, 0.5});
  std::vector<RigidPrimitive<double>> prims = {prim};
  Vec3<double> pt{0.52, 0.51, 0.5};
  double margin = 0.004;
  auto s = sdf_eval(prim, pt);
  REQUIRE(s.dist < margin);
  auto r = min_exit_displacement(prims, pt, margin);
  Vec3<double> expect = s.grad * (margin - s.dist);
  CHECK((r.displacement - expect).norm() < 1e-9);
}

TEST_CASE("two-sphere overlap: feasible and near the sampled optimum") {
  std::vector<RigidPrimitive<double>> prims = {sphere(0.1, {0.45, 0.5, 0.5}),
                                               sphere(0.1, {0.55, 0.5, 0.5})};
  Vec3<double> pt{0.5, 0.5, 0.5};
  double margin = 0.002;
  auto r = min_exit_displacement(prims, pt, margin);
  Vec3<double> after = pt + r.displacement;
  for (const auto& p : prims) CHECK(sdf_eval(p, after).dist >= margin - 1e-6);

  // Direction-sampling oracle: bisection along 10^4 random directions.
  Pcg32 rng(21, 9);
  double best = 1e300;
  for (int i = 0; i < 10000; i++) {
    double th = 2 * 3.14159265358979323846 * rng.uniform();
    double z = rng.uniform(-1, 1);
    double rxy = std::sqrt(std::max(0.0, 1 - z * z));
    Vec3<double> dir{rxy * std::cos(th), z, rxy * std::sin(th)};
    double lo = 0, hi = 0.4;
    for (int it = 0; it < 60; it++) {
      double mid = 0.5 * (lo + hi);
      Vec3<double> q = pt + dir * mid;
      bool ok = true;
      for (const auto& p : prims) ok &= sdf_eval(p, q).dist >= margin;
      (ok ? hi : lo) = mid;
    }
    best = std::min(best, hi);
  }
  CHECK(r.cost <= best + 1e-4);
  CHECK(r.cost >= best - 1e-4);
}

TEST_CASE("min exit displacement is idempotent") {
  std::vector<RigidPrimitive<double>> prims = {
      sphere(0.09, {0.48, 0.5, 0.5}), capsule(0.05, 0.07, {0.55, 0.52, 0.5})};
  Pcg32 rng(31, 2);
  for (int i = 0; i < 50; i++) {
    Vec3<double> pt{rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6),
                    rng.uniform(0.4, 0.6)};
    auto r1 = min_exit_displacement(prims, pt, 0.003);
    Vec3<double> moved = pt + r1.displacement;
    auto r2 = min_exit_displacement(prims, moved, 0.003);
    CHECK(r2.displacement.norm() == 0.0);
  }
}

TEST_CASE("primitive validation rejects bad parameters") {
  auto p = sphere(-0.1, {0, 0, 0});
  CHECK_THROWS_AS(p.validate(), Error);
  auto q = box({0.1, 0.1, 0.1}, {0, 0, 0});
  q.rot(0, 0) = 2.0;
  CHECK_THROWS_AS(q.validate(), Error);
}
