#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffsrl {

// All errors thrown by the core carry a human-readable message; the C API
// translates them into status codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

template <class... Args>
std::string format(const char* fmt, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), fmt, args...);
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Small fixed-size linear algebra. MPM kernels and their adjoints need tight
// control over every operation, so these are hand-rolled rather than pulled
// from a matrix library.
// ---------------------------------------------------------------------------

template <class T>
struct Vec3 {
  T x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

  T& operator[](int i) { return (&x)[i]; }
  const T& operator[](int i) const { return (&x)[i]; }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3 operator*(T s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(T s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec3& operator*=(T s) { x *= s; y *= s; z *= s; return *this; }

  T dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  T norm2() const { return dot(*this); }
  T norm() const { return std::sqrt(norm2()); }
  Vec3 normalized(T eps = T(0)) const {
    T n = norm();
    if (n <= eps) return {T(1), T(0), T(0)};
    return *this / n;
  }
  Vec3 cwise_mul(const Vec3& o) const { return {x * o.x, y * o.y, z * o.z}; }
  Vec3 cwise_max(const Vec3& o) const {
    return {std::max(x, o.x), std::max(y, o.y), std::max(z, o.z)};
  }
  T max_coeff() const { return std::max(x, std::max(y, z)); }
  T min_coeff() const { return std::min(x, std::min(y, z)); }
  bool all_finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
  }

  template <class U>
  Vec3<U> cast() const { return {U(x), U(y), U(z)}; }
};

template <class T>
inline Vec3<T> operator*(T s, const Vec3<T>& v) { return v * s; }

// Row-major 3x3 matrix.
template <class T>
struct Mat3 {
  T m[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};

  Mat3() = default;
  Mat3(T a00, T a01, T a02, T a10, T a11, T a12, T a20, T a21, T a22) {
    m[0][0] = a00; m[0][1] = a01; m[0][2] = a02;
    m[1][0] = a10; m[1][1] = a11; m[1][2] = a12;
    m[2][0] = a20; m[2][1] = a21; m[2][2] = a22;
  }

  static Mat3 identity() { return Mat3(1, 0, 0, 0, 1, 0, 0, 0, 1); }
  static Mat3 zero() { return Mat3(); }
  // a * b^T
  static Mat3 outer(const Vec3<T>& a, const Vec3<T>& b) {
    return Mat3(a.x * b.x, a.x * b.y, a.x * b.z,
                a.y * b.x, a.y * b.y, a.y * b.z,
                a.z * b.x, a.z * b.y, a.z * b.z);
  }
  static Mat3 diag(const Vec3<T>& d) {
    return Mat3(d.x, 0, 0, 0, d.y, 0, 0, 0, d.z);
  }
  // Cross-product matrix: skew(w) v == w x v.
  static Mat3 skew(const Vec3<T>& w) {
    return Mat3(0, -w.z, w.y, w.z, 0, -w.x, -w.y, w.x, 0);
  }

  T* operator[](int r) { return m[r]; }
  const T* operator[](int r) const { return m[r]; }
  T& operator()(int r, int c) { return m[r][c]; }
  const T& operator()(int r, int c) const { return m[r][c]; }

  Mat3 operator+(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) r.m[i][j] = m[i][j] + o.m[i][j];
    return r;
  }
  Mat3 operator-(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) r.m[i][j] = m[i][j] - o.m[i][j];
    return r;
  }
  Mat3 operator*(T s) const {
    Mat3 r;
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) r.m[i][j] = m[i][j] * s;
    return r;
  }
  Mat3& operator+=(const Mat3& o) {
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) m[i][j] += o.m[i][j];
    return *this;
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) {
        T s = 0;
        for (int k = 0; k < 3; k++) s += m[i][k] * o.m[k][j];
        r.m[i][j] = s;
      }
    return r;
  }
  Vec3<T> operator*(const Vec3<T>& v) const {
    return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
  }
  Mat3 transposed() const {
    return Mat3(m[0][0], m[1][0], m[2][0],
                m[0][1], m[1][1], m[2][1],
                m[0][2], m[1][2], m[2][2]);
  }
  Vec3<T> transpose_mul(const Vec3<T>& v) const {
    return {m[0][0] * v.x + m[1][0] * v.y + m[2][0] * v.z,
            m[0][1] * v.x + m[1][1] * v.y + m[2][1] * v.z,
            m[0][2] * v.x + m[1][2] * v.y + m[2][2] * v.z};
  }
  T det() const {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  }
  Mat3 inverse() const {
    T d = det();
    Mat3 r;
    r.m[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d;
    r.m[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d;
    r.m[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d;
    r.m[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d;
    r.m[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d;
    r.m[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d;
    r.m[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d;
    r.m[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d;
    r.m[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d;
    return r;
  }
  T trace() const { return m[0][0] + m[1][1] + m[2][2]; }
  T frob_inner(const Mat3& o) const {
    T s = 0;
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) s += m[i][j] * o.m[i][j];
    return s;
  }
  T frob_norm() const { return std::sqrt(frob_inner(*this)); }
  // axial(W) for skew W: W v == axial x v.
  Vec3<T> axial() const {
    return {(m[2][1] - m[1][2]) / T(2), (m[0][2] - m[2][0]) / T(2),
            (m[1][0] - m[0][1]) / T(2)};
  }
  bool all_finite() const {
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++)
        if (!std::isfinite(m[i][j])) return false;
    return true;
  }
  template <class U>
  Mat3<U> cast() const {
    Mat3<U> r;
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) r.m[i][j] = U(m[i][j]);
    return r;
  }
};

using Vec3f = Vec3<float>;
using Vec3d = Vec3<double>;
using Mat3f = Mat3<float>;
using Mat3d = Mat3<double>;

// ---------------------------------------------------------------------------
// Deterministic RNG (PCG32). std::mt19937 distributions are not bit-stable
// across standard library implementations; reproducible datasets and training
// curves need a pinned generator.
// ---------------------------------------------------------------------------

class Pcg32 {
 public:
  explicit Pcg32(uint64_t seed = 0x853c49e6748fea9bULL, uint64_t seq = 1) {
    state_ = 0;
    inc_ = (seq << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    uint32_t xorshifted = uint32_t(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = uint32_t(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31));
  }

  // Uniform in [0, 1).
  double uniform() { return next_u32() * (1.0 / 4294967296.0); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint32_t uniform_int(uint32_t n) {
    // Lemire-style rejection to avoid modulo bias.
    uint64_t x = next_u32();
    uint64_t m = x * n;
    uint32_t l = uint32_t(m);
    if (l < n) {
      uint32_t t = (-n) % n;
      while (l < t) {
        x = next_u32();
        m = x * n;
        l = uint32_t(m);
      }
    }
    return uint32_t(m >> 32);
  }

  // Standard normal (Box-Muller).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0;
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double th = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

 private:
  uint64_t state_ = 0;
  uint64_t inc_ = 0;
  double spare_ = 0;
  bool has_spare_ = false;
};

// FNV-1a, used for config/dataset hashes in reports.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; i++) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ULL) {
  return fnv1a(s.data(), s.size(), h);
}

template <class T>
bool all_finite(const std::vector<T>& v) {
  for (const T& x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace diffsrl
