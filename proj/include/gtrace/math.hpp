// SPDX-License-Identifier: Apache-2.0
//
// Small vector/matrix/quaternion math, AABBs, ray primitives and RNG used
// throughout the library. Everything is templated on the scalar type; the
// hot path instantiates float, test oracles instantiate double.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

namespace gtrace {

template <typename T>
constexpr T pi = T(3.14159265358979323846);

template <typename T>
struct Vec2 {
  T x = 0, y = 0;

  Vec2() = default;
  Vec2(T x_, T y_) : x(x_), y(y_) {}

  T& operator[](int i) { return (&x)[i]; }
  T operator[](int i) const { return (&x)[i]; }
};

template <typename T>
struct Vec3 {
  T x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}
  explicit Vec3(T v) : x(v), y(v), z(v) {}

  template <typename U>
  explicit Vec3(const Vec3<U>& o) : x(T(o.x)), y(T(o.y)), z(T(o.z)) {}

  T& operator[](int i) { return (&x)[i]; }
  T operator[](int i) const { return (&x)[i]; }
};

template <typename T>
struct Vec4 {
  T x = 0, y = 0, z = 0, w = 0;

  Vec4() = default;
  Vec4(T x_, T y_, T z_, T w_) : x(x_), y(y_), z(z_), w(w_) {}

  template <typename U>
  explicit Vec4(const Vec4<U>& o) : x(T(o.x)), y(T(o.y)), z(T(o.z)), w(T(o.w)) {}

  T& operator[](int i) { return (&x)[i]; }
  T operator[](int i) const { return (&x)[i]; }
};

using Vec2f = Vec2<float>;
using Vec3f = Vec3<float>;
using Vec4f = Vec4<float>;
using Vec2d = Vec2<double>;
using Vec3d = Vec3<double>;
using Vec4d = Vec4<double>;

// clang-format off
template <typename T> inline Vec2<T> operator+(Vec2<T> a, Vec2<T> b) { return {a.x + b.x, a.y + b.y}; }
template <typename T> inline Vec2<T> operator-(Vec2<T> a, Vec2<T> b) { return {a.x - b.x, a.y - b.y}; }
template <typename T> inline Vec2<T> operator*(T s, Vec2<T> a) { return {s * a.x, s * a.y}; }
template <typename T> inline Vec2<T> operator*(Vec2<T> a, T s) { return {s * a.x, s * a.y}; }
template <typename T> inline T dot(Vec2<T> a, Vec2<T> b) { return a.x * b.x + a.y * b.y; }
template <typename T> inline T length(Vec2<T> a) { return std::sqrt(dot(a, a)); }

template <typename T> inline Vec3<T> operator+(Vec3<T> a, Vec3<T> b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
template <typename T> inline Vec3<T> operator-(Vec3<T> a, Vec3<T> b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
template <typename T> inline Vec3<T> operator-(Vec3<T> a) { return {-a.x, -a.y, -a.z}; }
template <typename T> inline Vec3<T> operator*(T s, Vec3<T> a) { return {s * a.x, s * a.y, s * a.z}; }
template <typename T> inline Vec3<T> operator*(Vec3<T> a, T s) { return {s * a.x, s * a.y, s * a.z}; }
template <typename T> inline Vec3<T> operator*(Vec3<T> a, Vec3<T> b) { return {a.x * b.x, a.y * b.y, a.z * b.z}; }
template <typename T> inline Vec3<T> operator/(Vec3<T> a, T s) { return {a.x / s, a.y / s, a.z / s}; }
template <typename T> inline Vec3<T> operator/(Vec3<T> a, Vec3<T> b) { return {a.x / b.x, a.y / b.y, a.z / b.z}; }
template <typename T> inline Vec3<T>& operator+=(Vec3<T>& a, Vec3<T> b) { a = a + b; return a; }
template <typename T> inline Vec3<T>& operator-=(Vec3<T>& a, Vec3<T> b) { a = a - b; return a; }
template <typename T> inline Vec3<T>& operator*=(Vec3<T>& a, T s) { a = a * s; return a; }
template <typename T> inline bool operator==(Vec3<T> a, Vec3<T> b) { return a.x == b.x && a.y == b.y && a.z == b.z; }
template <typename T> inline T dot(Vec3<T> a, Vec3<T> b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
template <typename T> inline Vec3<T> cross(Vec3<T> a, Vec3<T> b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
template <typename T> inline T length_sq(Vec3<T> a) { return dot(a, a); }
template <typename T> inline T length(Vec3<T> a) { return std::sqrt(dot(a, a)); }
template <typename T> inline Vec3<T> normalize(Vec3<T> a) { T l = length(a); return l > 0 ? a / l : a; }
template <typename T> inline Vec3<T> min(Vec3<T> a, Vec3<T> b) { return {std::min(a.x, b.x), std::min(a.y, b.y), std::min(a.z, b.z)}; }
template <typename T> inline Vec3<T> max(Vec3<T> a, Vec3<T> b) { return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)}; }
template <typename T> inline Vec3<T> abs(Vec3<T> a) { return {std::abs(a.x), std::abs(a.y), std::abs(a.z)}; }
template <typename T> inline T max_component(Vec3<T> a) { return std::max(a.x, std::max(a.y, a.z)); }
template <typename T> inline T min_component(Vec3<T> a) { return std::min(a.x, std::min(a.y, a.z)); }
template <typename T> inline bool is_finite(Vec3<T> a) { return std::isfinite(a.x) && std::isfinite(a.y) && std::isfinite(a.z); }

template <typename T> inline Vec4<T> operator+(Vec4<T> a, Vec4<T> b) { return {a.x + b.x, a.y + b.y, a.z + b.z, a.w + b.w}; }
template <typename T> inline Vec4<T> operator-(Vec4<T> a, Vec4<T> b) { return {a.x - b.x, a.y - b.y, a.z - b.z, a.w - b.w}; }
template <typename T> inline Vec4<T> operator*(T s, Vec4<T> a) { return {s * a.x, s * a.y, s * a.z, s * a.w}; }
template <typename T> inline Vec4<T>& operator+=(Vec4<T>& a, Vec4<T> b) { a = a + b; return a; }
template <typename T> inline T dot(Vec4<T> a, Vec4<T> b) { return a.x * b.x + a.y * b.y + a.z * b.z + a.w * b.w; }
template <typename T> inline T length(Vec4<T> a) { return std::sqrt(dot(a, a)); }
template <typename T> inline Vec4<T> normalize(Vec4<T> a) { T l = length(a); return l > 0 ? Vec4<T>{a.x / l, a.y / l, a.z / l, a.w / l} : a; }
// clang-format on

template <typename T>
inline T clamp(T v, T lo, T hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

template <typename T>
inline T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
inline T logit(T p) {
  return std::log(p / (T(1) - p));
}

// Row-major 3x3 matrix.
template <typename T>
struct Mat3 {
  std::array<std::array<T, 3>, 3> m{};

  static Mat3 identity() {
    Mat3 r;
    r.m[0][0] = r.m[1][1] = r.m[2][2] = T(1);
    return r;
  }

  Vec3<T> operator*(Vec3<T> v) const {
    return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
  }

  // transpose(M) * v without materializing the transpose
  Vec3<T> tmul(Vec3<T> v) const {
    return {m[0][0] * v.x + m[1][0] * v.y + m[2][0] * v.z,
            m[0][1] * v.x + m[1][1] * v.y + m[2][1] * v.z,
            m[0][2] * v.x + m[1][2] * v.y + m[2][2] * v.z};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        r.m[i][j] = m[i][0] * o.m[0][j] + m[i][1] * o.m[1][j] + m[i][2] * o.m[2][j];
    return r;
  }
};

using Mat3f = Mat3<float>;
using Mat3d = Mat3<double>;

// Rotation matrix from a w-first quaternion (normalized internally).
template <typename T>
inline Mat3<T> quat_to_mat3(Vec4<T> q) {
  q = normalize(q);
  const T r = q.x, x = q.y, y = q.z, z = q.w;
  Mat3<T> R;
  R.m[0] = {T(1) - T(2) * (y * y + z * z), T(2) * (x * y - r * z), T(2) * (x * z + r * y)};
  R.m[1] = {T(2) * (x * y + r * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - r * x)};
  R.m[2] = {T(2) * (x * z - r * y), T(2) * (y * z + r * x), T(1) - T(2) * (x * x + y * y)};
  return R;
}

// Hamilton product, w-first.
template <typename T>
inline Vec4<T> quat_mul(Vec4<T> a, Vec4<T> b) {
  return {a.x * b.x - a.y * b.y - a.z * b.z - a.w * b.w,
          a.x * b.y + a.y * b.x + a.z * b.w - a.w * b.z,
          a.x * b.z - a.y * b.w + a.z * b.x + a.w * b.y,
          a.x * b.w + a.y * b.z - a.z * b.y + a.w * b.x};
}

template <typename T>
inline Vec4<T> quat_slerp(Vec4<T> a, Vec4<T> b, T t) {
  T c = dot(a, b);
  if (c < 0) {
    b = T(-1) * b;
    c = -c;
  }
  if (c > T(0.9995)) return normalize(a + t * (b - a));
  const T theta = std::acos(clamp(c, T(-1), T(1)));
  const T s = std::sin(theta);
  return normalize((std::sin((T(1) - t) * theta) / s) * a + (std::sin(t * theta) / s) * b);
}

template <typename T>
struct Aabb {
  Vec3<T> lo{std::numeric_limits<T>::max(), std::numeric_limits<T>::max(),
             std::numeric_limits<T>::max()};
  Vec3<T> hi{std::numeric_limits<T>::lowest(), std::numeric_limits<T>::lowest(),
             std::numeric_limits<T>::lowest()};

  void expand(Vec3<T> p) {
    lo = min(lo, p);
    hi = max(hi, p);
  }
  void expand(const Aabb& b) {
    lo = min(lo, b.lo);
    hi = max(hi, b.hi);
  }
  bool empty() const { return lo.x > hi.x; }
  Vec3<T> center() const { return T(0.5) * (lo + hi); }
  Vec3<T> extent() const { return hi - lo; }
  bool contains(Vec3<T> p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z;
  }
  bool contains(const Aabb& b) const {
    return b.lo.x >= lo.x && b.lo.y >= lo.y && b.lo.z >= lo.z && b.hi.x <= hi.x &&
           b.hi.y <= hi.y && b.hi.z <= hi.z;
  }
  T surface_area() const {
    if (empty()) return T(0);
    Vec3<T> e = extent();
    return T(2) * (e.x * e.y + e.y * e.z + e.z * e.x);
  }
};

using Aabbf = Aabb<float>;

// Inverse ray direction for the slab test. Zero components divide to +-inf;
// ray_aabb's comparisons are written so the 0 * inf = NaN case (origin
// exactly on a slab plane, direction parallel to it) conservatively drops
// that axis' constraint instead of rejecting the box.
template <typename T>
inline Vec3<T> safe_inv_dir(Vec3<T> d) {
  return {T(1) / d.x, T(1) / d.y, T(1) / d.z};
}

// Slab test. Returns true and the clipped [t0, t1] overlap with [t_min, t_max].
// NaN comparisons evaluate false, so a NaN slab bound never tightens the
// interval (tangent rays count as hits).
template <typename T>
inline bool ray_aabb(Vec3<T> o, Vec3<T> inv_d, const Aabb<T>& b, T t_min, T t_max, T& t0,
                     T& t1) {
  t0 = t_min;
  t1 = t_max;
  for (int axis = 0; axis < 3; ++axis) {
    const T ta = (b.lo[axis] - o[axis]) * inv_d[axis];
    const T tb = (b.hi[axis] - o[axis]) * inv_d[axis];
    // NaN = origin exactly on this slab plane with a parallel direction:
    // inclusively inside, the axis constrains nothing
    if (std::isnan(ta) || std::isnan(tb)) continue;
    const T near = ta < tb ? ta : tb;
    const T far = ta < tb ? tb : ta;
    if (near > t0) t0 = near;
    if (far < t1) t1 = far;
  }
  return t0 <= t1;
}

struct TriangleHit {
  float t = 0;
  float u = 0, v = 0;
  bool front = false;  // ray enters through this face (dot(d, n) < 0)
};

// Moller-Trumbore. Boundary-inclusive in barycentrics so shared edges are hit
// by both adjacent triangles; callers deduplicate by a deterministic rule.
template <typename T>
inline bool intersect_triangle(Vec3<T> o, Vec3<T> d, Vec3<T> v0, Vec3<T> v1, Vec3<T> v2,
                               T& t, T& u, T& v, bool& front) {
  const Vec3<T> e1 = v1 - v0;
  const Vec3<T> e2 = v2 - v0;
  const Vec3<T> pvec = cross(d, e2);
  const T det = dot(e1, pvec);
  if (det == T(0)) return false;
  const T inv_det = T(1) / det;
  const Vec3<T> tvec = o - v0;
  u = dot(tvec, pvec) * inv_det;
  if (u < T(0) || u > T(1)) return false;
  const Vec3<T> qvec = cross(tvec, e1);
  v = dot(d, qvec) * inv_det;
  if (v < T(0) || u + v > T(1)) return false;
  t = dot(e2, qvec) * inv_det;
  front = det > T(0);
  return t > T(0);
}

// Similarity transform: world = rotate(q, s * local) + t.
template <typename T>
struct Transform {
  Vec3<T> t{0, 0, 0};
  Vec4<T> q{1, 0, 0, 0};
  T s = 1;

  Vec3<T> point(Vec3<T> p) const { return quat_to_mat3(q) * (s * p) + t; }
  Vec3<T> vector(Vec3<T> v) const { return quat_to_mat3(q) * (s * v); }
  Vec3<T> inv_point(Vec3<T> p) const { return quat_to_mat3(q).tmul(p - t) / s; }
  Vec3<T> inv_vector(Vec3<T> v) const { return quat_to_mat3(q).tmul(v) / s; }
};

using Transformf = Transform<float>;

// ---------------------------------------------------------------------------
// RNG: PCG32 plus stateless hashing for decorrelated per-item streams.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

struct Pcg32 {
  uint64_t state = 0x853c49e6748fea9bull;
  uint64_t inc = 0xda3e39cb94b95bdbull;

  Pcg32() = default;
  explicit Pcg32(uint64_t seed, uint64_t stream = 1) {
    state = 0;
    inc = (stream << 1u) | 1u;
    next();
    state += splitmix64(seed);
    next();
  }

  uint32_t next() {
    uint64_t old = state;
    state = old * 6364136223846793005ull + inc;
    uint32_t xorshifted = uint32_t(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = uint32_t(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((~rot + 1u) & 31u));
  }

  // uniform in [0, 1)
  float uniform() { return float(next() >> 8) * 0x1p-24f; }
  double uniform_double() {
    uint64_t r = (uint64_t(next()) << 32) | next();
    return double(r >> 11) * 0x1p-53;
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }
  uint32_t uniform_u32(uint32_t n) { return uint32_t((uint64_t(next()) * n) >> 32); }

  float normal() {
    float u1 = std::max(uniform(), 1e-12f);
    float u2 = uniform();
    return std::sqrt(-2.0f * std::log(u1)) * std::cos(2.0f * pi<float> * u2);
  }
};

// Stateless uniform in [0,1) from a pair of ids; traversal-order independent.
inline float hash01(uint64_t a, uint64_t b) {
  return float(splitmix64(splitmix64(a) ^ b) >> 40) * 0x1p-24f;
}

}  // namespace gtrace
