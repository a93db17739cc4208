// SPDX-License-Identifier: Apache-2.0
//
// Volumetric particle parameterization: anisotropic kernels (Gaussian,
// generalized Gaussian, 2D surface, cosine-modulated), maximum-response
// sampling along a ray, and degree-3 real spherical-harmonics radiance.
//
// A particle is an ellipsoidal density with covariance factored as
// Sigma = R S^2 R^T (R from the quaternion, S = diag(scale)). All quadratic
// forms go through the whitened frame y = S^-1 R^T (x - mu); Sigma itself is
// never materialized.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gtrace/math.hpp"

namespace gtrace {

inline constexpr float kScaleEps = 1e-8f;
inline constexpr int kShCoeffs = 16;  // per channel, degree <= 3
inline constexpr float kAlphaClamp = 0.999f;

enum class KernelType : uint8_t {
  Gaussian = 0,
  GeneralizedGaussian = 1,  // exp(-Delta^n), degree in Particle::gg_n
  Surface2D = 2,            // flat particle, third scale exactly 0
  CosineModulated = 3,      // Gaussian response modulated by 0.5+0.5*cos(psi.y)
};

template <typename T>
struct ParticleT {
  Vec3<T> mu{0, 0, 0};
  Vec4<T> quat{1, 0, 0, 0};  // w-first, normalized on load/update
  Vec3<T> scale{1, 1, 1};
  T opacity = T(0.5);  // sigma in (0,1); stored as a logit in trainable state
  std::array<T, 48> sh{};  // channel-major: sh[c*16 + l]
  KernelType kernel = KernelType::Gaussian;
  T gg_n = T(2);          // generalized-Gaussian degree
  Vec3<T> psi{0, 0, 0};   // cosine-modulation wave vector

  template <typename U>
  ParticleT<U> cast() const {
    ParticleT<U> p;
    p.mu = Vec3<U>(mu);
    p.quat = Vec4<U>(quat);
    p.scale = Vec3<U>(scale);
    p.opacity = U(opacity);
    for (int i = 0; i < 48; ++i) p.sh[i] = U(sh[i]);
    p.kernel = kernel;
    p.gg_n = U(gg_n);
    p.psi = Vec3<U>(psi);
    return p;
  }
};

using Particle = ParticleT<float>;
using Scene = std::vector<Particle>;

template <typename T>
inline Vec3<T> safe_scale(const ParticleT<T>& p) {
  Vec3<T> s = p.scale;
  s.x = std::max(s.x, T(kScaleEps));
  s.y = std::max(s.y, T(kScaleEps));
  if (p.kernel != KernelType::Surface2D) s.z = std::max(s.z, T(kScaleEps));
  return s;
}

// The ray (o, d) expressed in the particle's whitened frame.
template <typename T>
struct CanonicalRay {
  Vec3<T> o_g;
  Vec3<T> d_g;
};

template <typename T>
inline CanonicalRay<T> canonical_ray(const ParticleT<T>& p, Vec3<T> o, Vec3<T> d) {
  const Mat3<T> R = quat_to_mat3(p.quat);
  const Vec3<T> s = safe_scale(p);
  return {R.tmul(o - p.mu) / s, R.tmul(d) / s};
}

// Sigma^-1 v = R S^-2 R^T v via the factored form, never materializing
// Sigma. Internally double: anisotropic scale ratios amplify rounding beyond
// the op's 1e-6 contract in single precision.
template <typename T>
inline Vec3<T> covariance_inverse_apply(const ParticleT<T>& p, Vec3<T> v) {
  const Mat3<double> R = quat_to_mat3(Vec4<double>(p.quat));
  const Vec3<T> sc = safe_scale(p);
  const Vec3<double> s{double(sc.x), double(sc.y), double(sc.z)};
  Vec3<double> u = R.tmul(Vec3<double>(v));
  u = u / (s * s);
  const Vec3<double> r = R * u;
  return {T(r.x), T(r.y), T(r.z)};
}

// Distance along the ray of the particle's maximum response,
// tau_max = -o_g.d_g / (d_g.d_g). May be negative; callers clamp to the
// active segment. Valid for Gaussian and generalized-Gaussian kernels
// (monotone transforms of the same quadratic share the argmax).
template <typename T>
inline T max_response_t(const ParticleT<T>& p, Vec3<T> o, Vec3<T> d, bool* degenerate = nullptr) {
  const CanonicalRay<T> cr = canonical_ray(p, o, d);
  const T dd = dot(cr.d_g, cr.d_g);
  if (dd < T(1e-20)) {
    if (degenerate) *degenerate = true;
    return T(0);
  }
  if (degenerate) *degenerate = false;
  return -dot(cr.o_g, cr.d_g) / dd;
}

// Whitened squared distance Delta = (x-mu)^T Sigma^-1 (x-mu). For Surface2D
// only the two in-plane components contribute; the caller guarantees x lies
// on the particle plane.
template <typename T>
inline T whitened_delta(const ParticleT<T>& p, Vec3<T> x, Vec3<T>* y_out = nullptr) {
  const Mat3<T> R = quat_to_mat3(p.quat);
  const Vec3<T> s = safe_scale(p);
  const Vec3<T> a = R.tmul(x - p.mu);
  Vec3<T> y{a.x / s.x, a.y / s.y, 0};
  if (p.kernel != KernelType::Surface2D) y.z = a.z / s.z;
  if (y_out) *y_out = y;
  return dot(y, y);
}

// rho_hat(x) = sigma * kernel(x) in [0, sigma].
template <typename T>
inline T kernel_response(const ParticleT<T>& p, Vec3<T> x) {
  Vec3<T> y;
  const T delta = whitened_delta(p, x, &y);
  switch (p.kernel) {
    case KernelType::GeneralizedGaussian:
      return p.opacity * std::exp(-std::pow(delta, p.gg_n));
    case KernelType::CosineModulated:
      return p.opacity * std::exp(-delta) * (T(0.5) + T(0.5) * std::cos(dot(p.psi, y)));
    default:
      return p.opacity * std::exp(-delta);
  }
}

// ---------------------------------------------------------------------------
// Real spherical harmonics, hard-coded through degree 3, in the coefficient
// layout used by 3DGS checkpoints.

namespace sh {
// clang-format off
template <typename T> constexpr T C0 = T(0.28209479177387814);
template <typename T> constexpr T C1 = T(0.4886025119029199);
template <typename T> constexpr T C2[5] = {T(1.0925484305920792), T(-1.0925484305920792), T(0.31539156525252005), T(-1.0925484305920792), T(0.5462742152960396)};
template <typename T> constexpr T C3[7] = {T(-0.5900435899266435), T(2.890611442640554), T(-0.4570457994644658), T(0.3731763325901154), T(-0.4570457994644658), T(1.445305721320277), T(-0.5900435899266435)};
// clang-format on

// Fills basis[0..15] for unit direction d; entries above the active degree
// are set to zero.
template <typename T>
inline void basis(Vec3<T> d, int active_degree, T* out) {
  const T x = d.x, y = d.y, z = d.z;
  for (int i = 0; i < kShCoeffs; ++i) out[i] = T(0);
  out[0] = C0<T>;
  if (active_degree < 1) return;
  out[1] = -C1<T> * y;
  out[2] = C1<T> * z;
  out[3] = -C1<T> * x;
  if (active_degree < 2) return;
  const T xx = x * x, yy = y * y, zz = z * z;
  const T xy = x * y, yz = y * z, xz = x * z;
  out[4] = C2<T>[0] * xy;
  out[5] = C2<T>[1] * yz;
  out[6] = C2<T>[2] * (T(2) * zz - xx - yy);
  out[7] = C2<T>[3] * xz;
  out[8] = C2<T>[4] * (xx - yy);
  if (active_degree < 3) return;
  out[9] = C3<T>[0] * y * (T(3) * xx - yy);
  out[10] = C3<T>[1] * xy * z;
  out[11] = C3<T>[2] * y * (T(4) * zz - xx - yy);
  out[12] = C3<T>[3] * z * (T(2) * zz - T(3) * xx - T(3) * yy);
  out[13] = C3<T>[4] * x * (T(4) * zz - xx - yy);
  out[14] = C3<T>[5] * z * (xx - yy);
  out[15] = C3<T>[6] * x * (xx - T(3) * yy);
}
}  // namespace sh

// View-dependent radiance c(d) = sigmoid(sum_l beta_l Y_l(d)) per channel.
// d is the cast ray's direction (normalized internally if needed).
template <typename T>
inline Vec3<T> eval_sh_radiance(const std::array<T, 48>& coeffs, Vec3<T> d, int active_degree) {
  const T len2 = dot(d, d);
  if (std::abs(len2 - T(1)) > T(2e-6)) d = normalize(d);
  T b[kShCoeffs];
  sh::basis(d, active_degree, b);
  Vec3<T> c;
  for (int ch = 0; ch < 3; ++ch) {
    T z = T(0);
    for (int i = 0; i < kShCoeffs; ++i) z += coeffs[ch * kShCoeffs + i] * b[i];
    c[ch] = sigmoid(z);
  }
  return c;
}

// One blending sample of a particle along a ray: the response is taken at the
// maximum-response distance (Eq.-8 style), clamped forward to the proxy entry
// so integration never steps behind the hit that scheduled it. Surface
// particles sample exactly at the plane hit. The sh direction is passed
// separately: instanced geometry marches in local space while radiance always
// uses the world ray direction.
template <typename T>
struct HitSample {
  T tau = 0;
  T alpha_raw = 0;  // rho_hat before the 0.999 clamp
  T alpha = 0;
  Vec3<T> color{0, 0, 0};
  bool blended = false;
  bool finite = true;
};

template <typename T>
inline HitSample<T> particle_ray_sample(const ParticleT<T>& p, Vec3<T> o, Vec3<T> d,
                                        Vec3<T> sh_dir, T entry_t, int sh_degree, T alpha_min) {
  HitSample<T> h;
  if (p.kernel == KernelType::Surface2D) {
    h.tau = entry_t;
  } else {
    h.tau = std::max(max_response_t(p, o, d), entry_t);
  }
  h.alpha_raw = kernel_response(p, o + h.tau * d);
  if (!std::isfinite(h.alpha_raw)) {
    h.finite = false;
    return h;
  }
  h.alpha = std::min(h.alpha_raw, T(kAlphaClamp));
  if (h.alpha > alpha_min) {
    h.color = eval_sh_radiance(p.sh, sh_dir, sh_degree);
    if (!is_finite(h.color)) {
      h.finite = false;
      return h;
    }
    h.blended = true;
  }
  return h;
}

template <typename T>
inline bool particle_finite(const ParticleT<T>& p) {
  if (!is_finite(p.mu) || !is_finite(p.scale) || !is_finite(p.psi)) return false;
  if (!std::isfinite(p.quat.x) || !std::isfinite(p.quat.y) || !std::isfinite(p.quat.z) ||
      !std::isfinite(p.quat.w))
    return false;
  if (!std::isfinite(p.opacity)) return false;
  for (T v : p.sh)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace gtrace
