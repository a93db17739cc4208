// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation of the forward renderer with respect to all
// particle parameters. The backward pass re-walks the same rays with the same
// scheduling, so the blended sequence replays exactly; the transmittance
// recurrence is differentiated with a running radiance-behind accumulator.
// Memory stays O(k) per ray: nothing is stored between the two walks.

#pragma once

#include <array>
#include <vector>

#include "gtrace/camera.hpp"
#include "gtrace/parallel.hpp"
#include "gtrace/tracer.hpp"

namespace gtrace {

struct GradientBuffers {
  std::vector<Vec3f> d_mu;
  std::vector<Vec4f> d_quat;  // tangent-projected at the normalized quaternion
  std::vector<Vec3f> d_scale;
  std::vector<float> d_sigma_logit;
  std::vector<std::array<float, 48>> d_sh;
  std::vector<uint32_t> hit_count;           // blends per particle
  std::vector<float> weight_contribution;    // sum of T*alpha per particle

  explicit GradientBuffers(size_t n = 0) { resize(n); }

  void resize(size_t n) {
    d_mu.assign(n, Vec3f{0, 0, 0});
    d_quat.assign(n, Vec4f{0, 0, 0, 0});
    d_scale.assign(n, Vec3f{0, 0, 0});
    d_sigma_logit.assign(n, 0.0f);
    d_sh.assign(n, std::array<float, 48>{});
    hit_count.assign(n, 0);
    weight_contribution.assign(n, 0.0f);
  }
  void zero() { resize(d_mu.size()); }
  size_t size() const { return d_mu.size(); }

  void add(const GradientBuffers& o) {
    for (size_t i = 0; i < size(); ++i) {
      d_mu[i] += o.d_mu[i];
      d_quat[i] += o.d_quat[i];
      d_scale[i] += o.d_scale[i];
      d_sigma_logit[i] += o.d_sigma_logit[i];
      for (int j = 0; j < 48; ++j) d_sh[i][j] += o.d_sh[i][j];
      hit_count[i] += o.hit_count[i];
      weight_contribution[i] += o.weight_contribution[i];
    }
  }

  bool finite() const {
    for (size_t i = 0; i < size(); ++i) {
      if (!is_finite(d_mu[i]) || !is_finite(d_scale[i]) || !std::isfinite(d_sigma_logit[i]))
        return false;
      if (!std::isfinite(d_quat[i].x + d_quat[i].y + d_quat[i].z + d_quat[i].w)) return false;
      for (float v : d_sh[i])
        if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

namespace detail {

// dL/d(quat-hat) from dL/dR, for the rotation matrix of quat_to_mat3.
inline Vec4f rotation_backward(const Mat3f& G, Vec4f qhat) {
  const float r = qhat.x, x = qhat.y, y = qhat.z, z = qhat.w;
  const auto& g = G.m;
  Vec4f d;
  d.x = 2.0f * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] +
                x * g[2][1]);
  d.y = 2.0f * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0f * x * g[1][1] - r * g[1][2] +
                z * g[2][0] + r * g[2][1] - 2.0f * x * g[2][2]);
  d.z = 2.0f * (-2.0f * y * g[0][0] + x * g[0][1] + r * g[0][2] + x * g[1][0] + z * g[1][2] -
                r * g[2][0] + z * g[2][1] - 2.0f * y * g[2][2]);
  d.w = 2.0f * (-2.0f * z * g[0][0] - r * g[0][1] + x * g[0][2] + r * g[1][0] -
                2.0f * z * g[1][1] + y * g[1][2] + x * g[2][0] + y * g[2][1]);
  return d;
}

inline Vec4f tangent_project(Vec4f g, Vec4f qhat) { return g - dot(g, qhat) * qhat; }

// Chain rule for one blended hit. d_alpha_scalar is dL/d(alpha after clamp);
// the sample point x is treated as fixed (at tau_max the response derivative
// along the ray vanishes, so the fixed-point partial equals the full
// derivative through the sample location).
inline void accumulate_hit_gradients(const Particle& p, Vec3f x, Vec3f sh_dir, float alpha_raw,
                                     float d_alpha, Vec3f d_color, int sh_degree, uint32_t pid,
                                     GradientBuffers& g) {
  // color chain: c = sigmoid(z), z = sum beta * Y(d)
  float basis[kShCoeffs];
  sh::basis(sh_dir, sh_degree, basis);
  for (int ch = 0; ch < 3; ++ch) {
    float z = 0;
    for (int i = 0; i < kShCoeffs; ++i) z += p.sh[ch * kShCoeffs + i] * basis[i];
    const float c = sigmoid(z);
    const float dz = d_color[ch] * c * (1.0f - c);
    for (int i = 0; i < kShCoeffs; ++i) g.d_sh[pid][ch * kShCoeffs + i] += dz * basis[i];
  }

  if (alpha_raw >= kAlphaClamp) d_alpha = 0.0f;  // subgradient 0 past the clamp

  // opacity chain: rho_hat = sigma * shape, sigma = sigmoid(sigma_logit)
  const float sigma = p.opacity;
  const float shape = alpha_raw / sigma;
  g.d_sigma_logit[pid] += d_alpha * shape * sigma * (1.0f - sigma);
  if (d_alpha == 0.0f) return;

  // spatial chain through the whitened frame y = S^-1 R^T (x - mu)
  const Mat3f R = quat_to_mat3(p.quat);
  const Vec3f s = safe_scale(p);
  const Vec3f w = x - p.mu;
  const Vec3f a = R.tmul(w);
  Vec3f y{a.x / s.x, a.y / s.y, 0};
  const bool surface = p.kernel == KernelType::Surface2D;
  if (!surface) y.z = a.z / s.z;
  const float delta = dot(y, y);

  float d_rho_d_delta;
  Vec3f u_extra{0, 0, 0};
  switch (p.kernel) {
    case KernelType::GeneralizedGaussian:
      d_rho_d_delta = -p.gg_n * std::pow(std::max(delta, 1e-20f), p.gg_n - 1.0f) * alpha_raw;
      break;
    case KernelType::CosineModulated: {
      const float base = sigma * std::exp(-delta);
      const float phase = dot(p.psi, y);
      d_rho_d_delta = -alpha_raw;  // alpha_raw already carries the cosine factor
      u_extra = (d_alpha * base * -0.5f * std::sin(phase)) * p.psi;
      break;
    }
    default:
      d_rho_d_delta = -alpha_raw;
      break;
  }

  Vec3f u = (d_alpha * d_rho_d_delta * 2.0f) * y + u_extra;
  if (surface) u.z = 0;

  const Vec3f v = u / s;  // dL/da
  g.d_mu[pid] += -(R * v);
  Vec3f ds{-u.x * y.x / s.x, -u.y * y.y / s.y, surface ? 0.0f : -u.z * y.z / s.z};
  g.d_scale[pid] += ds;

  Mat3f G;  // dL/dR = w v^T
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) G.m[i][j] = w[i] * v[j];
  const Vec4f qhat = normalize(p.quat);
  g.d_quat[pid] += tangent_project(rotation_backward(G, qhat), qhat);
}

}  // namespace detail

// Reverse-mode pass for one ray. Walks the identical forward schedule twice:
// once for the total radiance, once accumulating parameter gradients.
inline void backward_ray(const SceneView& view, Vec3f o, Vec3f d, const RenderSettings& s,
                         Vec3f dL_dradiance, GradientBuffers& grads) {
  Vec3f L_total{0, 0, 0};
  int forward_blends = 0;
  walk_ray(view, o, d, std::numeric_limits<float>::max(), s,
           [&](uint32_t, float, const HitSample<float>& h, float T) {
             L_total += (T * h.alpha) * h.color;
             forward_blends++;
           });

  Vec3f L_sofar{0, 0, 0};
  int replay_blends = 0;
  walk_ray(view, o, d, std::numeric_limits<float>::max(), s,
           [&](uint32_t pid, float t, const HitSample<float>& h, float T) {
             replay_blends++;
             L_sofar += (T * h.alpha) * h.color;
             const Vec3f suffix = L_total - L_sofar;
             const Vec3f d_color = (T * h.alpha) * dL_dradiance;
             const float d_alpha =
                 dot(dL_dradiance, T * h.color - suffix / (1.0f - h.alpha));
             detail::accumulate_hit_gradients((*view.scene)[pid], o + h.tau * d, d, h.alpha_raw,
                                              d_alpha, d_color, s.sh_degree, pid, grads);
             grads.hit_count[pid] += 1;
             grads.weight_contribution[pid] += T * h.alpha;
           });
  assert(replay_blends == forward_blends && "forward/backward hit sequences diverged");
  (void)forward_blends;
  (void)replay_blends;
}

// Batch wrapper: sums backward_ray over all pixels of a camera render.
// Parallel accumulation uses per-worker buffers reduced in worker order;
// threads == 1 is the deterministic sequential mode.
template <typename RayProvider>
void backward_rays(const SceneView& view, size_t n_rays, const RenderSettings& s,
                   RayProvider&& provider, GradientBuffers& grads) {
  const int threads = std::max(1, s.threads);
  if (threads == 1) {
    for (size_t i = 0; i < n_rays; ++i) {
      Vec3f o, d, dL;
      if (provider(i, o, d, dL)) backward_ray(view, o, d, s, dL, grads);
    }
    return;
  }
  std::vector<GradientBuffers> partial(size_t(threads), GradientBuffers(grads.size()));
  parallel_for_workers(n_rays, threads, [&](int worker, size_t i) {
    Vec3f o, d, dL;
    if (provider(i, o, d, dL)) backward_ray(view, o, d, s, dL, partial[size_t(worker)]);
  });
  for (const auto& p : partial) grads.add(p);
}

// Sums backward_ray over every pixel of a camera view given the per-pixel
// loss gradient image. Pixel rays replay the forward render's sample 0.
inline GradientBuffers backward_image(const SceneView& view, const CameraModel& cam,
                                      const RenderSettings& s, const Image& loss_grad) {
  GradientBuffers grads(view.scene->size());
  backward_rays(
      view, loss_grad.pixel_count(), s,
      [&](size_t i, Vec3f& o, Vec3f& d, Vec3f& dL) {
        dL = loss_grad.pixels[i];
        if (dL.x == 0 && dL.y == 0 && dL.z == 0) return false;
        Pcg32 rng(s.seed, i);
        const CameraRay ray = generate_pixel_ray(cam, int(i % size_t(cam.width)),
                                                 int(i / size_t(cam.width)), 0, rng);
        if (!ray.valid) return false;
        o = ray.o;
        d = ray.d;
        return true;
      },
      grads);
  return grads;
}

// Backward over an incoherent ray bundle with per-ray loss gradients.
inline void backward_bundle(const SceneView& view, const RayBundle& bundle,
                            const RenderSettings& s, const std::vector<Vec3f>& dL_per_ray,
                            GradientBuffers& grads) {
  backward_rays(
      view, bundle.size(), s,
      [&](size_t i, Vec3f& o, Vec3f& d, Vec3f& dL) {
        dL = dL_per_ray[i];
        if (dL.x == 0 && dL.y == 0 && dL.z == 0) return false;
        o = bundle.origins[i];
        d = bundle.directions[i];
        return true;
      },
      grads);
}

}  // namespace gtrace
