// SPDX-License-Identifier: Apache-2.0
//
// Scene fitting: Adam with per-group learning rates, L1+SSIM image loss,
// incoherent-ray L1 phase, world-space-gradient densification (clone/split),
// opacity and visibility pruning, opacity resets, progressive SH unlocking,
// and per-iteration BVH maintenance.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "gtrace/grad.hpp"
#include "gtrace/render.hpp"

#include "json.hpp"

namespace gtrace {

struct TrainConfig {
  int total_iters = 30000;

  float lr_rotation = 1e-3f;
  float lr_scale = 5e-3f;
  float lr_albedo = 2.5e-3f;
  float lr_sh_rest = 2.5e-3f / 20.0f;
  float lr_opacity = 0.05f;  // 0.09 in the fast configuration
  float lr_position = 1.6e-4f;       // x scene_extent, exponentially decayed
  float lr_position_final = 1.6e-6f; // x scene_extent at total_iters

  int densify_from = 500;
  int densify_until = 15000;
  int densify_interval = 100;
  float densify_grad_threshold = 2e-4f;  // on distance-scaled world gradients
  float split_scale_threshold = 0.01f;   // x scene_extent
  float split_scale_shrink = 1.6f;
  float prune_opacity = 0.01f;
  int opacity_reset_interval = 3000;  // 0 disables resets
  int sh_degree_interval = 1000;
  size_t max_particles = 3000000;
  size_t prune_target = 2700000;

  float lambda_ssim = 0.2f;
  int incoherent_after = 15000;  // switch to stochastic rays past this iteration
  size_t incoherent_batch = size_t(1) << 19;
  float t_min_train = 0.001f;

  int k = 16;
  float alpha_min = 0.01f;
  int sh_degree_max = 3;
  KernelType kernel = KernelType::Gaussian;
  float gg_n = 2.0f;
  ProxyKind proxy = ProxyKind::IcosahedronClamped;
  uint64_t seed = 1;
  int threads = 1;
  int holdout_every = 0;  // every Nth view held out of training

  int active_sh_degree(int64_t iter) const {
    return std::min<int64_t>(sh_degree_max, iter / std::max(1, sh_degree_interval));
  }
  // Parameter-group learning-rate mapping, introspectable for tests.
  float group_lr(const std::string& group, int64_t iter, float extent) const {
    if (group == "position") return position_lr(iter, extent);
    if (group == "rotation") return lr_rotation;
    if (group == "scale") return lr_scale;
    if (group == "albedo") return lr_albedo;
    if (group == "sh_rest") return lr_sh_rest;
    if (group == "opacity") return lr_opacity;
    throw std::invalid_argument("unknown parameter group '" + group + "'");
  }
  float position_lr(int64_t iter, float extent) const {
    const float t = clamp(float(iter) / float(std::max(1, total_iters)), 0.0f, 1.0f);
    return lr_position * extent * std::pow(lr_position_final / lr_position, t);
  }
  RenderSettings render_settings(int64_t iter) const {
    RenderSettings s;
    s.k = k;
    s.alpha_min = alpha_min;
    s.t_min_transmittance = t_min_train;
    s.sh_degree = active_sh_degree(iter);
    s.seed = seed;
    s.threads = threads;
    return s;
  }
};

// Adam moment arrays for one parameter group.
struct AdamGroup {
  std::vector<float> m, v;
  float eps = 1e-8f;

  void resize(size_t n) {
    m.assign(n, 0.0f);
    v.assign(n, 0.0f);
  }
  void step(size_t i, float grad, float lr, float bias1, float bias2, float& param) {
    m[i] = 0.9f * m[i] + 0.1f * grad;
    v[i] = 0.999f * v[i] + 0.001f * grad * grad;
    const float mhat = m[i] / bias1;
    const float vhat = v[i] / bias2;
    param -= lr * mhat / (std::sqrt(vhat) + eps);
  }
};

struct TrainState {
  TrainConfig cfg;

  // raw (pre-activation) parameters
  std::vector<Vec3f> mu;
  std::vector<Vec4f> quat_raw;      // unnormalized
  std::vector<Vec3f> log_scale;
  std::vector<float> sigma_logit;
  std::vector<std::array<float, 48>> sh;

  AdamGroup adam_mu, adam_quat, adam_scale, adam_opacity, adam_sh;
  int64_t iter = 0;
  int64_t adam_steps = 0;

  // densify / visibility accumulators, reset after each densify step
  std::vector<float> grad_acc_norm;
  std::vector<Vec3f> grad_acc_vec;
  std::vector<uint32_t> obs_count;
  std::vector<float> weight_acc;

  float scene_extent = 1.0f;
  BoundScene bound;
  Pcg32 rng{1, 7};

  size_t size() const { return mu.size(); }

  void resize_aux() {
    const size_t n = size();
    adam_mu.resize(3 * n);
    adam_quat.resize(4 * n);
    adam_scale.resize(3 * n);
    adam_opacity.resize(n);
    adam_sh.resize(48 * n);
    adam_opacity.eps = 1e-15f;
    adam_scale.eps = 1e-15f;
    grad_acc_norm.assign(n, 0.0f);
    grad_acc_vec.assign(n, Vec3f{0, 0, 0});
    obs_count.assign(n, 0);
    weight_acc.assign(n, 0.0f);
  }

  void reset_accumulators() {
    std::fill(grad_acc_norm.begin(), grad_acc_norm.end(), 0.0f);
    std::fill(grad_acc_vec.begin(), grad_acc_vec.end(), Vec3f{0, 0, 0});
    std::fill(obs_count.begin(), obs_count.end(), 0u);
    std::fill(weight_acc.begin(), weight_acc.end(), 0.0f);
  }

  // Rebuilds the renderable particle array from the raw parameters.
  void sync_scene(bool topology_changed) {
    Scene& scene = bound.scene;
    scene.resize(size());
    for (size_t i = 0; i < size(); ++i) {
      Particle& p = scene[i];
      p.mu = mu[i];
      p.quat = normalize(quat_raw[i]);
      p.scale = {std::exp(log_scale[i].x), std::exp(log_scale[i].y), std::exp(log_scale[i].z)};
      p.opacity = sigmoid(sigma_logit[i]);
      p.sh = sh[i];
      p.kernel = cfg.kernel;
      p.gg_n = cfg.gg_n;
      if (p.kernel == KernelType::Surface2D) p.scale.z = 0.0f;
    }
    if (topology_changed)
      bound.rebuild(cfg.proxy, cfg.alpha_min);
    else
      bound.update(cfg.alpha_min);
  }
};

// ---------------------------------------------------------------------------
// Differentiable SSIM (11x11 Gaussian window, C1=0.01^2, C2=0.03^2, zero-pad)

namespace ssim_detail {

inline const std::array<float, 11>& window() {
  static const std::array<float, 11> w = [] {
    std::array<float, 11> g{};
    float sum = 0;
    for (int i = 0; i < 11; ++i) {
      const float x = float(i - 5);
      g[size_t(i)] = std::exp(-x * x / (2.0f * 1.5f * 1.5f));
      sum += g[size_t(i)];
    }
    for (auto& v : g) v /= sum;
    return g;
  }();
  return w;
}

// Separable same-size convolution with zero padding, per channel.
inline void convolve(const std::vector<float>& src, int w, int h, std::vector<float>& dst,
                     std::vector<float>& tmp) {
  const auto& g = window();
  tmp.resize(src.size());
  dst.resize(src.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0;
      for (int k = -5; k <= 5; ++k) {
        const int xx = x + k;
        if (xx >= 0 && xx < w) acc += g[size_t(k + 5)] * src[size_t(y) * size_t(w) + size_t(xx)];
      }
      tmp[size_t(y) * size_t(w) + size_t(x)] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float acc = 0;
      for (int k = -5; k <= 5; ++k) {
        const int yy = y + k;
        if (yy >= 0 && yy < h) acc += g[size_t(k + 5)] * tmp[size_t(yy) * size_t(w) + size_t(x)];
      }
      dst[size_t(y) * size_t(w) + size_t(x)] = acc;
    }
}

}  // namespace ssim_detail

// Mean SSIM over channels; optionally fills d(mean SSIM)/d(img a).
inline double ssim(const Image& a, const Image& b, Image* d_ssim_da = nullptr) {
  constexpr float C1 = 0.01f * 0.01f;
  constexpr float C2 = 0.03f * 0.03f;
  const int w = a.width, h = a.height;
  const size_t n = a.pixel_count();
  if (d_ssim_da) *d_ssim_da = Image(w, h);
  double total = 0;
  std::vector<float> xa(n), xb(n), mua, mub, sa2, sb2, sab, tmp, prod(n);
  std::vector<float> cmu(n), c2(n), cab(n), gmu, gc2, gcab;
  for (int ch = 0; ch < 3; ++ch) {
    for (size_t i = 0; i < n; ++i) {
      xa[i] = a.pixels[i][ch];
      xb[i] = b.pixels[i][ch];
    }
    ssim_detail::convolve(xa, w, h, mua, tmp);
    ssim_detail::convolve(xb, w, h, mub, tmp);
    for (size_t i = 0; i < n; ++i) prod[i] = xa[i] * xa[i];
    ssim_detail::convolve(prod, w, h, sa2, tmp);
    for (size_t i = 0; i < n; ++i) prod[i] = xb[i] * xb[i];
    ssim_detail::convolve(prod, w, h, sb2, tmp);
    for (size_t i = 0; i < n; ++i) prod[i] = xa[i] * xb[i];
    ssim_detail::convolve(prod, w, h, sab, tmp);

    for (size_t i = 0; i < n; ++i) {
      const float ma = mua[i], mb = mub[i];
      const float va = sa2[i] - ma * ma;
      const float vb = sb2[i] - mb * mb;
      const float cov = sab[i] - ma * mb;
      const float A1 = 2.0f * ma * mb + C1, A2 = 2.0f * cov + C2;
      const float B1 = ma * ma + mb * mb + C1, B2 = va + vb + C2;
      const float S = (A1 * A2) / (B1 * B2);
      total += S;
      if (d_ssim_da) {
        // partials w.r.t. the convolution outputs (mu_a, G*a^2, G*ab)
        const float inv = 1.0f / (B1 * B2);
        const float dS_dmu = (2.0f * mb * A2 + A1 * (-2.0f * mb)) * inv -
                             S * (2.0f * ma / B1 - 2.0f * ma / B2);
        const float dS_dsa2 = -S / B2;
        const float dS_dsab = 2.0f * A1 * inv;
        cmu[i] = dS_dmu;
        c2[i] = dS_dsa2;
        cab[i] = dS_dsab;
      }
    }
    if (d_ssim_da) {
      ssim_detail::convolve(cmu, w, h, gmu, tmp);
      ssim_detail::convolve(c2, w, h, gc2, tmp);
      ssim_detail::convolve(cab, w, h, gcab, tmp);
      const float scale = 1.0f / float(n * 3);
      for (size_t i = 0; i < n; ++i)
        d_ssim_da->pixels[i][ch] =
            scale * (gmu[i] + 2.0f * xa[i] * gc2[i] + xb[i] * gcab[i]);
    }
  }
  return total / double(n * 3);
}

// ---------------------------------------------------------------------------
// Initialization

// Scene extent: radius of the camera-position bounding sphere x 1.1.
inline float compute_scene_extent(const std::vector<CameraModel>& cameras) {
  if (cameras.empty()) return 1.0f;
  Vec3f center{0, 0, 0};
  for (const auto& c : cameras) center += c.pose0.t;
  center = center / float(cameras.size());
  float radius = 0;
  for (const auto& c : cameras) radius = std::max(radius, length(c.pose0.t - center));
  return std::max(radius * 1.1f, 1e-3f);
}

inline TrainState init_from_points(const std::vector<Vec3f>& points,
                                   const std::vector<Vec3f>& colors,
                                   const std::vector<CameraModel>& cameras,
                                   const TrainConfig& cfg = {}) {
  if (points.empty()) throw std::invalid_argument("init_from_points: need at least one point");
  TrainState st;
  st.cfg = cfg;
  st.scene_extent = compute_scene_extent(cameras);
  st.rng = Pcg32(cfg.seed, 7);
  const size_t n = points.size();
  st.mu = points;
  st.quat_raw.assign(n, Vec4f{1, 0, 0, 0});
  st.sigma_logit.assign(n, logit(0.1f));
  st.log_scale.resize(n);
  st.sh.assign(n, std::array<float, 48>{});

  // isotropic scale from the mean distance to the 3 nearest neighbors
  const float floor_dist = 1e-4f * st.scene_extent;
  for (size_t i = 0; i < n; ++i) {
    float best[3] = {1e30f, 1e30f, 1e30f};
    for (size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const float d2 = length_sq(points[i] - points[j]);
      if (d2 < best[2]) {
        best[2] = d2;
        if (best[2] < best[1]) std::swap(best[1], best[2]);
        if (best[1] < best[0]) std::swap(best[0], best[1]);
      }
    }
    float mean = 0;
    int cnt = 0;
    for (float b : best)
      if (b < 1e29f) {
        mean += std::sqrt(b);
        cnt++;
      }
    mean = cnt ? mean / float(cnt) : floor_dist;
    mean = std::max(mean, floor_dist);
    st.log_scale[i] = Vec3f{std::log(mean), std::log(mean), std::log(mean)};
  }
  for (size_t i = 0; i < n; ++i) {
    const Vec3f c = i < colors.size() ? colors[i] : Vec3f{0.5f, 0.5f, 0.5f};
    for (int ch = 0; ch < 3; ++ch)
      st.sh[i][size_t(ch) * kShCoeffs] = logit(clamp(c[ch], 0.01f, 0.99f)) / sh::C0<float>;
  }
  st.resize_aux();
  st.sync_scene(true);
  return st;
}

// ---------------------------------------------------------------------------
// Optimizer steps

struct StepMetrics {
  int64_t iter = 0;
  double loss = 0;
  double psnr = 0;
  size_t particles = 0;
  double mean_hits = 0;
  bool skipped = false;
  bool topology_changed = false;
};

namespace detail {

inline void adam_apply(TrainState& st, const GradientBuffers& g) {
  st.adam_steps++;
  const float b1 = 1.0f - std::pow(0.9f, float(st.adam_steps));
  const float b2 = 1.0f - std::pow(0.999f, float(st.adam_steps));
  const float lr_pos = st.cfg.position_lr(st.iter, st.scene_extent);
  const size_t n = st.size();
  for (size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c)
      st.adam_mu.step(3 * i + size_t(c), g.d_mu[i][c], lr_pos, b1, b2, st.mu[i][c]);
    const float qnorm = std::max(length(st.quat_raw[i]), 1e-12f);
    for (int c = 0; c < 4; ++c)
      st.adam_quat.step(4 * i + size_t(c), g.d_quat[i][c] / qnorm, st.cfg.lr_rotation, b1, b2,
                        st.quat_raw[i][c]);
    for (int c = 0; c < 3; ++c) {
      const float ds = g.d_scale[i][c] * std::exp(st.log_scale[i][c]);  // chain to log domain
      st.adam_scale.step(3 * i + size_t(c), ds, st.cfg.lr_scale, b1, b2, st.log_scale[i][c]);
    }
    st.adam_opacity.step(i, g.d_sigma_logit[i], st.cfg.lr_opacity, b1, b2, st.sigma_logit[i]);
    for (int c = 0; c < 48; ++c) {
      const bool dc = (c % kShCoeffs) == 0;
      st.adam_sh.step(48 * i + size_t(c), g.d_sh[i][size_t(c)],
                      dc ? st.cfg.lr_albedo : st.cfg.lr_sh_rest, b1, b2, st.sh[i][size_t(c)]);
    }
  }
}

inline void accumulate_densify_stats(TrainState& st, const GradientBuffers& g,
                                     Vec3f camera_position) {
  for (size_t i = 0; i < st.size(); ++i) {
    if (g.hit_count[i] == 0) continue;
    const float dist = length(st.mu[i] - camera_position);
    st.grad_acc_norm[i] += length(g.d_mu[i]) * 0.5f * dist;
    st.grad_acc_vec[i] += g.d_mu[i];
    st.obs_count[i] += 1;
    st.weight_acc[i] += g.weight_contribution[i];
  }
}

}  // namespace detail

// One full-image training step: forward render, L1+SSIM loss, backward,
// Adam update, densify-statistic accumulation, BVH refit.
inline StepMetrics train_step_image(TrainState& st, const TrainingView& view) {
  StepMetrics m;
  m.iter = st.iter;
  m.particles = st.size();
  const RenderSettings s = st.cfg.render_settings(st.iter);

  RenderStats rs;
  const Image render = render_image(st.bound.view(), view.camera, s, &rs);
  m.mean_hits = rs.mean_hits();

  const size_t n = render.pixel_count();
  const float inv_n = 1.0f / float(n * 3);
  double l1 = 0;
  Image dloss(render.width, render.height);
  for (size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      const float diff = render.pixels[i][c] - view.image.pixels[i][c];
      l1 += std::abs(diff);
      dloss.pixels[i][c] = (diff > 0 ? 1.0f : (diff < 0 ? -1.0f : 0.0f)) * inv_n *
                           (1.0f - st.cfg.lambda_ssim);
    }
  l1 *= double(inv_n);
  double loss = (1.0 - st.cfg.lambda_ssim) * l1;
  if (st.cfg.lambda_ssim > 0) {
    Image dssim;
    const double ssim_val = ssim(render, view.image, &dssim);
    loss += st.cfg.lambda_ssim * (1.0 - ssim_val);
    for (size_t i = 0; i < n; ++i)
      dloss.pixels[i] += (-st.cfg.lambda_ssim) * dssim.pixels[i];
  }
  m.loss = loss;
  m.psnr = psnr_srgb(render, view.image);

  if (!std::isfinite(loss)) {
    m.skipped = true;  // step skipped, state untouched
    st.iter++;
    return m;
  }
  GradientBuffers grads = backward_image(st.bound.view(), view.camera, s, dloss);
  if (!grads.finite()) {
    m.skipped = true;
    st.iter++;
    return m;
  }
  detail::adam_apply(st, grads);
  detail::accumulate_densify_stats(st, grads, view.camera.pose0.t);
  st.iter++;
  st.sync_scene(false);
  return m;
}

// One incoherent-ray step: stochastic pixel batch, L1 loss only.
inline StepMetrics train_step_incoherent(TrainState& st, const std::vector<TrainingView>& views,
                                         size_t batch_size, Pcg32& batch_rng) {
  StepMetrics m;
  m.iter = st.iter;
  m.particles = st.size();
  const RenderSettings s = st.cfg.render_settings(st.iter);

  const RayBundle bundle = sample_incoherent_batch(views, batch_size, batch_rng);
  const size_t n = bundle.size();
  std::vector<Vec3f> rendered(n);
  std::vector<int> hits(n, 0);
  parallel_for(n, s.threads, [&](size_t i) {
    const RayResult r = trace_ray(st.bound.view(), bundle.origins[i], bundle.directions[i], s);
    rendered[i] = r.radiance;
    hits[i] = r.hit_count;
  });

  double l1 = 0;
  uint64_t total_hits = 0;
  std::vector<Vec3f> dL(n);
  const float inv_n = 1.0f / float(std::max<size_t>(1, n) * 3);
  for (size_t i = 0; i < n; ++i) {
    total_hits += uint64_t(hits[i]);
    for (int c = 0; c < 3; ++c) {
      const float diff = rendered[i][c] - bundle.targets[i][c];
      l1 += std::abs(diff);
      dL[i][c] = (diff > 0 ? 1.0f : (diff < 0 ? -1.0f : 0.0f)) * inv_n;
    }
  }
  m.loss = l1 * double(inv_n);
  m.mean_hits = n ? double(total_hits) / double(n) : 0;
  if (!std::isfinite(m.loss)) {
    m.skipped = true;
    st.iter++;
    return m;
  }
  GradientBuffers grads(st.size());
  backward_bundle(st.bound.view(), bundle, s, dL, grads);
  if (!grads.finite()) {
    m.skipped = true;
    st.iter++;
    return m;
  }
  detail::adam_apply(st, grads);
  st.iter++;
  st.sync_scene(false);
  return m;
}

// ---------------------------------------------------------------------------
// Topology operations

struct TopologyDelta {
  size_t cloned = 0, split = 0, pruned_opacity = 0, pruned_visibility = 0;
  bool changed() const { return cloned + split + pruned_opacity + pruned_visibility > 0; }
};

namespace detail {

// Applies a keep-mask plus appended new rows to every parameter, moment and
// accumulator array; new rows get zero moments.
template <typename T>
void compact_and_append(std::vector<T>& arr, const std::vector<uint8_t>& keep,
                        const std::vector<T>& appended) {
  size_t out = 0;
  for (size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) arr[out++] = arr[i];
  arr.resize(out);
  arr.insert(arr.end(), appended.begin(), appended.end());
}

inline void compact_moments(AdamGroup& g, const std::vector<uint8_t>& keep, size_t dims,
                            size_t appended) {
  size_t out = 0;
  for (size_t i = 0; i < keep.size(); ++i) {
    if (!keep[i]) continue;
    for (size_t c = 0; c < dims; ++c) {
      g.m[out * dims + c] = g.m[i * dims + c];
      g.v[out * dims + c] = g.v[i * dims + c];
    }
    ++out;
  }
  g.m.resize((out + appended) * dims);
  g.v.resize((out + appended) * dims);
  std::fill(g.m.begin() + long(out * dims), g.m.end(), 0.0f);
  std::fill(g.v.begin() + long(out * dims), g.v.end(), 0.0f);
}

}  // namespace detail

// Clone small / split large particles whose accumulated world-space
// positional gradient exceeds the threshold; prune low-opacity particles;
// enforce the particle budget by removing the lowest accumulated blending
// weight. Rebuilds proxies and BVH when anything changed.
inline TopologyDelta densify_and_prune(TrainState& st) {
  TopologyDelta delta;
  const size_t n = st.size();
  const float split_thresh = st.cfg.split_scale_threshold * st.scene_extent;

  std::vector<uint8_t> keep(n, 1);
  std::vector<Vec3f> new_mu;
  std::vector<Vec4f> new_quat;
  std::vector<Vec3f> new_logscale;
  std::vector<float> new_sigma;
  std::vector<std::array<float, 48>> new_sh;
  auto append_from = [&](size_t i, Vec3f mu, Vec3f logscale) {
    new_mu.push_back(mu);
    new_quat.push_back(st.quat_raw[i]);
    new_logscale.push_back(logscale);
    new_sigma.push_back(st.sigma_logit[i]);
    new_sh.push_back(st.sh[i]);
  };

  for (size_t i = 0; i < n; ++i) {
    const float sigma = sigmoid(st.sigma_logit[i]);
    // float-noise guard so sigma reset to exactly the threshold survives
    if (sigma < st.cfg.prune_opacity - 1e-7f) {
      keep[i] = 0;
      delta.pruned_opacity++;
      continue;
    }
    if (st.obs_count[i] == 0) continue;
    const float mean_grad = st.grad_acc_norm[i] / float(st.obs_count[i]);
    if (mean_grad <= st.cfg.densify_grad_threshold) continue;
    const Vec3f scale{std::exp(st.log_scale[i].x), std::exp(st.log_scale[i].y),
                      std::exp(st.log_scale[i].z)};
    if (max_component(scale) > split_thresh) {
      // split: two children sampled from the parent's density, scale shrunk
      keep[i] = 0;
      delta.split++;
      const Vec3f shrunk{st.log_scale[i].x - std::log(st.cfg.split_scale_shrink),
                         st.log_scale[i].y - std::log(st.cfg.split_scale_shrink),
                         st.log_scale[i].z - std::log(st.cfg.split_scale_shrink)};
      const Mat3f R = quat_to_mat3(normalize(st.quat_raw[i]));
      for (int child = 0; child < 2; ++child) {
        const Vec3f local{st.rng.normal() * scale.x, st.rng.normal() * scale.y,
                          st.rng.normal() * scale.z};
        append_from(i, st.mu[i] + R * local, shrunk);
      }
    } else {
      // clone, offset against the accumulated gradient direction
      delta.cloned++;
      const Vec3f dir = st.grad_acc_vec[i];
      const float len = length(dir);
      const float step = 0.5f * (scale.x + scale.y + scale.z) / 3.0f;
      const Vec3f offset = len > 0 ? (-step / len) * dir : Vec3f{0, 0, 0};
      append_from(i, st.mu[i] + offset, st.log_scale[i]);
    }
  }

  // visibility pruning toward the budget
  size_t kept = size_t(std::count(keep.begin(), keep.end(), uint8_t(1)));
  size_t projected = kept + new_mu.size();
  if (projected > st.cfg.max_particles && projected > st.cfg.prune_target) {
    std::vector<uint32_t> order;
    for (uint32_t i = 0; i < n; ++i)
      if (keep[i]) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
      if (st.weight_acc[a] != st.weight_acc[b]) return st.weight_acc[a] < st.weight_acc[b];
      return a < b;
    });
    for (uint32_t idx : order) {
      if (projected <= st.cfg.prune_target) break;
      keep[idx] = 0;
      projected--;
      delta.pruned_visibility++;
    }
  }

  if (!delta.changed()) {
    st.reset_accumulators();
    return delta;
  }

  detail::compact_and_append(st.mu, keep, new_mu);
  detail::compact_and_append(st.quat_raw, keep, new_quat);
  detail::compact_and_append(st.log_scale, keep, new_logscale);
  detail::compact_and_append(st.sigma_logit, keep, new_sigma);
  detail::compact_and_append(st.sh, keep, new_sh);
  detail::compact_moments(st.adam_mu, keep, 3, new_mu.size());
  detail::compact_moments(st.adam_quat, keep, 4, new_mu.size());
  detail::compact_moments(st.adam_scale, keep, 3, new_mu.size());
  detail::compact_moments(st.adam_opacity, keep, 1, new_mu.size());
  detail::compact_moments(st.adam_sh, keep, 48, new_mu.size());

  const size_t nn = st.size();
  st.grad_acc_norm.assign(nn, 0.0f);
  st.grad_acc_vec.assign(nn, Vec3f{0, 0, 0});
  st.obs_count.assign(nn, 0);
  st.weight_acc.assign(nn, 0.0f);
  st.sync_scene(true);
  return delta;
}

// Resets every opacity to 0.01 (logit domain) and zeroes the opacity Adam
// moments; particles are skipped by the proxy builder until sigma regrows.
inline void reset_opacity(TrainState& st) {
  const float value = logit(0.01f);
  std::fill(st.sigma_logit.begin(), st.sigma_logit.end(), value);
  std::fill(st.adam_opacity.m.begin(), st.adam_opacity.m.end(), 0.0f);
  std::fill(st.adam_opacity.v.begin(), st.adam_opacity.v.end(), 0.0f);
  st.sync_scene(true);
}

// Full training schedule driver for one iteration: chooses the phase, applies
// densification / opacity resets / SH unlocking at the configured boundaries.
inline StepMetrics train_step(TrainState& st, const std::vector<TrainingView>& views,
                              Pcg32& view_rng) {
  StepMetrics m;
  if (st.iter >= st.cfg.incoherent_after && st.iter < st.cfg.total_iters) {
    m = train_step_incoherent(st, views, st.cfg.incoherent_batch, view_rng);
  } else {
    const size_t pick = view_rng.uniform_u32(uint32_t(views.size()));
    m = train_step_image(st, views[pick]);
  }

  const int64_t it = st.iter;  // already incremented
  const bool in_window = it >= st.cfg.densify_from && it <= st.cfg.densify_until;
  if (in_window && st.cfg.densify_interval > 0 && it % st.cfg.densify_interval == 0) {
    const TopologyDelta d = densify_and_prune(st);
    m.topology_changed = d.changed();
    m.particles = st.size();
  }
  if (in_window && st.cfg.opacity_reset_interval > 0 &&
      it % st.cfg.opacity_reset_interval == 0)
    reset_opacity(st);
  return m;
}

// ---------------------------------------------------------------------------
// Config file: JSON keys mirror TrainConfig one-to-one; unknown keys error.

inline TrainConfig parse_train_config(const nlohmann::json& j, TrainConfig base = {}) {
  TrainConfig c = base;
  for (const auto& [key, value] : j.items()) {
    if (key == "total_iters") c.total_iters = value;
    else if (key == "lr_rotation") c.lr_rotation = value;
    else if (key == "lr_scale") c.lr_scale = value;
    else if (key == "lr_albedo") c.lr_albedo = value;
    else if (key == "lr_sh_rest") c.lr_sh_rest = value;
    else if (key == "lr_opacity") c.lr_opacity = value;
    else if (key == "lr_position") c.lr_position = value;
    else if (key == "lr_position_final") c.lr_position_final = value;
    else if (key == "densify_from") c.densify_from = value;
    else if (key == "densify_until") c.densify_until = value;
    else if (key == "densify_interval") c.densify_interval = value;
    else if (key == "densify_grad_threshold") c.densify_grad_threshold = value;
    else if (key == "split_scale_threshold") c.split_scale_threshold = value;
    else if (key == "split_scale_shrink") c.split_scale_shrink = value;
    else if (key == "prune_opacity") c.prune_opacity = value;
    else if (key == "opacity_reset_interval") c.opacity_reset_interval = value;
    else if (key == "sh_degree_interval") c.sh_degree_interval = value;
    else if (key == "max_particles") c.max_particles = value;
    else if (key == "prune_target") c.prune_target = value;
    else if (key == "lambda_ssim") c.lambda_ssim = value;
    else if (key == "incoherent_after") c.incoherent_after = value;
    else if (key == "incoherent_batch") c.incoherent_batch = value;
    else if (key == "t_min_train") c.t_min_train = value;
    else if (key == "k") c.k = value;
    else if (key == "alpha_min") c.alpha_min = value;
    else if (key == "sh_degree_max") c.sh_degree_max = value;
    else if (key == "kernel") {
      const std::string k = value;
      if (k == "gaussian") c.kernel = KernelType::Gaussian;
      else if (k == "generalized_gaussian") c.kernel = KernelType::GeneralizedGaussian;
      else if (k == "surface") c.kernel = KernelType::Surface2D;
      else if (k == "cosine") c.kernel = KernelType::CosineModulated;
      else throw std::invalid_argument("config: unknown kernel '" + k + "'");
    } else if (key == "gg_n") c.gg_n = value;
    else if (key == "proxy") {
      const std::string p = value;
      if (p == "icosahedron") c.proxy = ProxyKind::IcosahedronClamped;
      else if (p == "icosahedron_unclamped") c.proxy = ProxyKind::IcosahedronUnclamped;
      else if (p == "octahedron") c.proxy = ProxyKind::Octahedron;
      else if (p == "aabb") c.proxy = ProxyKind::Aabb;
      else throw std::invalid_argument("config: unknown proxy '" + p + "'");
    } else if (key == "seed") c.seed = value;
    else if (key == "threads") c.threads = value;
    else if (key == "holdout_every") c.holdout_every = value;
    else throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Optimizer-state sidecar (checkpoint.ply carries the particle parameters;
// this file carries raw params, Adam moments, accumulators and counters so a
// resumed run reproduces the original trajectory).

namespace detail {

template <typename T>
void write_vec(std::ofstream& f, const std::vector<T>& v) {
  const uint64_t n = v.size();
  f.write(reinterpret_cast<const char*>(&n), 8);
  f.write(reinterpret_cast<const char*>(v.data()), std::streamsize(n * sizeof(T)));
}

template <typename T>
void read_vec(std::ifstream& f, std::vector<T>& v) {
  uint64_t n = 0;
  f.read(reinterpret_cast<char*>(&n), 8);
  v.resize(n);
  f.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * sizeof(T)));
}

}  // namespace detail

inline void save_train_state(const TrainState& st, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_train_state: cannot open '" + path + "'");
  const char magic[8] = {'G', 'T', 'R', 'S', '0', '0', '0', '1'};
  f.write(magic, 8);
  f.write(reinterpret_cast<const char*>(&st.iter), 8);
  f.write(reinterpret_cast<const char*>(&st.adam_steps), 8);
  f.write(reinterpret_cast<const char*>(&st.scene_extent), 4);
  f.write(reinterpret_cast<const char*>(&st.rng.state), 8);
  f.write(reinterpret_cast<const char*>(&st.rng.inc), 8);
  detail::write_vec(f, st.mu);
  detail::write_vec(f, st.quat_raw);
  detail::write_vec(f, st.log_scale);
  detail::write_vec(f, st.sigma_logit);
  detail::write_vec(f, st.sh);
  for (const AdamGroup* g :
       {&st.adam_mu, &st.adam_quat, &st.adam_scale, &st.adam_opacity, &st.adam_sh}) {
    detail::write_vec(f, g->m);
    detail::write_vec(f, g->v);
  }
  detail::write_vec(f, st.grad_acc_norm);
  detail::write_vec(f, st.grad_acc_vec);
  detail::write_vec(f, st.obs_count);
  detail::write_vec(f, st.weight_acc);
  if (!f) throw std::runtime_error("save_train_state: write failed for '" + path + "'");
}

inline TrainState load_train_state(const std::string& path, const TrainConfig& cfg) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_train_state: cannot open '" + path + "'");
  char magic[8];
  f.read(magic, 8);
  if (std::string(magic, 4) != "GTRS")
    throw std::runtime_error("load_train_state: '" + path + "' is not a state file");
  TrainState st;
  st.cfg = cfg;
  f.read(reinterpret_cast<char*>(&st.iter), 8);
  f.read(reinterpret_cast<char*>(&st.adam_steps), 8);
  f.read(reinterpret_cast<char*>(&st.scene_extent), 4);
  f.read(reinterpret_cast<char*>(&st.rng.state), 8);
  f.read(reinterpret_cast<char*>(&st.rng.inc), 8);
  detail::read_vec(f, st.mu);
  detail::read_vec(f, st.quat_raw);
  detail::read_vec(f, st.log_scale);
  detail::read_vec(f, st.sigma_logit);
  detail::read_vec(f, st.sh);
  for (AdamGroup* g :
       {&st.adam_mu, &st.adam_quat, &st.adam_scale, &st.adam_opacity, &st.adam_sh}) {
    detail::read_vec(f, g->m);
    detail::read_vec(f, g->v);
  }
  st.adam_opacity.eps = 1e-15f;
  st.adam_scale.eps = 1e-15f;
  detail::read_vec(f, st.grad_acc_norm);
  detail::read_vec(f, st.grad_acc_vec);
  detail::read_vec(f, st.obs_count);
  detail::read_vec(f, st.weight_acc);
  if (!f) throw std::runtime_error("load_train_state: truncated state file '" + path + "'");
  st.sync_scene(true);
  return st;
}

}  // namespace gtrace

