// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test and acceptance suites: random scenes drawn in
// the raw (pre-activation) parameter domains, orbit cameras, and ray sets.

#pragma once

#include <vector>

#include "gtrace/camera.hpp"
#include "gtrace/particle.hpp"
#include "gtrace/tracer.hpp"

namespace gtrace::testutil {

inline Particle random_particle(Pcg32& rng, KernelType kernel, float box = 3.0f,
                                int sh_degree = 3, float min_scale = 0.05f,
                                float max_scale = 0.45f) {
  Particle p;
  p.mu = {rng.uniform(-box, box), rng.uniform(-box, box), rng.uniform(-box, box)};
  p.quat = normalize(Vec4f{rng.normal(), rng.normal(), rng.normal(), rng.normal()});
  for (int c = 0; c < 3; ++c)
    p.scale[c] = std::exp(rng.uniform(std::log(min_scale), std::log(max_scale)));
  p.opacity = sigmoid(rng.uniform(-2.5f, 2.5f));  // ~[0.076, 0.924]
  p.kernel = kernel;
  p.gg_n = 2.0f;
  if (kernel == KernelType::Surface2D) p.scale.z = 0.0f;
  if (kernel == KernelType::CosineModulated)
    p.psi = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
  for (int c = 0; c < 3; ++c) {
    p.sh[c * kShCoeffs] = logit(rng.uniform(0.1f, 0.9f)) / sh::C0<float>;
    if (sh_degree > 0)
      for (int l = 1; l < (sh_degree + 1) * (sh_degree + 1); ++l)
        p.sh[c * kShCoeffs + l] = rng.uniform(-0.35f, 0.35f);
  }
  return p;
}

inline Scene make_random_scene(size_t n, uint64_t seed, KernelType kernel, float box = 3.0f,
                               int sh_degree = 3) {
  Pcg32 rng(seed);
  Scene scene;
  scene.reserve(n);
  for (size_t i = 0; i < n; ++i) scene.push_back(random_particle(rng, kernel, box, sh_degree));
  return scene;
}

// Mixed-kernel scene cycling through all four kernel types.
inline Scene make_mixed_scene(size_t n, uint64_t seed, float box = 3.0f) {
  Pcg32 rng(seed);
  Scene scene;
  const KernelType kinds[4] = {KernelType::Gaussian, KernelType::GeneralizedGaussian,
                               KernelType::Surface2D, KernelType::CosineModulated};
  for (size_t i = 0; i < n; ++i) scene.push_back(random_particle(rng, kinds[i % 4], box));
  return scene;
}

// Random rays aimed at the scene region from a surrounding sphere.
inline void random_ray(Pcg32& rng, float radius, Vec3f& o, Vec3f& d) {
  const float z = rng.uniform(-1, 1);
  const float phi = rng.uniform(0, 2 * pi<float>);
  const float r = std::sqrt(std::max(0.0f, 1.0f - z * z));
  o = Vec3f{r * std::cos(phi), r * std::sin(phi), z} * radius;
  const Vec3f target{rng.uniform(-1.5f, 1.5f), rng.uniform(-1.5f, 1.5f),
                     rng.uniform(-1.5f, 1.5f)};
  d = normalize(target - o);
}

// Camera on an orbit looking at the origin (x right, y down, z forward).
inline CameraModel orbit_camera(int index, int count, float radius, int res,
                                float focal_scale = 1.0f) {
  CameraModel cam;
  cam.width = cam.height = res;
  cam.fx = cam.fy = float(res) * focal_scale;
  cam.cx = cam.cy = float(res) / 2.0f;
  const float angle = 2.0f * pi<float> * float(index) / float(std::max(count, 1));
  const float elev = 0.35f * std::sin(3.0f * angle);
  const Vec3f pos{radius * std::sin(angle), elev * radius, -radius * std::cos(angle)};
  const Vec3f fwd = normalize(-pos);
  Vec3f up{0, 1, 0};
  if (std::abs(dot(up, fwd)) > 0.98f) up = {1, 0, 0};
  const Vec3f right = normalize(cross(up, fwd));
  const Vec3f down = cross(fwd, right);
  Mat3f R;
  for (int r = 0; r < 3; ++r) {
    R.m[r][0] = right[r];
    R.m[r][1] = down[r];
    R.m[r][2] = fwd[r];
  }
  const float tr = R.m[0][0] + R.m[1][1] + R.m[2][2];
  Vec4f q;
  if (tr > 0) {
    const float s = std::sqrt(tr + 1.0f) * 2.0f;
    q = {0.25f * s, (R.m[2][1] - R.m[1][2]) / s, (R.m[0][2] - R.m[2][0]) / s,
         (R.m[1][0] - R.m[0][1]) / s};
  } else if (R.m[0][0] > R.m[1][1] && R.m[0][0] > R.m[2][2]) {
    const float s = std::sqrt(1.0f + R.m[0][0] - R.m[1][1] - R.m[2][2]) * 2.0f;
    q = {(R.m[2][1] - R.m[1][2]) / s, 0.25f * s, (R.m[0][1] + R.m[1][0]) / s,
         (R.m[0][2] + R.m[2][0]) / s};
  } else if (R.m[1][1] > R.m[2][2]) {
    const float s = std::sqrt(1.0f + R.m[1][1] - R.m[0][0] - R.m[2][2]) * 2.0f;
    q = {(R.m[0][2] - R.m[2][0]) / s, (R.m[0][1] + R.m[1][0]) / s, 0.25f * s,
         (R.m[1][2] + R.m[2][1]) / s};
  } else {
    const float s = std::sqrt(1.0f + R.m[2][2] - R.m[0][0] - R.m[1][1]) * 2.0f;
    q = {(R.m[1][0] - R.m[0][1]) / s, (R.m[0][2] + R.m[2][0]) / s, (R.m[1][2] + R.m[2][1]) / s,
         0.25f * s};
  }
  cam.pose0.q = normalize(q);
  cam.pose0.t = pos;
  cam.pose1 = cam.pose0;
  return cam;
}

}  // namespace gtrace::testutil
