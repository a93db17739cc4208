// SPDX-License-Identifier: Apache-2.0
//
// Minimal end-to-end fitting demo: build a small ground-truth particle
// scene, render a handful of training views, then optimize a fresh scene
// against them and print the PSNR trajectory.

#include <cstdio>

#include "gtrace/optim.hpp"
#include "gtrace/sceneio.hpp"

using namespace gtrace;

namespace {

CameraModel orbit_camera(int index, int count, float radius, int res) {
  CameraModel cam;
  cam.width = cam.height = res;
  cam.fx = cam.fy = float(res);
  cam.cx = cam.cy = float(res) / 2.0f;
  const float angle = 2.0f * pi<float> * float(index) / float(count);
  const Vec3f pos{radius * std::sin(angle), 0.35f * radius * std::sin(2.0f * angle),
                  -radius * std::cos(angle)};
  const Vec3f fwd = normalize(-pos);
  const Vec3f right = normalize(cross(Vec3f{0, 1, 0}, fwd));
  const Vec3f down = cross(fwd, right);
  Mat3f R;
  for (int r = 0; r < 3; ++r) {
    R.m[r][0] = right[r];
    R.m[r][1] = down[r];
    R.m[r][2] = fwd[r];
  }
  // rotation matrix -> quaternion (w-first)
  const float tr = R.m[0][0] + R.m[1][1] + R.m[2][2];
  Vec4f q;
  if (tr > 0) {
    float s = std::sqrt(tr + 1.0f) * 2.0f;
    q = {0.25f * s, (R.m[2][1] - R.m[1][2]) / s, (R.m[0][2] - R.m[2][0]) / s,
         (R.m[1][0] - R.m[0][1]) / s};
  } else if (R.m[0][0] > R.m[1][1] && R.m[0][0] > R.m[2][2]) {
    float s = std::sqrt(1.0f + R.m[0][0] - R.m[1][1] - R.m[2][2]) * 2.0f;
    q = {(R.m[2][1] - R.m[1][2]) / s, 0.25f * s, (R.m[0][1] + R.m[1][0]) / s,
         (R.m[0][2] + R.m[2][0]) / s};
  } else if (R.m[1][1] > R.m[2][2]) {
    float s = std::sqrt(1.0f + R.m[1][1] - R.m[0][0] - R.m[2][2]) * 2.0f;
    q = {(R.m[0][2] - R.m[2][0]) / s, (R.m[0][1] + R.m[1][0]) / s, 0.25f * s,
         (R.m[1][2] + R.m[2][1]) / s};
  } else {
    float s = std::sqrt(1.0f + R.m[2][2] - R.m[0][0] - R.m[1][1]) * 2.0f;
    q = {(R.m[1][0] - R.m[0][1]) / s, (R.m[0][2] + R.m[2][0]) / s, (R.m[1][2] + R.m[2][1]) / s,
         0.25f * s};
  }
  cam.pose0.q = normalize(q);
  cam.pose0.t = pos;
  cam.pose1 = cam.pose0;
  return cam;
}

}  // namespace

int main() {
  Pcg32 rng(42);
  Scene gt;
  for (int i = 0; i < 60; ++i) {
    Particle p;
    p.mu = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    p.quat = normalize(Vec4f{rng.normal(), rng.normal(), rng.normal(), rng.normal()});
    const float s = std::exp(rng.uniform(std::log(0.08f), std::log(0.25f)));
    p.scale = {s, s * rng.uniform(0.5f, 1.0f), s * rng.uniform(0.5f, 1.0f)};
    p.opacity = rng.uniform(0.3f, 0.95f);
    for (int c = 0; c < 3; ++c)
      p.sh[c * kShCoeffs] = logit(rng.uniform(0.15f, 0.85f)) / sh::C0<float>;
    gt.push_back(p);
  }
  BoundScene gt_bound;
  gt_bound.scene = gt;
  gt_bound.rebuild(ProxyKind::IcosahedronClamped, 0.01f);

  TrainConfig cfg;
  cfg.total_iters = 1200;
  cfg.densify_from = 300;
  cfg.densify_until = 900;
  cfg.opacity_reset_interval = 0;
  cfg.incoherent_after = 1200;
  cfg.threads = hardware_threads();
  cfg.sh_degree_interval = 400;
  cfg.sh_degree_max = 1;

  std::vector<TrainingView> views;
  std::vector<CameraModel> cams;
  RenderSettings gt_settings = cfg.render_settings(10000);
  gt_settings.threads = cfg.threads;
  for (int i = 0; i < 12; ++i) {
    TrainingView v;
    v.camera = orbit_camera(i, 12, 3.2f, 96);
    v.image = render_image(gt_bound.view(), v.camera, gt_settings);
    cams.push_back(v.camera);
    views.push_back(std::move(v));
  }

  Pcg32 init_rng(7);
  std::vector<Vec3f> pts;
  std::vector<Vec3f> cols;
  for (int i = 0; i < 400; ++i) {
    pts.push_back({init_rng.uniform(-1, 1), init_rng.uniform(-1, 1), init_rng.uniform(-1, 1)});
    cols.push_back({0.5f, 0.5f, 0.5f});
  }
  TrainState st = init_from_points(pts, cols, cams, cfg);

  Pcg32 view_rng(3);
  while (st.iter < cfg.total_iters) {
    const StepMetrics m = train_step(st, views, view_rng);
    if (m.iter % 100 == 0)
      std::printf("iter %5ld  loss %.5f  psnr %.2f dB  particles %zu\n", long(m.iter), m.loss,
                  m.psnr, m.particles);
  }
  save_ply(st.bound.scene, "demo_fit.ply");
  write_image(render_image(st.bound.view(), views[0].camera, gt_settings), "demo_fit.png");
  std::printf("wrote demo_fit.ply / demo_fit.png\n");
  return 0;
}
