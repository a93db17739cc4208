// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "fd_harness.hpp"
#include "gtrace/grad.hpp"
#include "gtrace/render.hpp"
#include "test_util.hpp"

using namespace gtrace;

namespace {

BoundScene bind(Scene scene) {
  BoundScene b;
  b.scene = std::move(scene);
  b.rebuild(ProxyKind::IcosahedronClamped, 0.01f);
  return b;
}

RenderSettings grad_settings() {
  RenderSettings s;
  s.t_min_transmittance = 0.0f;  // keep probes away from the stopping rule
  s.threads = 1;
  return s;
}

struct Comparison {
  size_t compared = 0;
  size_t invalid = 0;
  double worst = 0;
};

Comparison compare_fd(const Scene& scene, const ProxySet& proxies,
                      const std::vector<testutil::FdRay>& rays, const GradientBuffers& g,
                      double tol) {
  const testutil::FdOutcome fd = testutil::fd_gradients(
      scene, proxies, ProxyKind::IcosahedronClamped, 0.01, 0.0, 3, rays);
  const std::vector<double> analytic = testutil::flatten_gradients(g);
  // absolute floor grows with the ray count: float32 sums accumulate
  // ~1e-7 per-ray rounding noise in a random walk
  const double abs_floor = 1e-6 * std::sqrt(double(std::max<size_t>(1, rays.size())));
  Comparison c;
  for (size_t i = 0; i < analytic.size(); ++i) {
    if (!fd.valid[i]) {
      c.invalid++;
      continue;
    }
    const double denom = std::max(std::abs(analytic[i]), std::abs(fd.grads[i]));
    if (denom <= 1e-6) continue;  // both vanish
    const double err = std::abs(analytic[i] - fd.grads[i]);
    c.worst = std::max(c.worst, err / denom);
    // tol relative or the accumulation-noise absolute floor
    CHECK(err < std::max(tol * denom, abs_floor));
    c.compared++;
  }
  return c;
}

}  // namespace

TEST_CASE("zero loss gradient gives zero parameter gradients") {
  BoundScene b = bind(testutil::make_random_scene(20, 1, KernelType::Gaussian, 1.0f));
  GradientBuffers g(b.scene.size());
  Pcg32 rng(2);
  for (int i = 0; i < 50; ++i) {
    Vec3f o, d;
    testutil::random_ray(rng, 6.0f, o, d);
    backward_ray(b.view(), o, d, grad_settings(), {0, 0, 0}, g);
  }
  for (size_t i = 0; i < g.size(); ++i) {
    CHECK(length(g.d_mu[i]) == 0.0f);
    CHECK(length(g.d_scale[i]) == 0.0f);
    CHECK(g.d_sigma_logit[i] == 0.0f);
  }
}

TEST_CASE("single particle: d sigma_logit matches the closed form and FD") {
  Scene scene(1);
  scene[0].opacity = 0.6f;
  scene[0].scale = {0.4f, 0.4f, 0.4f};
  for (int ch = 0; ch < 3; ++ch) scene[0].sh[size_t(ch) * kShCoeffs] = logit(0.7f) / sh::C0<float>;
  BoundScene b = bind(scene);
  GradientBuffers g(1);
  const Vec3f o{0, 0, -5}, d{0, 0, 1};
  const Vec3f dL{1.0f, 0.5f, 0.25f};
  backward_ray(b.view(), o, d, grad_settings(), dL, g);

  // L = alpha * c with alpha = sigma * rho(tau_max), rho = 1 dead-center:
  // dL/d sigma_logit = rho * sigma(1-sigma) * dot(dL, c)
  const float sigma = 0.6f;
  const float expect = 1.0f * sigma * (1 - sigma) * (dL.x + dL.y + dL.z) * 0.7f;
  CHECK(g.d_sigma_logit[0] == Catch::Approx(expect).epsilon(2e-3));

  std::vector<testutil::FdRay> rays = {{Vec3d(o), Vec3d(d), Vec3d(dL)}};
  const Comparison c = compare_fd(b.scene, b.proxies, rays, g, 1e-3);
  CHECK(c.compared > 0);
}

TEST_CASE("50-particle scene: every parameter gradient matches FD") {
  Scene scene = testutil::make_random_scene(50, 3, KernelType::Gaussian, 1.2f);
  for (size_t i = 0; i < scene.size(); i += 3) {
    scene[i].kernel = KernelType::GeneralizedGaussian;  // mixed optimizable kernels
  }
  BoundScene b = bind(scene);
  Pcg32 rng(4);
  std::vector<testutil::FdRay> rays;
  GradientBuffers g(scene.size());
  for (int i = 0; i < 64; ++i) {
    Vec3f o, d;
    testutil::random_ray(rng, 6.0f, o, d);
    const Vec3f dL{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    rays.push_back({Vec3d(o), Vec3d(d), Vec3d(dL)});
    backward_ray(b.view(), o, d, grad_settings(), dL, g);
  }
  const Comparison c = compare_fd(b.scene, b.proxies, rays, g, 1e-3);
  CHECK(c.compared > 500);
  // discontinuity exclusions must stay rare
  CHECK(c.invalid < c.compared / 10);
}

TEST_CASE("particles never blended receive exactly zero gradients") {
  Scene scene = testutil::make_random_scene(10, 5, KernelType::Gaussian, 1.0f);
  Particle far = scene[0];
  far.mu = {500, 500, 500};
  scene.push_back(far);
  BoundScene b = bind(scene);
  GradientBuffers g(scene.size());
  Pcg32 rng(6);
  for (int i = 0; i < 100; ++i) {
    Vec3f o, d;
    testutil::random_ray(rng, 6.0f, o, d);
    backward_ray(b.view(), o, d, grad_settings(), {1, 1, 1}, g);
  }
  const size_t last = scene.size() - 1;
  CHECK(g.hit_count[last] == 0);
  CHECK(length(g.d_mu[last]) == 0.0f);
  CHECK(length(g.d_scale[last]) == 0.0f);
  CHECK(g.d_sigma_logit[last] == 0.0f);
  CHECK(g.weight_contribution[last] == 0.0f);
}

TEST_CASE("backward_image: symmetric render has vanishing d mu_x") {
  Scene scene(1);
  scene[0].opacity = 0.8f;
  scene[0].scale = {0.5f, 0.5f, 0.5f};
  BoundScene b = bind(scene);
  CameraModel cam;
  cam.width = cam.height = 33;  // odd: pixel grid symmetric about the center
  cam.fx = cam.fy = 40;
  cam.cx = cam.cy = 16.5f;
  cam.pose0.t = {0, 0, -5};
  cam.pose1 = cam.pose0;
  Image dloss(cam.width, cam.height);
  for (auto& px : dloss.pixels) px = {1, 1, 1};
  const GradientBuffers g = backward_image(b.view(), cam, grad_settings(), dloss);
  CHECK(std::abs(g.d_mu[0].x) <= 1e-4f);
  CHECK(std::abs(g.d_mu[0].y) <= 1e-4f);
}

TEST_CASE("parallel and sequential accumulation agree") {
  BoundScene b = bind(testutil::make_random_scene(60, 7, KernelType::Gaussian, 1.2f));
  const CameraModel cam = testutil::orbit_camera(1, 4, 6.0f, 48);
  Image dloss(cam.width, cam.height);
  Pcg32 rng(8);
  for (auto& px : dloss.pixels) px = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  RenderSettings seq = grad_settings();
  RenderSettings par = grad_settings();
  par.threads = 4;
  const GradientBuffers gs = backward_image(b.view(), cam, seq, dloss);
  const GradientBuffers gp = backward_image(b.view(), cam, par, dloss);
  for (size_t i = 0; i < gs.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const float denom = std::max({std::abs(gs.d_mu[i][c]), std::abs(gp.d_mu[i][c]), 1e-3f});
      CHECK(std::abs(gs.d_mu[i][c] - gp.d_mu[i][c]) / denom < 1e-4f);
    }
    const float dden = std::max({std::abs(gs.d_sigma_logit[i]), 1e-3f});
    CHECK(std::abs(gs.d_sigma_logit[i] - gp.d_sigma_logit[i]) / dden < 1e-4f);
  }
}

TEST_CASE("weight contribution accumulator equals the forward sum of T*alpha") {
  BoundScene b = bind(testutil::make_random_scene(40, 9, KernelType::Gaussian, 1.2f));
  GradientBuffers g(b.scene.size());
  std::vector<double> expected(b.scene.size(), 0.0);
  Pcg32 rng(10);
  const RenderSettings s = grad_settings();
  for (int i = 0; i < 200; ++i) {
    Vec3f o, d;
    testutil::random_ray(rng, 6.0f, o, d);
    // instrument the forward pass independently of the backward path
    walk_ray(b.view(), o, d, std::numeric_limits<float>::max(), s,
             [&](uint32_t pid, float, const HitSample<float>& h, float T) {
               expected[pid] += double(T) * double(h.alpha);
             });
    backward_ray(b.view(), o, d, s, {0.3f, 0.3f, 0.3f}, g);
  }
  for (size_t i = 0; i < g.size(); ++i)
    CHECK(double(g.weight_contribution[i]) ==
          Catch::Approx(expected[i]).margin(1e-3).epsilon(1e-4));
}

TEST_CASE("gradients remain finite and clamp boundaries use subgradient zero") {
  Scene scene(1);
  scene[0].opacity = 0.9999f;  // alpha at center exceeds the 0.999 clamp
  scene[0].scale = {0.5f, 0.5f, 0.5f};
  BoundScene b = bind(scene);
  GradientBuffers g(1);
  backward_ray(b.view(), {0, 0, -5}, {0, 0, 1}, grad_settings(), {1, 1, 1}, g);
  REQUIRE(g.finite());
  // alpha clamped: geometry and opacity receive no gradient through alpha
  CHECK(length(g.d_mu[0]) == 0.0f);
  CHECK(g.d_sigma_logit[0] == 0.0f);
  // color still flows
  float sh_mag = 0;
  for (float v : g.d_sh[0]) sh_mag += std::abs(v);
  CHECK(sh_mag > 0.0f);
}
