// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "gtrace/camera.hpp"
#include "gtrace/render.hpp"
#include "gtrace/sceneio.hpp"
#include "test_util.hpp"

using namespace gtrace;

namespace {

CameraModel basic_camera(int res = 64) {
  CameraModel cam;
  cam.width = cam.height = res;
  cam.fx = cam.fy = float(res) * 0.8f;
  cam.cx = cam.cy = float(res) / 2.0f;
  return cam;
}

}  // namespace

TEST_CASE("center pixel maps to the optical axis") {
  CameraModel cam = basic_camera();
  Pcg32 rng(1);
  // principal point at pixel center (cx - 0.5 in index space)
  cam.cx = cam.cy = 32.5f;
  const CameraRay ray = generate_pixel_ray(cam, 32, 32, 0, rng);
  REQUIRE(ray.valid);
  CHECK(length(ray.d - Vec3f{0, 0, 1}) < 1e-6f);
}

TEST_CASE("fisheye distort/undistort roundtrip within 1e-6 px") {
  CameraModel cam = basic_camera(640);
  cam.fx = cam.fy = 280;
  cam.cx = cam.cy = 320;
  cam.distortion = DistortionType::OpenCvFisheye;
  cam.dist_params = {-0.0412, 0.0087, -0.0091, 0.0025, 0};
  Pcg32 rng(2);
  double worst = 0;
  int tested = 0;
  while (tested < 10000) {
    const float px = rng.uniform(0, 640);
    const float py = rng.uniform(0, 640);
    Vec3f dir;
    if (!cam.unproject(px, py, dir)) continue;
    Vec2f back;
    REQUIRE(cam.project(dir, back));
    worst = std::max(worst, double(std::abs(back.x - px)));
    worst = std::max(worst, double(std::abs(back.y - py)));
    tested++;
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("radial-tangential distort/undistort roundtrip within 1e-6 px") {
  CameraModel cam = basic_camera(640);
  cam.fx = 500;
  cam.fy = 495;
  cam.cx = 320;
  cam.cy = 318;
  cam.distortion = DistortionType::OpenCvPinhole;
  cam.dist_params = {-0.28, 0.07, 1.8e-4, -2.1e-4, 0.008};
  Pcg32 rng(3);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const float px = rng.uniform(40, 600);  // inside the valid field of view
    const float py = rng.uniform(40, 600);
    Vec3f dir;
    REQUIRE(cam.unproject(px, py, dir));
    CHECK(std::abs(length(dir) - 1.0f) < 2e-6f);
    Vec2f back;
    REQUIRE(cam.project(dir, back));
    worst = std::max(worst, double(std::abs(back.x - px)));
    worst = std::max(worst, double(std::abs(back.y - py)));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("fisheye rays beyond the model validity are flagged invalid") {
  CameraModel cam = basic_camera(512);
  cam.fx = cam.fy = 100;  // extremely wide: corners far beyond theta = pi/2 + margin
  cam.cx = cam.cy = 256;
  cam.distortion = DistortionType::OpenCvFisheye;
  Pcg32 rng(4);
  const CameraRay corner = generate_pixel_ray(cam, 0, 0, 0, rng);
  CHECK_FALSE(corner.valid);
  const CameraRay center = generate_pixel_ray(cam, 256, 256, 0, rng);
  CHECK(center.valid);
}

TEST_CASE("rolling shutter with a static pose equals global shutter bit-exactly") {
  const Scene scene = testutil::make_mixed_scene(60, 5);
  BoundScene b;
  b.scene = scene;
  b.rebuild(ProxyKind::IcosahedronClamped, 0.01f);
  CameraModel cam = testutil::orbit_camera(1, 4, 6.0f, 48);
  RenderSettings s;
  s.threads = 1;
  const Image global = render_image(b.view(), cam, s);
  cam.shutter = ShutterType::RollingTopToBottom;
  const Image rolling = render_image(b.view(), cam, s);
  cam.shutter = ShutterType::RollingLeftToRight;
  const Image rolling_lr = render_image(b.view(), cam, s);
  for (size_t i = 0; i < global.pixels.size(); ++i) {
    CHECK(global.pixels[i] == rolling.pixels[i]);
    CHECK(global.pixels[i] == rolling_lr.pixels[i]);
  }
}

TEST_CASE("pose interpolation endpoints and monotone time mapping") {
  CameraModel cam = basic_camera();
  cam.pose0.t = {0, 0, 0};
  cam.pose1.t = {2, 0, 0};
  cam.pose1.q = normalize(Vec4f{std::cos(0.3f), 0, std::sin(0.3f), 0});
  const Pose p0 = cam.pose_at(0.0f);
  const Pose p1 = cam.pose_at(1.0f);
  CHECK(p0.t.x == 0.0f);
  CHECK(p1.t.x == 2.0f);
  const Pose mid = cam.pose_at(0.5f);
  CHECK(mid.t.x == Catch::Approx(1.0));
  cam.shutter = ShutterType::RollingTopToBottom;
  CHECK(cam.shutter_time(10, 0) == 0.0f);
  CHECK(cam.shutter_time(10, float(cam.height - 1)) == 1.0f);
}

TEST_CASE("moving rolling-shutter camera shears a vertical bar") {
  // a thin vertical column of particles, camera panning +x during exposure
  Scene scene;
  for (int i = 0; i < 40; ++i) {
    Particle p;
    p.mu = {0, -1.5f + 3.0f * float(i) / 39.0f, 0};
    p.scale = {0.06f, 0.06f, 0.06f};
    p.opacity = 0.95f;
    for (int ch = 0; ch < 3; ++ch) p.sh[size_t(ch) * kShCoeffs] = logit(0.9f) / sh::C0<float>;
    scene.push_back(p);
  }
  BoundScene b;
  b.scene = scene;
  b.rebuild(ProxyKind::IcosahedronClamped, 0.01f);
  CameraModel cam = basic_camera(96);
  cam.fx = cam.fy = 96;
  cam.pose0.t = {0, 0, -5};
  cam.pose1.t = {0.6f, 0, -5};  // pans +x over the frame
  cam.shutter = ShutterType::RollingTopToBottom;
  RenderSettings s;
  s.threads = 1;
  const Image img = render_image(b.view(), cam, s);
  // centroid of the bar per row: later rows (bottom) must shift left
  auto centroid = [&](int y) {
    double num = 0, den = 0;
    for (int x = 0; x < img.width; ++x) {
      num += double(x) * double(img.at(x, y).x);
      den += double(img.at(x, y).x);
    }
    return den > 1e-6 ? num / den : -1.0;
  };
  const double top = centroid(10);
  const double bottom = centroid(img.height - 10);
  REQUIRE(top >= 0);
  REQUIRE(bottom >= 0);
  CHECK(bottom < top - 2.0);  // shear direction: opposite the pan
}

TEST_CASE("aperture 0 reproduces the pinhole ray exactly") {
  CameraModel pin = basic_camera();
  CameraModel dof = pin;
  dof.aperture_radius = 0.0f;
  dof.focus_distance = 3.0f;
  Pcg32 rng(6);
  for (int i = 0; i < 200; ++i) {
    const int px = int(rng.uniform_u32(64));
    const int py = int(rng.uniform_u32(64));
    Pcg32 r1(9, 1), r2(9, 1);
    const CameraRay a = generate_pixel_ray(pin, px, py, 0, r1);
    const CameraRay c = generate_pixel_ray(dof, px, py, 0, r2);
    CHECK(a.o == c.o);
    CHECK(a.d == c.d);
  }
}

TEST_CASE("nonzero aperture: lens rays pass through the pinhole focal point") {
  CameraModel pin = basic_camera();
  CameraModel dof = pin;
  dof.aperture_radius = 0.2f;
  dof.focus_distance = 4.0f;
  Pcg32 rng(7);
  // sample 0 has no subpixel jitter: the same pixel shares a focal point
  const CameraRay p = generate_pixel_ray(pin, 20, 40, 0, rng);
  const Vec3f focus = p.o + (4.0f / p.d.z) * p.d;
  const CameraRay l = generate_pixel_ray(dof, 20, 40, 0, rng);
  CHECK(std::abs(length(l.d) - 1.0f) < 1e-5f);
  CHECK(length(l.o - p.o) > 1e-4f);  // origin moved onto the lens disk
  // point-line distance from the focal point to the lens ray
  const Vec3f w = focus - l.o;
  const float dist = length(w - dot(w, l.d) * l.d);
  CHECK(dist < 1e-5f);
}

TEST_CASE("generated directions are unit norm across models") {
  Pcg32 rng(9);
  for (int model = 0; model < 3; ++model) {
    CameraModel cam = basic_camera(128);
    if (model == 1) {
      cam.distortion = DistortionType::OpenCvFisheye;
      cam.dist_params = {0.02, -0.003, 0.001, 0, 0};
    } else if (model == 2) {
      cam.distortion = DistortionType::OpenCvPinhole;
      cam.dist_params = {-0.2, 0.05, 1e-4, -1e-4, 0};
    }
    for (int i = 0; i < 500; ++i) {
      const CameraRay ray = generate_pixel_ray(cam, int(rng.uniform_u32(128)),
                                               int(rng.uniform_u32(128)), 0, rng);
      if (!ray.valid) continue;
      CHECK(std::abs(length(ray.d) - 1.0f) <= 1e-6f);
    }
  }
}

TEST_CASE("incoherent batches: determinism and exhaustive mode") {
  std::vector<TrainingView> views;
  for (int v = 0; v < 3; ++v) {
    TrainingView view;
    view.camera = basic_camera(16);
    view.image = Image(16, 16);
    for (auto& px : view.image.pixels) px = {float(v), 0, 0};
    views.push_back(std::move(view));
  }
  Pcg32 a(42, 5), b(42, 5);
  const RayBundle ba = sample_incoherent_batch(views, 500, a);
  const RayBundle bb = sample_incoherent_batch(views, 500, b);
  REQUIRE(ba.size() == bb.size());
  for (size_t i = 0; i < ba.size(); ++i) {
    CHECK(ba.view_ids[i] == bb.view_ids[i]);
    CHECK(ba.pixel_ids[i] == bb.pixel_ids[i]);
  }
  // targets come from the right views
  for (size_t i = 0; i < ba.size(); ++i)
    CHECK(ba.targets[i].x == float(ba.view_ids[i]));

  // exhaustive: every pixel of every view exactly once
  Pcg32 c(7, 1);
  const RayBundle all = sample_incoherent_batch(views, 3 * 256, c, /*exhaustive=*/true);
  REQUIRE(all.size() == 3 * 256);
  std::vector<int> seen(3 * 256, 0);
  for (size_t i = 0; i < all.size(); ++i) seen[all.view_ids[i] * 256 + all.pixel_ids[i]]++;
  for (int s : seen) CHECK(s == 1);
}

TEST_CASE("incoherent batches: per-view frequency uniform within 3 sigma") {
  std::vector<TrainingView> views;
  for (int v = 0; v < 4; ++v) {
    TrainingView view;
    view.camera = basic_camera(32);
    view.image = Image(32, 32);
    views.push_back(std::move(view));
  }
  Pcg32 rng(11, 3);
  const size_t n = 1000000;
  const RayBundle bundle = sample_incoherent_batch(views, n, rng);
  std::array<size_t, 4> counts{};
  for (uint32_t v : bundle.view_ids) counts[v]++;
  const double p = 0.25;
  const double sigma = std::sqrt(double(n) * p * (1 - p));
  for (size_t c : counts)
    CHECK(std::abs(double(c) - double(n) * p) < 3.0 * sigma);
}

TEST_CASE("COLMAP text loader inverts world-to-cam poses") {
  const std::string dir = "/tmp/gtrace_colmap_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream c(dir + "/cameras.txt");
    c << "# comment\n";
    c << "1 PINHOLE 640 480 500.0 510.0 320.0 240.0\n";
    c << "2 OPENCV_FISHEYE 640 480 280 280 320 240 -0.01 0.002 0 0\n";
  }
  {
    std::ofstream i(dir + "/images.txt");
    i << "# comment\n";
    // identity rotation, camera center at (1,2,3): t_wc = -R_wc * C = (-1,-2,-3)
    i << "1 1 0 0 0 -1 -2 -3 1 img0.png\n";
    i << "\n";
    i << "2 0.7071068 0 0.7071068 0 0 0 0 2 img1.png\n";
    i << "\n";
  }
  const auto views = load_colmap_text(dir + "/cameras.txt", dir + "/images.txt");
  REQUIRE(views.size() == 2);
  CHECK(views[0].camera.fx == 500.0f);
  CHECK(views[0].camera.fy == 510.0f);
  CHECK(length(views[0].camera.pose0.t - Vec3f{1, 2, 3}) < 1e-5f);
  CHECK(views[0].image_name == "img0.png");
  CHECK(views[1].camera.distortion == DistortionType::OpenCvFisheye);
  // unit determinant rotation recovered
  const Mat3f R = quat_to_mat3(views[1].camera.pose0.q);
  const Vec3f v = R * Vec3f{1, 0, 0};
  CHECK(std::abs(length(v) - 1.0f) < 1e-5f);
}
