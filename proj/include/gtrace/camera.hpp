// SPDX-License-Identifier: Apache-2.0
//
// Ray generation for pinhole, radial-tangential and equidistant-fisheye
// cameras (OpenCV parameter conventions so real calibrations load directly),
// rolling-shutter pose interpolation, thin-lens depth of field, and
// stochastic incoherent-ray training batches.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "gtrace/image.hpp"
#include "gtrace/math.hpp"

namespace gtrace {

enum class DistortionType : uint8_t { None = 0, OpenCvFisheye = 1, OpenCvPinhole = 2 };
enum class ShutterType : uint8_t { Global = 0, RollingTopToBottom = 1, RollingLeftToRight = 2 };

// Camera-to-world rigid pose. The camera looks down +z, x right, y down.
struct Pose {
  Vec4f q{1, 0, 0, 0};
  Vec3f t{0, 0, 0};

  bool operator==(const Pose& o) const {
    return q.x == o.q.x && q.y == o.q.y && q.z == o.q.z && q.w == o.q.w && t == o.t;
  }
};

namespace distortion {

// Forward fisheye model: theta_d = theta (1 + k1 t^2 + k2 t^4 + k3 t^6 + k4 t^8).
inline double fisheye_theta_d(double theta, const double* k) {
  const double t2 = theta * theta;
  return theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))));
}

// Newton solve for theta given theta_d; <= 10 iterations, tol 1e-9.
inline double fisheye_undistort_theta(double theta_d, const double* k) {
  double theta = theta_d;
  for (int i = 0; i < 10; ++i) {
    const double t2 = theta * theta;
    const double f = fisheye_theta_d(theta, k) - theta_d;
    const double df =
        1.0 + t2 * (3.0 * k[0] + t2 * (5.0 * k[1] + t2 * (7.0 * k[2] + t2 * 9.0 * k[3])));
    const double step = f / df;
    theta -= step;
    if (std::abs(step) < 1e-9) break;
  }
  return theta;
}

// Forward radial-tangential model on normalized coordinates.
inline Vec2d radtan_distort(Vec2d p, const double* k) {
  const double x = p.x, y = p.y;
  const double r2 = x * x + y * y;
  const double rad = 1.0 + r2 * (k[0] + r2 * (k[1] + r2 * k[4]));
  return {x * rad + 2.0 * k[2] * x * y + k[3] * (r2 + 2.0 * x * x),
          y * rad + k[2] * (r2 + 2.0 * y * y) + 2.0 * k[3] * x * y};
}

// 2D Newton inverse of radtan_distort; <= 10 iterations, tol 1e-9.
inline Vec2d radtan_undistort(Vec2d target, const double* k) {
  Vec2d p = target;
  for (int i = 0; i < 10; ++i) {
    const double x = p.x, y = p.y;
    const double r2 = x * x + y * y;
    const double rad = 1.0 + r2 * (k[0] + r2 * (k[1] + r2 * k[4]));
    const double drad = k[0] + 2.0 * k[1] * r2 + 3.0 * k[4] * r2 * r2;
    const Vec2d f = radtan_distort(p, k) - target;
    const double j00 = rad + 2.0 * x * x * drad + 2.0 * k[2] * y + 6.0 * k[3] * x;
    const double j01 = 2.0 * x * y * drad + 2.0 * k[2] * x + 2.0 * k[3] * y;
    const double j10 = j01;
    const double j11 = rad + 2.0 * y * y * drad + 6.0 * k[2] * y + 2.0 * k[3] * x;
    const double det = j00 * j11 - j01 * j10;
    if (det == 0) break;
    const Vec2d step{(f.x * j11 - f.y * j01) / det, (f.y * j00 - f.x * j10) / det};
    p = p - step;
    if (std::abs(step.x) < 1e-9 && std::abs(step.y) < 1e-9) break;
  }
  return p;
}

}  // namespace distortion

struct CameraModel {
  float fx = 100, fy = 100, cx = 50, cy = 50;  // pixels
  int width = 100, height = 100;
  DistortionType distortion = DistortionType::None;
  std::array<double, 5> dist_params{};  // fisheye: k1..k4; pinhole: k1,k2,p1,p2,k3
  Pose pose0;
  Pose pose1;  // pose at normalized shutter time 1; equal to pose0 when static
  ShutterType shutter = ShutterType::Global;
  float aperture_radius = 0.0f;
  float focus_distance = 1.0f;

  // Margin past 90 degrees before the equidistant model is declared invalid.
  static constexpr float kFisheyeThetaMargin = float(pi<double> / 6.0);

  Pose pose_at(float time) const {
    if (time <= 0.0f || pose0 == pose1) return pose0;
    if (time >= 1.0f) return pose1;
    Pose p;
    p.t = pose0.t + time * (pose1.t - pose0.t);
    p.q = quat_slerp(pose0.q, pose1.q, time);
    return p;
  }

  float shutter_time(float px, float py) const {
    switch (shutter) {
      case ShutterType::RollingTopToBottom:
        return height > 1 ? py / float(height - 1) : 0.0f;
      case ShutterType::RollingLeftToRight:
        return width > 1 ? px / float(width - 1) : 0.0f;
      default: return 0.0f;
    }
  }

  // Camera-space unit direction through a (sub)pixel position. Returns false
  // when the pixel is outside the distortion model's validity.
  bool unproject(float u, float v, Vec3f& dir) const {
    const double xd = (double(u) - cx) / fx;
    const double yd = (double(v) - cy) / fy;
    switch (distortion) {
      case DistortionType::None: {
        dir = normalize(Vec3f{float(xd), float(yd), 1.0f});
        return true;
      }
      case DistortionType::OpenCvPinhole: {
        const Vec2d p = distortion::radtan_undistort({xd, yd}, dist_params.data());
        dir = normalize(Vec3f{float(p.x), float(p.y), 1.0f});
        return true;
      }
      case DistortionType::OpenCvFisheye: {
        const double rd = std::sqrt(xd * xd + yd * yd);
        if (rd < 1e-12) {
          dir = {0, 0, 1};
          return true;
        }
        const double theta = distortion::fisheye_undistort_theta(rd, dist_params.data());
        if (theta > pi<double> / 2.0 + kFisheyeThetaMargin || theta < 0) return false;
        const double st = std::sin(theta);
        dir = {float(st * xd / rd), float(st * yd / rd), float(std::cos(theta))};
        return true;
      }
    }
    return false;
  }

  // Projects a camera-space point/direction to pixel coordinates. Returns
  // false behind the camera (pinhole models) or past the fisheye validity.
  bool project(Vec3f dir_cam, Vec2f& pixel) const {
    const double x = dir_cam.x, y = dir_cam.y, z = dir_cam.z;
    switch (distortion) {
      case DistortionType::None: {
        if (z <= 0) return false;
        pixel = {float(fx * (x / z) + cx), float(fy * (y / z) + cy)};
        return true;
      }
      case DistortionType::OpenCvPinhole: {
        if (z <= 0) return false;
        const Vec2d p = distortion::radtan_distort({x / z, y / z}, dist_params.data());
        pixel = {float(fx * p.x + cx), float(fy * p.y + cy)};
        return true;
      }
      case DistortionType::OpenCvFisheye: {
        const double r = std::sqrt(x * x + y * y);
        const double theta = std::atan2(r, z);
        if (theta > pi<double> / 2.0 + kFisheyeThetaMargin) return false;
        const double theta_d = distortion::fisheye_theta_d(theta, dist_params.data());
        if (r < 1e-12) {
          pixel = {float(cx), float(cy)};
          return true;
        }
        pixel = {float(fx * theta_d * (x / r) + cx), float(fy * theta_d * (y / r) + cy)};
        return true;
      }
    }
    return false;
  }
};

struct CameraRay {
  Vec3f o{0, 0, 0};
  Vec3f d{0, 0, 1};
  float time = 0;
  bool valid = true;
};

namespace detail {

// R2 low-discrepancy sequence with a per-pixel Cranley-Patterson shift.
inline Vec2f ld_sample2(uint32_t index, uint64_t pixel_hash) {
  const double a1 = 0.7548776662466927;
  const double a2 = 0.5698402909980532;
  const double s1 = double(splitmix64(pixel_hash) >> 11) * 0x1p-53;
  const double s2 = double(splitmix64(pixel_hash ^ 0x9e3779b97f4a7c15ull) >> 11) * 0x1p-53;
  double u = s1 + a1 * double(index + 1);
  double v = s2 + a2 * double(index + 1);
  return {float(u - std::floor(u)), float(v - std::floor(v))};
}

// Concentric map from the unit square to the unit disk.
inline Vec2f concentric_disk(Vec2f u) {
  const float ox = 2.0f * u.x - 1.0f;
  const float oy = 2.0f * u.y - 1.0f;
  if (ox == 0 && oy == 0) return {0, 0};
  float r, phi;
  if (std::abs(ox) > std::abs(oy)) {
    r = ox;
    phi = (pi<float> / 4.0f) * (oy / ox);
  } else {
    r = oy;
    phi = (pi<float> / 2.0f) - (pi<float> / 4.0f) * (ox / oy);
  }
  return {r * std::cos(phi), r * std::sin(phi)};
}

}  // namespace detail

// Generates the world-space ray of a pixel sample. Sample 0 uses the pixel
// center; samples >= 1 jitter stratified inside the pixel. With a nonzero
// aperture the origin moves on the lens disk (low-discrepancy points) and the
// direction re-aims at the in-focus point.
inline CameraRay generate_pixel_ray(const CameraModel& cam, int px, int py, int sample_index,
                                    Pcg32& rng) {
  CameraRay ray;
  float u = float(px) + 0.5f;
  float v = float(py) + 0.5f;
  if (sample_index >= 1) {
    u = float(px) + rng.uniform();
    v = float(py) + rng.uniform();
  }
  Vec3f dir_cam;
  if (!cam.unproject(u, v, dir_cam)) {
    ray.valid = false;
    return ray;
  }
  ray.time = cam.shutter_time(u, v);
  const Pose pose = cam.pose_at(ray.time);
  const Mat3f R = quat_to_mat3(pose.q);

  Vec3f o_cam{0, 0, 0};
  if (cam.aperture_radius > 0.0f) {
    const uint64_t pixel_hash =
        (uint64_t(uint32_t(px)) << 32) ^ uint64_t(uint32_t(py)) ^ 0xabcd1234ull;
    const Vec2f disk =
        cam.aperture_radius * detail::concentric_disk(detail::ld_sample2(
                                  uint32_t(sample_index), pixel_hash));
    // in-focus point along the primary ray at the focal plane z = focus_distance
    const Vec3f focus = dir_cam * (cam.focus_distance / std::max(dir_cam.z, 1e-6f));
    o_cam = {disk.x, disk.y, 0};
    dir_cam = normalize(focus - o_cam);
  }
  ray.o = R * o_cam + pose.t;
  ray.d = normalize(R * dir_cam);
  return ray;
}

// ---------------------------------------------------------------------------
// Incoherent-ray training batches

struct RayBundle {
  std::vector<Vec3f> origins;
  std::vector<Vec3f> directions;
  std::vector<uint32_t> view_ids;
  std::vector<uint32_t> pixel_ids;  // py * width + px within the view
  std::vector<float> timestamps;
  std::vector<Vec3f> targets;  // ground-truth linear colors

  size_t size() const { return origins.size(); }
};

struct TrainingView {
  CameraModel camera;
  Image image;
};

// Uniform stochastic sampling over (view, pixel) pairs. When `batch_size`
// equals the total pixel count and `exhaustive` is set, every pixel is
// emitted exactly once (shuffled).
inline RayBundle sample_incoherent_batch(const std::vector<TrainingView>& views,
                                         size_t batch_size, Pcg32& rng,
                                         bool exhaustive = false) {
  RayBundle bundle;
  if (views.empty()) return bundle;
  bundle.origins.reserve(batch_size);
  bundle.directions.reserve(batch_size);
  bundle.view_ids.reserve(batch_size);
  bundle.pixel_ids.reserve(batch_size);
  bundle.timestamps.reserve(batch_size);
  bundle.targets.reserve(batch_size);

  std::vector<size_t> prefix(views.size() + 1, 0);
  for (size_t i = 0; i < views.size(); ++i)
    prefix[i + 1] = prefix[i] + views[i].image.pixel_count();
  const size_t total = prefix.back();

  std::vector<uint64_t> flat;
  if (exhaustive && batch_size == total) {
    flat.resize(total);
    for (size_t i = 0; i < total; ++i) flat[i] = i;
    for (size_t i = total; i > 1; --i) std::swap(flat[i - 1], flat[rng.uniform_u32(uint32_t(i))]);
  }

  for (size_t s = 0; s < batch_size; ++s) {
    const uint64_t g = flat.empty() ? uint64_t(rng.uniform_double() * double(total)) % total
                                    : flat[s];
    const size_t view_id = size_t(std::upper_bound(prefix.begin(), prefix.end(), g) -
                                  prefix.begin()) -
                           1;
    const TrainingView& view = views[view_id];
    const uint32_t pix = uint32_t(g - prefix[view_id]);
    const int px = int(pix % uint32_t(view.image.width));
    const int py = int(pix / uint32_t(view.image.width));
    const CameraRay ray = generate_pixel_ray(view.camera, px, py, 0, rng);
    if (!ray.valid) continue;
    bundle.origins.push_back(ray.o);
    bundle.directions.push_back(ray.d);
    bundle.view_ids.push_back(uint32_t(view_id));
    bundle.pixel_ids.push_back(pix);
    bundle.timestamps.push_back(ray.time);
    bundle.targets.push_back(view.image.at(px, py));
  }
  return bundle;
}

}  // namespace gtrace
