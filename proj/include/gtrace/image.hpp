// SPDX-License-Identifier: Apache-2.0
//
// Linear-RGB image container plus the sRGB transfer and quality metrics.
// All radiance math happens in linear space; sRGB is applied only at image
// I/O boundaries. PSNR/SSIM metrics are computed in the quantized 8-bit sRGB
// domain to match the reporting convention of the reconstruction literature.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "gtrace/math.hpp"

namespace gtrace {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<Vec3f> pixels;  // linear RGB

  Image() = default;
  Image(int w, int h) : width(w), height(h), pixels(size_t(w) * size_t(h)) {}

  Vec3f& at(int x, int y) { return pixels[size_t(y) * size_t(width) + size_t(x)]; }
  const Vec3f& at(int x, int y) const { return pixels[size_t(y) * size_t(width) + size_t(x)]; }
  size_t pixel_count() const { return pixels.size(); }
};

inline float linear_to_srgb(float c) {
  c = clamp(c, 0.0f, 1.0f);
  return c <= 0.0031308f ? 12.92f * c : 1.055f * std::pow(c, 1.0f / 2.4f) - 0.055f;
}

inline float srgb_to_linear(float c) {
  c = clamp(c, 0.0f, 1.0f);
  return c <= 0.04045f ? c / 12.92f : std::pow((c + 0.055f) / 1.055f, 2.4f);
}

inline uint8_t quantize8(float srgb) {
  return uint8_t(clamp(int(std::lround(srgb * 255.0f)), 0, 255));
}

// PSNR in the 8-bit sRGB domain.
inline double psnr_srgb(const Image& a, const Image& b) {
  double mse = 0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double qa = quantize8(linear_to_srgb(a.pixels[i][c])) / 255.0;
      const double qb = quantize8(linear_to_srgb(b.pixels[i][c])) / 255.0;
      mse += (qa - qb) * (qa - qb);
    }
  }
  mse /= double(a.pixels.size() * 3);
  if (mse <= 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

inline float max_abs_diff(const Image& a, const Image& b) {
  float m = 0;
  for (size_t i = 0; i < a.pixels.size(); ++i)
    for (int c = 0; c < 3; ++c) m = std::max(m, std::abs(a.pixels[i][c] - b.pixels[i][c]));
  return m;
}

}  // namespace gtrace
