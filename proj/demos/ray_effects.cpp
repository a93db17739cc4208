// SPDX-License-Identifier: Apache-2.0
//
// Secondary-ray effects demo: particles above a mirror floor, a diffuse wall
// with a point light casting particle shadows, and a depth-of-field render.

#include <cstdio>

#include "gtrace/render.hpp"
#include "gtrace/sceneio.hpp"

using namespace gtrace;

int main() {
  Pcg32 rng(5);
  BoundScene bound;
  for (int i = 0; i < 40; ++i) {
    Particle p;
    p.mu = {rng.uniform(-1, 1), rng.uniform(-0.2f, 1.0f), rng.uniform(-1, 1)};
    const float s = rng.uniform(0.06f, 0.18f);
    p.scale = {s, s, s};
    p.opacity = rng.uniform(0.5f, 0.95f);
    for (int c = 0; c < 3; ++c)
      p.sh[c * kShCoeffs] = logit(rng.uniform(0.2f, 0.9f)) / sh::C0<float>;
    bound.scene.push_back(p);
  }
  bound.rebuild(ProxyKind::IcosahedronClamped, 0.01f);

  MeshSet meshes;
  // mirror floor at y = -0.6
  meshes.append({{-4, -0.6f, -4}, {4, -0.6f, -4}, {4, -0.6f, 4}, {-4, -0.6f, 4}},
                {{0, 2, 1}, {0, 3, 2}}, {MeshMaterial::Type::Mirror, 1.5f, {1, 1, 1}});
  // diffuse back wall
  meshes.append({{-4, -0.6f, 3}, {4, -0.6f, 3}, {4, 4, 3}, {-4, 4, 3}}, {{0, 1, 2}, {0, 2, 3}},
                {MeshMaterial::Type::Diffuse, 1.0f, {0.7f, 0.7f, 0.75f}});
  meshes.build();
  std::vector<PointLight> lights = {{{0, 3, -2}, 1.0f}};

  CameraModel cam;
  cam.width = 320;
  cam.height = 240;
  cam.fx = cam.fy = 260;
  cam.cx = 160;
  cam.cy = 120;
  cam.pose0.t = {0, 0.4f, -3.5f};
  cam.pose1 = cam.pose0;

  RenderSettings s;
  s.threads = hardware_threads();
  s.t_min_transmittance = 0.001f;
  write_image(render_image_with_meshes(bound.view(), meshes, lights, cam, s),
              "demo_effects.png");

  cam.aperture_radius = 0.08f;
  cam.focus_distance = 3.5f;
  s.spp = 32;
  write_image(render_image(bound.view(), cam, s), "demo_dof.png");
  std::printf("wrote demo_effects.png / demo_dof.png\n");
  return 0;
}
