// SPDX-License-Identifier: Apache-2.0
//
// Bounding primitives: each particle is encapsulated by a stretched
// polyhedron that covers its full super-level set {rho_hat >= alpha_min}.
// Canonical polyhedra are normalized to a unit inscribed sphere, scaled by
// r = sqrt(2 log(sigma/alpha_min)) (generalized Gaussians:
// (2 log(sigma/alpha_min))^(1/2n)), stretched by S, rotated by R and
// translated to mu. Opacity inside the log term adaptively clamps the
// primitive; the "unclamped" variant replaces sigma by 1.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "gtrace/particle.hpp"

namespace gtrace {

enum class ProxyKind : uint8_t {
  IcosahedronClamped = 0,
  IcosahedronUnclamped = 1,
  Octahedron = 2,
  Aabb = 3,
  SurfaceQuad = 4,  // selected automatically for Surface2D particles
};

inline const char* proxy_kind_name(ProxyKind k) {
  switch (k) {
    case ProxyKind::IcosahedronClamped: return "icosahedron";
    case ProxyKind::IcosahedronUnclamped: return "icosahedron_unclamped";
    case ProxyKind::Octahedron: return "octahedron";
    case ProxyKind::Aabb: return "aabb";
    case ProxyKind::SurfaceQuad: return "surface_quad";
  }
  return "?";
}

struct CanonicalMesh {
  std::vector<Vec3f> vertices;  // unit inscribed sphere
  std::vector<std::array<uint32_t, 3>> faces;
};

namespace detail {

// Orients every face so its normal points away from the origin, then rescales
// vertices so the inscribed sphere has radius exactly 1.
inline CanonicalMesh normalize_canonical(CanonicalMesh m) {
  for (auto& f : m.faces) {
    Vec3f a = m.vertices[f[0]], b = m.vertices[f[1]], c = m.vertices[f[2]];
    Vec3f centroid = (a + b + c) / 3.0f;
    if (dot(cross(b - a, c - a), centroid) < 0) std::swap(f[1], f[2]);
  }
  float inradius = std::numeric_limits<float>::max();
  for (const auto& f : m.faces) {
    Vec3f a = m.vertices[f[0]], b = m.vertices[f[1]], c = m.vertices[f[2]];
    Vec3f n = normalize(cross(b - a, c - a));
    inradius = std::min(inradius, std::abs(dot(n, a)));
  }
  for (auto& v : m.vertices) v = v / inradius;
  return m;
}

inline const CanonicalMesh& canonical_icosahedron() {
  static const CanonicalMesh mesh = [] {
    const float p = (1.0f + std::sqrt(5.0f)) / 2.0f;
    CanonicalMesh m;
    m.vertices = {{-1, p, 0}, {1, p, 0},   {-1, -p, 0}, {1, -p, 0},
                  {0, -1, p}, {0, 1, p},   {0, -1, -p}, {0, 1, -p},
                  {p, 0, -1}, {p, 0, 1},   {-p, 0, -1}, {-p, 0, 1}};
    m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
               {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
               {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
               {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
    return normalize_canonical(std::move(m));
  }();
  return mesh;
}

inline const CanonicalMesh& canonical_octahedron() {
  static const CanonicalMesh mesh = [] {
    CanonicalMesh m;
    m.vertices = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    m.faces = {{0, 2, 4}, {2, 1, 4}, {1, 3, 4}, {3, 0, 4},
               {2, 0, 5}, {1, 2, 5}, {3, 1, 5}, {0, 3, 5}};
    return normalize_canonical(std::move(m));
  }();
  return mesh;
}

inline const std::array<std::array<uint32_t, 3>, 12>& box_faces() {
  // corners indexed by bit pattern (x | y<<1 | z<<2) of lo/hi selection
  static const std::array<std::array<uint32_t, 3>, 12> faces = {{{0, 2, 1},
                                                                 {1, 2, 3},
                                                                 {4, 5, 6},
                                                                 {5, 7, 6},
                                                                 {0, 1, 4},
                                                                 {1, 5, 4},
                                                                 {2, 6, 3},
                                                                 {3, 6, 7},
                                                                 {0, 4, 2},
                                                                 {2, 4, 6},
                                                                 {1, 3, 5},
                                                                 {3, 7, 5}}};
  return faces;
}

}  // namespace detail

// Scale factor applied to the unit-inscribed-sphere polyhedron (Eq. 7 radius).
inline float proxy_radius(float sigma, float alpha_min, KernelType kernel, float gg_n,
                          bool unclamped) {
  const float s = unclamped ? 1.0f : sigma;
  const float two_log = 2.0f * std::log(s / alpha_min);
  if (two_log <= 0) return 0.0f;
  if (kernel == KernelType::GeneralizedGaussian)
    return std::pow(two_log, 1.0f / (2.0f * gg_n));
  return std::sqrt(two_log);
}

struct ProxySet {
  std::vector<Vec3f> vertices;
  std::vector<std::array<uint32_t, 3>> triangles;
  std::vector<uint32_t> prim_to_particle;
  std::vector<uint32_t> particle_prim_first;  // size n_particles+1; empty range = no proxy
  std::vector<uint8_t> two_sided;             // per primitive; surface quads only
  ProxyKind kind = ProxyKind::IcosahedronClamped;

  size_t primitive_count() const { return triangles.size(); }
  bool particle_has_proxy(uint32_t i) const {
    return particle_prim_first[i + 1] > particle_prim_first[i];
  }
};

namespace detail {

template <typename Emit>
inline void emit_particle_proxy(const Particle& p, ProxyKind kind, float alpha_min,
                                Emit&& emit_mesh) {
  if (!(p.opacity > alpha_min)) return;  // below threshold everywhere: no proxy
  const bool unclamped = kind == ProxyKind::IcosahedronUnclamped;
  const float r = proxy_radius(p.opacity, alpha_min, p.kernel, p.gg_n, unclamped);
  const Mat3f R = quat_to_mat3(p.quat);
  const Vec3f s = safe_scale(p);

  if (p.kernel == KernelType::Surface2D) {
    const Vec3f ex = R * Vec3f{s.x * r, 0, 0};
    const Vec3f ey = R * Vec3f{0, s.y * r, 0};
    const Vec3f corners[4] = {p.mu - ex - ey, p.mu + ex - ey, p.mu - ex + ey, p.mu + ex + ey};
    const std::array<uint32_t, 3> faces[2] = {{0, 1, 2}, {1, 3, 2}};
    emit_mesh(corners, 4, faces, 2, /*two_sided=*/true);
    return;
  }

  const CanonicalMesh& canon = (kind == ProxyKind::Octahedron) ? canonical_octahedron()
                                                               : canonical_icosahedron();
  Vec3f verts[12];
  for (size_t i = 0; i < canon.vertices.size(); ++i)
    verts[i] = R * (s * (canon.vertices[i] * r)) + p.mu;

  if (kind == ProxyKind::Aabb) {
    Aabbf box;
    for (size_t i = 0; i < canon.vertices.size(); ++i) box.expand(verts[i]);
    Vec3f corners[8];
    for (int c = 0; c < 8; ++c)
      corners[c] = {c & 1 ? box.hi.x : box.lo.x, c & 2 ? box.hi.y : box.lo.y,
                    c & 4 ? box.hi.z : box.lo.z};
    emit_mesh(corners, 8, box_faces().data(), 12, false);
    return;
  }
  emit_mesh(verts, canon.vertices.size(), canon.faces.data(), canon.faces.size(), false);
}

}  // namespace detail

// Appends one particle's proxy to the set. Returns false when the particle is
// skipped (sigma <= alpha_min).
inline bool build_proxy(const Particle& p, uint32_t particle_index, ProxyKind kind,
                        float alpha_min, ProxySet& out) {
  bool emitted = false;
  detail::emit_particle_proxy(
      p, kind, alpha_min,
      [&](const Vec3f* verts, size_t nv, const std::array<uint32_t, 3>* faces, size_t nf,
          bool two_sided) {
        const uint32_t base = uint32_t(out.vertices.size());
        out.vertices.insert(out.vertices.end(), verts, verts + nv);
        for (size_t f = 0; f < nf; ++f) {
          out.triangles.push_back({faces[f][0] + base, faces[f][1] + base, faces[f][2] + base});
          out.prim_to_particle.push_back(particle_index);
          out.two_sided.push_back(two_sided ? 1 : 0);
        }
        emitted = true;
      });
  return emitted;
}

// Builds the full proxy set; deterministic ordering by particle index.
inline ProxySet rebuild_proxies(const Scene& scene, ProxyKind kind, float alpha_min) {
  ProxySet set;
  set.kind = kind;
  set.particle_prim_first.reserve(scene.size() + 1);
  set.particle_prim_first.push_back(0);
  for (uint32_t i = 0; i < scene.size(); ++i) {
    build_proxy(scene[i], i, kind, alpha_min, set);
    set.particle_prim_first.push_back(uint32_t(set.triangles.size()));
  }
  return set;
}

// Recomputes vertex positions in place after a parameter update. Returns
// false when the set of particles owning a proxy changed (or a kernel switched
// primitive shape); the caller must rebuild instead.
inline bool update_proxies(const Scene& scene, float alpha_min, ProxySet& set) {
  if (set.particle_prim_first.size() != scene.size() + 1) return false;
  size_t vcursor = 0;
  for (uint32_t i = 0; i < scene.size(); ++i) {
    const uint32_t nf = set.particle_prim_first[i + 1] - set.particle_prim_first[i];
    bool replaced = false;
    bool mismatch = false;
    detail::emit_particle_proxy(
        scene[i], set.kind, alpha_min,
        [&](const Vec3f* verts, size_t nv, const std::array<uint32_t, 3>*, size_t emitted_nf,
            bool) {
          if (emitted_nf != nf || vcursor + nv > set.vertices.size()) {
            mismatch = true;
            return;
          }
          for (size_t v = 0; v < nv; ++v) set.vertices[vcursor + v] = verts[v];
          vcursor += nv;
          replaced = true;
        });
    if (mismatch) return false;
    if (!replaced && nf != 0) return false;  // had a proxy, now skipped
  }
  return vcursor == set.vertices.size();
}

}  // namespace gtrace
