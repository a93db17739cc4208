// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference renderer used by tests and the acceptance suite. No
// acceleration structure and no k-buffer scheduling: every particle's proxy
// polyhedron is intersected directly, all front-face entry hits are sorted
// globally by (t, primitive), and the hits are blended with the identical
// per-hit sample math as the production tracer (shared particles module).
// The double instantiation is the 64-bit forward used by the
// finite-difference gradient oracle.

#pragma once

#include <algorithm>
#include <vector>

#include "gtrace/particle.hpp"
#include "gtrace/proxy.hpp"
#include "gtrace/tracer.hpp"

namespace gtrace {

template <typename T>
struct OracleScene {
  std::vector<ParticleT<T>> particles;
  std::vector<Vec3<T>> vertices;
  std::vector<std::array<uint32_t, 3>> triangles;
  std::vector<uint32_t> prim_to_particle;
  std::vector<uint32_t> particle_prim_first;
  std::vector<uint8_t> two_sided;
  Aabb<T> box;
  // conservative per-particle bounding spheres, a pure pre-filter
  std::vector<Vec3<T>> sphere_center;
  std::vector<T> sphere_radius;

  void finalize() {
    box = Aabb<T>{};
    for (const auto& v : vertices) box.expand(v);
    const size_t n = particles.size();
    sphere_center.assign(n, Vec3<T>{0, 0, 0});
    sphere_radius.assign(n, T(0));
    for (size_t i = 0; i < n; ++i) {
      sphere_center[i] = particles[i].mu;
      T r = 0;
      for (uint32_t f = particle_prim_first[i]; f < particle_prim_first[i + 1]; ++f)
        for (uint32_t c = 0; c < 3; ++c)
          r = std::max(r, length(vertices[triangles[f][c]] - particles[i].mu));
      sphere_radius[i] = r * T(1.001) + T(1e-6);
    }
  }
};

// Float oracle: shares the proxy geometry *data* with production so triangle
// hit distances are bit-identical; collection, ordering and blending are
// independent of the traversal code under test.
inline OracleScene<float> make_oracle_scene(const Scene& scene, const ProxySet& proxies) {
  OracleScene<float> os;
  os.particles = scene;
  os.vertices = proxies.vertices;
  os.triangles = proxies.triangles;
  os.prim_to_particle = proxies.prim_to_particle;
  os.particle_prim_first = proxies.particle_prim_first;
  os.two_sided = proxies.two_sided;
  os.finalize();
  return os;
}

// Double oracle: rebuilds the stretched polyhedra in 64-bit from scratch.
inline OracleScene<double> make_oracle_scene(const std::vector<ParticleT<double>>& particles,
                                             ProxyKind kind, double alpha_min) {
  OracleScene<double> os;
  os.particles = particles;
  os.particle_prim_first.push_back(0);
  for (const auto& p : particles) {
    if (p.opacity > alpha_min) {
      const bool unclamped = kind == ProxyKind::IcosahedronUnclamped;
      const double sig = unclamped ? 1.0 : p.opacity;
      double r = std::sqrt(2.0 * std::log(sig / alpha_min));
      if (p.kernel == KernelType::GeneralizedGaussian)
        r = std::pow(2.0 * std::log(sig / alpha_min), 1.0 / (2.0 * p.gg_n));
      const Mat3<double> R = quat_to_mat3(p.quat);
      Vec3<double> s{std::max(p.scale.x, 1e-8), std::max(p.scale.y, 1e-8),
                     p.kernel == KernelType::Surface2D ? 0.0 : std::max(p.scale.z, 1e-8)};
      const uint32_t base = uint32_t(os.vertices.size());
      const uint32_t pid = uint32_t(&p - particles.data());
      if (p.kernel == KernelType::Surface2D) {
        const Vec3<double> ex = R * Vec3<double>{s.x * r, 0, 0};
        const Vec3<double> ey = R * Vec3<double>{0, s.y * r, 0};
        os.vertices.push_back(p.mu - ex - ey);
        os.vertices.push_back(p.mu + ex - ey);
        os.vertices.push_back(p.mu - ex + ey);
        os.vertices.push_back(p.mu + ex + ey);
        os.triangles.push_back({base + 0, base + 1, base + 2});
        os.triangles.push_back({base + 1, base + 3, base + 2});
        os.prim_to_particle.insert(os.prim_to_particle.end(), 2, pid);
        os.two_sided.insert(os.two_sided.end(), 2, 1);
      } else {
        const CanonicalMesh& canon = (kind == ProxyKind::Octahedron)
                                         ? detail::canonical_octahedron()
                                         : detail::canonical_icosahedron();
        for (const auto& cv : canon.vertices)
          os.vertices.push_back(R * (s * (Vec3<double>(cv) * r)) + p.mu);
        for (const auto& f : canon.faces)
          os.triangles.push_back({f[0] + base, f[1] + base, f[2] + base});
        os.prim_to_particle.insert(os.prim_to_particle.end(), canon.faces.size(), pid);
        os.two_sided.insert(os.two_sided.end(), canon.faces.size(), 0);
      }
    }
    os.particle_prim_first.push_back(uint32_t(os.triangles.size()));
  }
  os.finalize();
  return os;
}

template <typename T>
struct OracleResult {
  Vec3<T> radiance{0, 0, 0};
  T transmittance = 1;
  T depth = 0;
  int gathered = 0;
  int blended = 0;
};

enum class OracleOrder : uint8_t { ProxyEntry = 0, MaxResponse = 1 };

// Per-hit signature items for discontinuity detection in gradient probes:
// particle id plus flags (blended, forward-clamped sample, past alpha clamp).
inline uint64_t signature_item(uint32_t pid, bool blended, bool clamped, bool alpha_clamped) {
  return (uint64_t(pid) << 3) | (uint64_t(blended) << 2) | (uint64_t(clamped) << 1) |
         uint64_t(alpha_clamped);
}

template <typename T>
OracleResult<T> oracle_render_ray(const OracleScene<T>& os, Vec3<T> o, Vec3<T> d, T alpha_min,
                                  T t_min_transmittance, int sh_degree,
                                  OracleOrder order = OracleOrder::ProxyEntry,
                                  std::vector<uint64_t>* signature = nullptr) {
  OracleResult<T> r;
  if (os.triangles.empty()) return r;
  const Vec3<T> inv_d = safe_inv_dir(d);
  T t0, t1;
  if (!ray_aabb(o, inv_d, os.box, T(0), std::numeric_limits<T>::max(), t0, t1)) return r;

  struct Hit {
    T t;      // proxy entry distance (ordering key unless MaxResponse)
    T sort_t; // ordering key
    uint32_t prim;
  };
  std::vector<Hit> hits;
  for (size_t p = 0; p < os.particles.size(); ++p) {
    if (os.particle_prim_first[p + 1] == os.particle_prim_first[p]) continue;
    // line-sphere pre-filter; purely conservative
    const Vec3<T> oc = os.sphere_center[p] - o;
    const T proj = dot(oc, d) / dot(d, d);
    const Vec3<T> closest = oc - proj * d;
    if (length_sq(closest) > os.sphere_radius[p] * os.sphere_radius[p]) continue;
    for (uint32_t f = os.particle_prim_first[p]; f < os.particle_prim_first[p + 1]; ++f) {
      const auto& tri = os.triangles[f];
      T t, u, v;
      bool front;
      if (!intersect_triangle(o, d, os.vertices[tri[0]], os.vertices[tri[1]],
                              os.vertices[tri[2]], t, u, v, front))
        continue;
      if (!front && !os.two_sided[f]) continue;
      if (t > detail::padded_far(t1)) continue;
      T sort_t = t;
      if (order == OracleOrder::MaxResponse && os.particles[p].kernel != KernelType::Surface2D)
        sort_t = std::max(max_response_t(os.particles[p], o, d), t);
      hits.push_back({t, sort_t, f});
    }
  }
  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    return a.sort_t < b.sort_t || (a.sort_t == b.sort_t && a.prim < b.prim);
  });

  uint32_t last_pid = UINT32_MAX;
  T last_t = std::numeric_limits<T>::lowest();
  for (const Hit& h : hits) {
    const uint32_t pid = os.prim_to_particle[h.prim];
    if (pid == last_pid && h.t == last_t) continue;  // grazing duplicate
    last_pid = pid;
    last_t = h.t;
    r.gathered++;
    const ParticleT<T>& p = os.particles[pid];
    const HitSample<T> hs = particle_ray_sample(p, o, d, d, h.t, sh_degree, alpha_min);
    if (!hs.finite) continue;
    if (signature)
      signature->push_back(signature_item(pid, hs.blended,
                                          hs.tau == h.t && p.kernel != KernelType::Surface2D,
                                          hs.alpha_raw >= T(kAlphaClamp)));
    if (!hs.blended) continue;
    r.radiance += (r.transmittance * hs.alpha) * hs.color;
    r.depth += r.transmittance * hs.alpha * hs.tau;
    r.blended++;
    r.transmittance *= T(1) - hs.alpha;
    if (r.transmittance <= t_min_transmittance) break;
  }
  r.depth += r.transmittance * t1;
  return r;
}

}  // namespace gtrace
