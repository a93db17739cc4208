// SPDX-License-Identifier: Apache-2.0
//
// Forward renderer. A ray-gen loop repeatedly casts the ray against the
// proxy BVH to gather the next k front-face hits into a depth-sorted buffer
// (the any-hit callback keeps the k closest and accepts the k-th to shrink
// the traversal interval), then integrates each gathered particle in proxy
// entry order. Rounds resume from an exact lexicographic (t, prim) cursor so
// the hit sequence partitions identically for every k. Also implements the
// ablation variants (naive closest-hit, slab, MLAT, tiled, stochastic depth
// sampling), mesh interop with reflection/refraction/shadows, and instanced
// composite scenes.

#pragma once

#include <cassert>
#include <cstdint>
#include <vector>

#include "gtrace/bvh.hpp"
#include "gtrace/particle.hpp"
#include "gtrace/proxy.hpp"

namespace gtrace {

enum class TraceAlgorithm : uint8_t {
  KBuffer = 0,
  NaiveClosestHit = 1,
  Slab = 2,
  Mlat = 3,
  Tiled = 4,
  StochasticDepth = 5,
};

enum class MlatMergeRule : uint8_t { NearestPair = 0, LastTwo = 1 };

struct RenderSettings {
  int k = 16;
  float alpha_min = 0.01f;
  float t_min_transmittance = 0.03f;  // 0.001 during training
  int sh_degree = 3;
  TraceAlgorithm algorithm = TraceAlgorithm::KBuffer;
  uint64_t seed = 1;
  int spp = 1;
  int threads = 1;
  int tile_size = 2;                               // Tiled(N)
  int slab_count = 16;                             // Slab
  MlatMergeRule mlat_merge = MlatMergeRule::NearestPair;
  int max_bounces = 8;
};

struct RayResult {
  Vec3f radiance{0, 0, 0};
  float transmittance = 1.0f;
  float depth = 0.0f;  // transmittance-weighted expected distance
  int hit_count = 0;   // gathered (response-evaluated) proxy hits
  int blended_count = 0;
  int skipped_nonfinite = 0;
};

// A renderable particle scene: particles + proxies + BVH over the proxies.
struct SceneView {
  const Scene* scene = nullptr;
  const ProxySet* proxies = nullptr;
  const TriangleBvh* bvh = nullptr;
};

// Builds proxies and BVH for a scene in one go; owns the derived structures.
struct BoundScene {
  Scene scene;
  ProxySet proxies;
  TriangleBvh bvh;

  void rebuild(ProxyKind kind, float alpha_min) {
    proxies = rebuild_proxies(scene, kind, alpha_min);
    bvh.build(proxies.vertices, proxies.triangles);
  }
  // Parameter updates without topology change: recompute vertices + refit.
  // Falls back to a full rebuild when the proxy set changed shape.
  void update(float alpha_min) {
    if (update_proxies(scene, alpha_min, proxies))
      bvh.refit();
    else
      rebuild(proxies.kind, alpha_min);
  }
  SceneView view() const { return {&scene, &proxies, &bvh}; }
};

// ---------------------------------------------------------------------------
// k-buffer

struct HitEntry {
  float t = 0;
  uint64_t key = 0;  // (instance << 32) | prim; total order with t
};

inline bool hit_less(float ta, uint64_t ka, float tb, uint64_t kb) {
  return ta < tb || (ta == tb && ka < kb);
}

struct HitBuffer {
  static constexpr int kMaxK = 256;
  std::array<HitEntry, kMaxK> entries;
  int k = 16;
  int count = 0;

  void reset(int k_) {
    k = std::min(k_, kMaxK);
    count = 0;
  }

  // Proc.-2 insertion: keep the k closest sorted ascending; accept a hit that
  // is not among them (or that lands exactly last) so traversal shrinks.
  HitDecision insert(float t, uint64_t key) {
    if (count == k && !hit_less(t, key, entries[count - 1].t, entries[count - 1].key))
      return HitDecision::Accept;
    int pos = std::min(count, k - 1);
    if (count < k) ++count;
    while (pos > 0 && hit_less(t, key, entries[pos - 1].t, entries[pos - 1].key)) {
      entries[pos] = entries[pos - 1];
      --pos;
    }
    entries[pos] = {t, key};
    return (count == k && pos == count - 1) ? HitDecision::Accept : HitDecision::Ignore;
  }
};

namespace detail {

inline float prev_float(float x) {
  return std::nextafter(x, -std::numeric_limits<float>::infinity());
}

// Triangle hits at the scene-box exit can round a few ulps past the slab
// test's t; pad the far bound so they are kept (the oracle uses the same
// bound, keeping hit sets identical).
template <typename T>
inline T padded_far(T t1) {
  return t1 + std::max(T(1e-6), T(1e-6) * std::abs(t1));
}

// Per-ray march state shared by the forward walk and the gradient replay.
struct MarchCursor {
  float t = 0;
  int64_t key = -1;           // last processed (t,key); -1 admits t == start
  uint32_t last_particle = UINT32_MAX;
  float last_particle_t = std::numeric_limits<float>::lowest();
  uint64_t last_instance = UINT64_MAX;
};

}  // namespace detail

struct WalkStats {
  float transmittance = 1.0f;
  int gathered = 0;
  int blended = 0;
  int skipped_nonfinite = 0;
  bool reached_tmin = false;
  float scene_t0 = 0, scene_t1 = 0;
  bool scene_hit = false;
};

// Core Proc.-1 march over a plain scene. Calls
//   visit(particle_index, entry_t, sample)
// for every blended hit, in exact integration order, maintaining the
// transmittance product and per-hit early termination. `t_clip` truncates the
// march (mesh interop); pass +inf otherwise.
template <typename Visitor>
WalkStats walk_ray(const SceneView& view, Vec3f o, Vec3f d, float t_clip,
                   const RenderSettings& s, Visitor&& visit) {
  WalkStats st;
  if (view.bvh->empty()) return st;
  const Vec3f inv_d = safe_inv_dir(d);
  float t0, t1;
  if (!ray_aabb(o, inv_d, view.bvh->scene_box(), 0.0f, std::numeric_limits<float>::max(), t0,
                t1))
    return st;
  st.scene_hit = true;
  st.scene_t0 = t0;
  st.scene_t1 = t1;
  const float t_far = std::min(detail::padded_far(t1), t_clip);

  HitBuffer buffer;
  detail::MarchCursor cur;
  cur.t = 0.0f;  // the cursor, not the box entry: boundary hits may round below t0
  const uint8_t* two_sided = view.proxies->two_sided.empty() ? nullptr
                                                             : view.proxies->two_sided.data();
  const auto& prim_to_particle = view.proxies->prim_to_particle;

  while (true) {
    buffer.reset(s.k);
    view.bvh->traverse_anyhit(
        o, d, detail::prev_float(cur.t), t_far,
        [&](float t, uint32_t prim) {
          // only hits lexicographically beyond the cursor
          if (cur.key < 0) {
            if (t < cur.t) return HitDecision::Ignore;
          } else if (!hit_less(cur.t, uint64_t(cur.key), t, prim)) {
            return HitDecision::Ignore;
          }
          return buffer.insert(t, prim);
        },
        two_sided);
    if (buffer.count == 0) break;

    const bool full = buffer.count == buffer.k;
    for (int i = 0; i < buffer.count; ++i) {
      const float t = buffer.entries[i].t;
      const uint32_t prim = uint32_t(buffer.entries[i].key);
      cur.t = t;
      cur.key = int64_t(prim);
      const uint32_t pid = prim_to_particle[prim];
      if (pid == cur.last_particle && t == cur.last_particle_t) continue;  // grazing dup
      cur.last_particle = pid;
      cur.last_particle_t = t;
      st.gathered++;
      const HitSample<float> h =
          particle_ray_sample((*view.scene)[pid], o, d, d, t, s.sh_degree, s.alpha_min);
      if (!h.finite) {
        st.skipped_nonfinite++;
        continue;
      }
      if (!h.blended) continue;
      visit(pid, t, h, st.transmittance);
      st.blended++;
      st.transmittance *= 1.0f - h.alpha;
      if (st.transmittance <= s.t_min_transmittance) {
        st.reached_tmin = true;
        return st;
      }
    }
    if (!full) break;
  }
  return st;
}

namespace detail {

inline void accumulate(RayResult& r, const HitSample<float>& h, float T_before) {
  r.radiance += (T_before * h.alpha) * h.color;
  r.depth += T_before * h.alpha * h.tau;
}

inline void finish(RayResult& r, const WalkStats& st) {
  r.transmittance = st.transmittance;
  r.hit_count = st.gathered;
  r.blended_count = st.blended;
  r.skipped_nonfinite = st.skipped_nonfinite;
  if (st.scene_hit) r.depth += st.transmittance * st.scene_t1;
  assert(is_finite(r.radiance) && std::isfinite(r.transmittance));
}

}  // namespace detail

// Proc.-1 k-buffer forward trace. d must be normalized.
inline RayResult trace_ray(const SceneView& view, Vec3f o, Vec3f d, const RenderSettings& s) {
  RayResult r;
  const WalkStats st = walk_ray(view, o, d, std::numeric_limits<float>::max(), s,
                                [&](uint32_t, float, const HitSample<float>& h, float T) {
                                  detail::accumulate(r, h, T);
                                });
  detail::finish(r, st);
  return r;
}

// ---------------------------------------------------------------------------
// Ablation variants

namespace detail {

// Repeated closest-hit tracing; same per-hit math and order as the k-buffer,
// so the output is identical and only traversal cost differs.
inline RayResult trace_naive(const SceneView& view, Vec3f o, Vec3f d, const RenderSettings& s) {
  RayResult r;
  WalkStats st;
  if (view.bvh->empty()) {
    finish(r, st);
    return r;
  }
  const Vec3f inv_d = safe_inv_dir(d);
  float t0, t1;
  if (!ray_aabb(o, inv_d, view.bvh->scene_box(), 0.0f, std::numeric_limits<float>::max(), t0,
                t1)) {
    finish(r, st);
    return r;
  }
  st.scene_hit = true;
  st.scene_t0 = t0;
  st.scene_t1 = t1;
  const float t_far = padded_far(t1);
  const uint8_t* two_sided = view.proxies->two_sided.empty() ? nullptr
                                                             : view.proxies->two_sided.data();
  MarchCursor cur;
  cur.t = 0.0f;
  while (true) {
    float best_t = 0;
    int64_t best_prim = -1;
    view.bvh->traverse_anyhit(
        o, d, prev_float(cur.t), t_far,
        [&](float t, uint32_t prim) {
          if (cur.key >= 0 && !hit_less(cur.t, uint64_t(cur.key), t, prim))
            return HitDecision::Ignore;
          if (cur.key < 0 && t < cur.t) return HitDecision::Ignore;
          if (best_prim >= 0 && !hit_less(t, prim, best_t, uint64_t(best_prim)))
            return HitDecision::Ignore;
          best_t = t;
          best_prim = int64_t(prim);
          return HitDecision::Accept;
        },
        two_sided);
    if (best_prim < 0) break;
    cur.t = best_t;
    cur.key = best_prim;
    const uint32_t pid = view.proxies->prim_to_particle[uint32_t(best_prim)];
    if (pid == cur.last_particle && best_t == cur.last_particle_t) continue;
    cur.last_particle = pid;
    cur.last_particle_t = best_t;
    st.gathered++;
    const HitSample<float> h =
        particle_ray_sample((*view.scene)[pid], o, d, d, best_t, s.sh_degree, s.alpha_min);
    if (!h.finite) {
      st.skipped_nonfinite++;
      continue;
    }
    if (!h.blended) continue;
    accumulate(r, h, st.transmittance);
    st.blended++;
    st.transmittance *= 1.0f - h.alpha;
    if (st.transmittance <= s.t_min_transmittance) {
      st.reached_tmin = true;
      break;
    }
  }
  finish(r, st);
  return r;
}

// Slab tracing: one traversal per slab, order-independent collection of the
// first k hits encountered, sorted and integrated per slab. Hits beyond k in
// a slab are dropped (the variant's documented approximation).
inline RayResult trace_slab(const SceneView& view, Vec3f o, Vec3f d, const RenderSettings& s) {
  RayResult r;
  WalkStats st;
  if (view.bvh->empty()) {
    finish(r, st);
    return r;
  }
  const Vec3f inv_d = safe_inv_dir(d);
  float t0, t1;
  if (!ray_aabb(o, inv_d, view.bvh->scene_box(), 0.0f, std::numeric_limits<float>::max(), t0,
                t1)) {
    finish(r, st);
    return r;
  }
  st.scene_hit = true;
  st.scene_t0 = t0;
  st.scene_t1 = t1;
  const uint8_t* two_sided = view.proxies->two_sided.empty() ? nullptr
                                                             : view.proxies->two_sided.data();
  const int n_slabs = std::max(1, s.slab_count);
  std::vector<HitEntry> collected;
  collected.reserve(size_t(s.k));
  for (int slab = 0; slab < n_slabs; ++slab) {
    const float a = t0 + (t1 - t0) * float(slab) / float(n_slabs);
    const float b = t0 + (t1 - t0) * float(slab + 1) / float(n_slabs);
    collected.clear();
    view.bvh->traverse_anyhit(
        o, d, slab == 0 ? 0.0f : a, slab == n_slabs - 1 ? padded_far(b) : b,
        [&](float t, uint32_t prim) {
          if (int(collected.size()) < s.k) {
            collected.push_back({t, prim});
            return HitDecision::Ignore;
          }
          return HitDecision::Accept;  // buffer full: stop gathering this slab
        },
        two_sided);
    std::sort(collected.begin(), collected.end(), [](const HitEntry& x, const HitEntry& y) {
      return hit_less(x.t, x.key, y.t, y.key);
    });
    for (const HitEntry& e : collected) {
      const uint32_t pid = view.proxies->prim_to_particle[uint32_t(e.key)];
      st.gathered++;
      const HitSample<float> h =
          particle_ray_sample((*view.scene)[pid], o, d, d, e.t, s.sh_degree, s.alpha_min);
      if (!h.finite) {
        st.skipped_nonfinite++;
        continue;
      }
      if (!h.blended) continue;
      accumulate(r, h, st.transmittance);
      st.blended++;
      st.transmittance *= 1.0f - h.alpha;
      if (st.transmittance <= s.t_min_transmittance) {
        st.reached_tmin = true;
        finish(r, st);
        return r;
      }
    }
  }
  finish(r, st);
  return r;
}

// Multi-layer alpha tracing: a single traversal keeps a k-deep layer array;
// when full, two layers are merged (nearest pair or last two) to make room.
inline RayResult trace_mlat(const SceneView& view, Vec3f o, Vec3f d, const RenderSettings& s) {
  RayResult r;
  WalkStats st;
  if (view.bvh->empty()) {
    finish(r, st);
    return r;
  }
  const Vec3f inv_d = safe_inv_dir(d);
  float t0, t1;
  if (!ray_aabb(o, inv_d, view.bvh->scene_box(), 0.0f, std::numeric_limits<float>::max(), t0,
                t1)) {
    finish(r, st);
    return r;
  }
  st.scene_hit = true;
  st.scene_t0 = t0;
  st.scene_t1 = t1;
  struct Layer {
    float t;
    float alpha;
    Vec3f color;
    float tau;
  };
  std::vector<Layer> layers;
  layers.reserve(size_t(s.k));
  const uint8_t* two_sided = view.proxies->two_sided.empty() ? nullptr
                                                             : view.proxies->two_sided.data();
  auto merge_into = [](Layer& near, const Layer& far) {
    const float am = near.alpha + far.alpha * (1.0f - near.alpha);
    if (am > 0)
      near.color = (near.alpha * near.color + (far.alpha * (1.0f - near.alpha)) * far.color) /
                   am;
    near.alpha = std::min(am, kAlphaClamp);
  };
  view.bvh->traverse_anyhit(
      o, d, 0.0f, padded_far(t1),
      [&](float t, uint32_t prim) {
        const uint32_t pid = view.proxies->prim_to_particle[prim];
        st.gathered++;
        const HitSample<float> h =
            particle_ray_sample((*view.scene)[pid], o, d, d, t, s.sh_degree, s.alpha_min);
        if (!h.finite) {
          st.skipped_nonfinite++;
          return HitDecision::Ignore;
        }
        if (!h.blended) return HitDecision::Ignore;
        Layer layer{t, h.alpha, h.color, h.tau};
        auto pos = std::lower_bound(layers.begin(), layers.end(), layer,
                                    [](const Layer& x, const Layer& y) { return x.t < y.t; });
        layers.insert(pos, layer);
        if (int(layers.size()) > s.k) {
          size_t m = layers.size() - 2;  // LastTwo
          if (s.mlat_merge == MlatMergeRule::NearestPair) {
            float best_gap = std::numeric_limits<float>::max();
            for (size_t i = 0; i + 1 < layers.size(); ++i) {
              const float gap = layers[i + 1].t - layers[i].t;
              if (gap < best_gap) {
                best_gap = gap;
                m = i;
              }
            }
          }
          merge_into(layers[m], layers[m + 1]);
          layers.erase(layers.begin() + long(m) + 1);
        }
        return HitDecision::Ignore;  // never commit: traverse everything
      },
      two_sided);
  for (const Layer& l : layers) {
    r.radiance += (st.transmittance * l.alpha) * l.color;
    r.depth += st.transmittance * l.alpha * l.tau;
    st.blended++;
    st.transmittance *= 1.0f - l.alpha;
    if (st.transmittance <= s.t_min_transmittance) {
      st.reached_tmin = true;
      break;
    }
  }
  finish(r, st);
  return r;
}

// Stochastic depth sampling: hits enter the k-buffer only with probability
// equal to their kernel response. Accepted hits blend with the full
// deterministic alpha; the output is noisy and averaged over spp.
inline RayResult trace_stochastic(const SceneView& view, Vec3f o, Vec3f d,
                                  const RenderSettings& s, uint64_t ray_seed) {
  RayResult r;
  WalkStats st;
  if (view.bvh->empty()) {
    finish(r, st);
    return r;
  }
  const Vec3f inv_d = safe_inv_dir(d);
  float t0, t1;
  if (!ray_aabb(o, inv_d, view.bvh->scene_box(), 0.0f, std::numeric_limits<float>::max(), t0,
                t1)) {
    finish(r, st);
    return r;
  }
  st.scene_hit = true;
  st.scene_t0 = t0;
  st.scene_t1 = t1;
  const float t_far = padded_far(t1);
  const uint8_t* two_sided = view.proxies->two_sided.empty() ? nullptr
                                                             : view.proxies->two_sided.data();
  HitBuffer buffer;
  MarchCursor cur;
  cur.t = 0.0f;
  while (true) {
    buffer.reset(s.k);
    view.bvh->traverse_anyhit(
        o, d, prev_float(cur.t), t_far,
        [&](float t, uint32_t prim) {
          if (cur.key >= 0 && !hit_less(cur.t, uint64_t(cur.key), t, prim))
            return HitDecision::Ignore;
          if (cur.key < 0 && t < cur.t) return HitDecision::Ignore;
          const uint32_t pid = view.proxies->prim_to_particle[prim];
          const HitSample<float> h =
              particle_ray_sample((*view.scene)[pid], o, d, d, t, 0, s.alpha_min);
          if (!h.finite) return HitDecision::Ignore;
          // stateless acceptance: stable across rounds and traversal order
          if (hash01(ray_seed, (uint64_t(pid) << 1) | 1) >= h.alpha_raw)
            return HitDecision::Ignore;
          return buffer.insert(t, prim);
        },
        two_sided);
    if (buffer.count == 0) break;
    const bool full = buffer.count == buffer.k;
    for (int i = 0; i < buffer.count; ++i) {
      const float t = buffer.entries[i].t;
      const uint32_t prim = uint32_t(buffer.entries[i].key);
      cur.t = t;
      cur.key = int64_t(prim);
      const uint32_t pid = view.proxies->prim_to_particle[prim];
      if (pid == cur.last_particle && t == cur.last_particle_t) continue;
      cur.last_particle = pid;
      cur.last_particle_t = t;
      st.gathered++;
      const HitSample<float> h =
          particle_ray_sample((*view.scene)[pid], o, d, d, t, s.sh_degree, s.alpha_min);
      if (!h.finite || !h.blended) continue;
      accumulate(r, h, st.transmittance);
      st.blended++;
      st.transmittance *= 1.0f - h.alpha;
      if (st.transmittance <= s.t_min_transmittance) {
        st.reached_tmin = true;
        finish(r, st);
        return r;
      }
    }
    if (!full) break;
  }
  finish(r, st);
  return r;
}

}  // namespace detail

// Dispatch on the scheduling algorithm. Tiled is an image-level scheme and is
// handled by render_image; a single tiled ray falls back to the k-buffer.
inline RayResult trace_ray_variant(const SceneView& view, Vec3f o, Vec3f d,
                                   const RenderSettings& s, uint64_t ray_seed = 0) {
  switch (s.algorithm) {
    case TraceAlgorithm::NaiveClosestHit: return detail::trace_naive(view, o, d, s);
    case TraceAlgorithm::Slab: return detail::trace_slab(view, o, d, s);
    case TraceAlgorithm::Mlat: return detail::trace_mlat(view, o, d, s);
    case TraceAlgorithm::StochasticDepth:
      return detail::trace_stochastic(view, o, d, s, ray_seed ? ray_seed : s.seed);
    default: return trace_ray(view, o, d, s);
  }
}

// ---------------------------------------------------------------------------
// Meshes, lights and secondary rays

struct MeshMaterial {
  enum class Type : uint8_t { Mirror = 0, Refract = 1, Diffuse = 2 };
  Type type = Type::Diffuse;
  float ior = 1.5f;            // Refract only
  Vec3f albedo{0.8f, 0.8f, 0.8f};  // Diffuse only
};

struct MeshSet {
  std::vector<Vec3f> vertices;
  std::vector<std::array<uint32_t, 3>> triangles;
  std::vector<uint32_t> tri_material;
  std::vector<MeshMaterial> materials;
  TriangleBvh bvh;

  bool empty() const { return triangles.empty(); }
  void build() {
    if (!triangles.empty()) bvh.build(vertices, triangles);
  }
  void append(const std::vector<Vec3f>& verts,
              const std::vector<std::array<uint32_t, 3>>& tris, const MeshMaterial& mat) {
    const uint32_t vbase = uint32_t(vertices.size());
    const uint32_t mid = uint32_t(materials.size());
    materials.push_back(mat);
    vertices.insert(vertices.end(), verts.begin(), verts.end());
    for (const auto& t : tris) {
      triangles.push_back({t[0] + vbase, t[1] + vbase, t[2] + vbase});
      tri_material.push_back(mid);
    }
  }
};

struct PointLight {
  Vec3f position{0, 0, 0};
  float intensity = 1.0f;
};

// Particle transmittance from x to the light; mesh occlusion is binary.
template <typename View>
float shadow_factor(const View& view, const MeshSet* meshes, Vec3f x, Vec3f light_pos,
                    const RenderSettings& s) {
  const Vec3f to_light = light_pos - x;
  const float dist = length(to_light);
  if (dist <= 0) return 1.0f;
  const Vec3f dir = to_light / dist;
  const float eps = 1e-4f * (1.0f + dist);
  if (meshes && !meshes->empty()) {
    const auto mh = meshes->bvh.closest_hit(x, dir, eps, dist - eps, nullptr, true);
    if (mh.valid) return 0.0f;
  }
  const WalkStats st =
      view.march(x, dir, dist, s, [](uint32_t, float, const HitSample<float>&, float) {});
  return st.transmittance;
}

namespace detail {

inline Vec3f reflect(Vec3f d, Vec3f n) { return d - 2.0f * dot(d, n) * n; }

// Snell refraction with total-internal-reflection fallback to a mirror.
inline Vec3f refract_or_reflect(Vec3f d, Vec3f n, float ior) {
  float cos_i = -dot(d, n);
  float eta = 1.0f / ior;
  if (cos_i < 0) {  // exiting the medium
    n = -n;
    cos_i = -cos_i;
    eta = ior;
  }
  if (eta == 1.0f) return d;
  const float k = 1.0f - eta * eta * (1.0f - cos_i * cos_i);
  if (k < 0) return reflect(d, n);
  return normalize(eta * d + (eta * cos_i - std::sqrt(k)) * n);
}

}  // namespace detail

// Interleaved mesh/particle tracing: particles are integrated only up to the
// closest mesh hit, then the ray reflects, refracts, or terminates on a
// diffuse surface whose albedo is modulated by shadow rays toward the lights.
template <typename View>
RayResult trace_with_meshes(const View& view, const MeshSet& meshes,
                            const std::vector<PointLight>& lights, Vec3f o, Vec3f d,
                            const RenderSettings& s) {
  RayResult r;
  float T = 1.0f;
  Vec3f ro = o;
  Vec3f rd = d;
  for (int bounce = 0; bounce <= s.max_bounces; ++bounce) {
    TriangleBvh::ClosestHit mh;
    if (!meshes.empty())
      mh = meshes.bvh.closest_hit(ro, rd, 1e-4f * (1.0f + length(ro)),
                                  std::numeric_limits<float>::max(), nullptr, true);
    const float t_clip = mh.valid ? mh.t : std::numeric_limits<float>::max();
    const WalkStats st = view.march(ro, rd, t_clip, s,
                                    [&](uint32_t, float, const HitSample<float>& h, float Tl) {
                                      r.radiance += (T * Tl * h.alpha) * h.color;
                                    });
    T *= st.transmittance;
    r.hit_count += st.gathered;
    r.blended_count += st.blended;
    r.skipped_nonfinite += st.skipped_nonfinite;
    if (!mh.valid || T <= s.t_min_transmittance) break;

    const Vec3f x = ro + mh.t * rd;
    Vec3f n = meshes.bvh.triangle_normal(mh.prim);
    if (dot(n, rd) > 0) n = -n;
    const MeshMaterial& mat = meshes.materials[meshes.tri_material[mh.prim]];
    switch (mat.type) {
      case MeshMaterial::Type::Mirror:
        ro = x;
        rd = normalize(detail::reflect(rd, n));
        break;
      case MeshMaterial::Type::Refract:
        ro = x;
        if (mat.ior == 1.0f)
          break;  // identity medium: continue undeviated
        rd = detail::refract_or_reflect(rd, meshes.bvh.triangle_normal(mh.prim), mat.ior);
        break;
      case MeshMaterial::Type::Diffuse: {
        float shade = 1.0f;
        if (!lights.empty()) {
          shade = 0.0f;
          for (const PointLight& light : lights) {
            const Vec3f to_l = normalize(light.position - x);
            const float lambert = std::max(0.0f, dot(n, to_l));
            shade += light.intensity * lambert * shadow_factor(view, &meshes, x, light.position, s);
          }
          shade = std::min(shade, 1.0f);
        }
        r.radiance += (T * shade) * mat.albedo;
        r.transmittance = 0.0f;
        return r;
      }
    }
  }
  r.transmittance = T;
  return r;
}

// SceneView adapter so effect/shadow code can march either a plain scene or a
// composite one through the same interface.
template <typename Visitor>
WalkStats march_scene(const SceneView& view, Vec3f o, Vec3f d, float t_clip,
                      const RenderSettings& s, Visitor&& visit) {
  return walk_ray(view, o, d, t_clip, s, std::forward<Visitor>(visit));
}

struct PlainView {
  SceneView view;
  template <typename Visitor>
  WalkStats march(Vec3f o, Vec3f d, float t_clip, const RenderSettings& s, Visitor&& v) const {
    return walk_ray(view, o, d, t_clip, s, std::forward<Visitor>(v));
  }
  Aabbf scene_box() const { return view.bvh->scene_box(); }
};

}  // namespace gtrace
