// SPDX-License-Identifier: Apache-2.0
//
// Image-level rendering: camera rays mapped onto the tracer in parallel,
// per-pixel statistics, the tile-shared scheduling variant, and composite
// scenes (instanced particle sets + meshes + lights).

#pragma once

#include <chrono>
#include <cstdint>
#include <vector>

#include "gtrace/camera.hpp"
#include "gtrace/parallel.hpp"
#include "gtrace/tracer.hpp"

namespace gtrace {

struct RenderStats {
  uint64_t rays = 0;
  uint64_t hits = 0;        // gathered proxy hits
  uint64_t blended = 0;
  uint64_t nonfinite_skips = 0;
  double wall_ms = 0;
  double mean_hits() const { return rays ? double(hits) / double(rays) : 0.0; }
  double mean_blended() const { return rays ? double(blended) / double(rays) : 0.0; }
};

namespace detail {

inline Pcg32 pixel_rng(uint64_t seed, uint64_t pixel_index, uint64_t sample) {
  return Pcg32(splitmix64(seed ^ (pixel_index * 0x9e3779b97f4a7c15ull)) ^ sample, pixel_index);
}

template <typename TraceFn>
Image render_loop(const CameraModel& cam, const RenderSettings& s, RenderStats* stats,
                  TraceFn&& trace_px) {
  Image img(cam.width, cam.height);
  const size_t n = img.pixel_count();
  std::vector<RayResult> results(n);
  const auto start = std::chrono::steady_clock::now();
  parallel_for(n, s.threads, [&](size_t i) {
    const int px = int(i % size_t(cam.width));
    const int py = int(i / size_t(cam.width));
    Vec3f color{0, 0, 0};
    RayResult merged;
    for (int sample = 0; sample < std::max(1, s.spp); ++sample) {
      Pcg32 rng = pixel_rng(s.seed, i, uint64_t(sample));
      const CameraRay ray = generate_pixel_ray(cam, px, py, sample, rng);
      if (!ray.valid) continue;
      const RayResult r = trace_px(ray, i, sample);
      color += r.radiance;
      merged.hit_count += r.hit_count;
      merged.blended_count += r.blended_count;
      merged.skipped_nonfinite += r.skipped_nonfinite;
      merged.transmittance = r.transmittance;
    }
    merged.radiance = color / float(std::max(1, s.spp));
    results[i] = merged;
    img.pixels[i] = merged.radiance;
  });
  const auto end = std::chrono::steady_clock::now();
  if (stats) {
    stats->rays += n * size_t(std::max(1, s.spp));
    for (const RayResult& r : results) {
      stats->hits += uint64_t(r.hit_count);
      stats->blended += uint64_t(r.blended_count);
      stats->nonfinite_skips += uint64_t(r.skipped_nonfinite);
    }
    stats->wall_ms += std::chrono::duration<double, std::milli>(end - start).count();
  }
  return img;
}

// Tile-shared scheduling: the tile-center ray collects the ordered particle
// sequence once; every pixel of the tile re-evaluates response and radiance
// along its own ray over that shared sequence.
inline Image render_tiled(const SceneView& view, const CameraModel& cam,
                          const RenderSettings& s, RenderStats* stats) {
  Image img(cam.width, cam.height);
  const int N = std::max(1, s.tile_size);
  const int tiles_x = (cam.width + N - 1) / N;
  const int tiles_y = (cam.height + N - 1) / N;
  const auto start = std::chrono::steady_clock::now();
  std::vector<uint64_t> tile_hits(size_t(tiles_x) * size_t(tiles_y), 0);
  parallel_for(size_t(tiles_x) * size_t(tiles_y), s.threads, [&](size_t tile) {
    const int tx = int(tile % size_t(tiles_x));
    const int ty = int(tile / size_t(tiles_x));
    const int cx_px = std::min(tx * N + N / 2, cam.width - 1);
    const int cy_px = std::min(ty * N + N / 2, cam.height - 1);
    Pcg32 rng = pixel_rng(s.seed, size_t(cy_px) * size_t(cam.width) + size_t(cx_px), 0);
    const CameraRay center = generate_pixel_ray(cam, cx_px, cy_px, 0, rng);
    std::vector<uint32_t> sequence;
    if (center.valid) {
      walk_ray(view, center.o, center.d, std::numeric_limits<float>::max(), s,
               [&](uint32_t pid, float, const HitSample<float>&, float) {
                 sequence.push_back(pid);
               });
    }
    tile_hits[tile] = sequence.size();
    for (int dy = 0; dy < N; ++dy) {
      for (int dx = 0; dx < N; ++dx) {
        const int px = tx * N + dx;
        const int py = ty * N + dy;
        if (px >= cam.width || py >= cam.height) continue;
        Pcg32 prng = pixel_rng(s.seed, size_t(py) * size_t(cam.width) + size_t(px), 0);
        const CameraRay ray = generate_pixel_ray(cam, px, py, 0, prng);
        Vec3f L{0, 0, 0};
        float T = 1.0f;
        if (ray.valid) {
          for (uint32_t pid : sequence) {
            const HitSample<float> h = particle_ray_sample(
                (*view.scene)[pid], ray.o, ray.d, ray.d, 0.0f, s.sh_degree, s.alpha_min);
            if (!h.finite || !h.blended) continue;
            L += (T * h.alpha) * h.color;
            T *= 1.0f - h.alpha;
            if (T <= s.t_min_transmittance) break;
          }
        }
        img.at(px, py) = L;
      }
    }
  });
  const auto end = std::chrono::steady_clock::now();
  if (stats) {
    stats->rays += img.pixel_count();
    for (uint64_t h : tile_hits) stats->hits += h;
    stats->wall_ms += std::chrono::duration<double, std::milli>(end - start).count();
  }
  return img;
}

}  // namespace detail

// Renders a full camera frame; deterministic for a fixed seed (independent of
// the thread count: every pixel derives its own RNG stream).
inline Image render_image(const SceneView& view, const CameraModel& cam,
                          const RenderSettings& s, RenderStats* stats = nullptr) {
  if (s.algorithm == TraceAlgorithm::Tiled) return detail::render_tiled(view, cam, s, stats);
  return detail::render_loop(cam, s, stats, [&](const CameraRay& ray, size_t pixel, int sample) {
    const uint64_t ray_seed = splitmix64(s.seed ^ (pixel << 16) ^ uint64_t(sample));
    return trace_ray_variant(view, ray.o, ray.d, s, ray_seed);
  });
}

// Renders with inserted meshes and lights.
inline Image render_image_with_meshes(const SceneView& view, const MeshSet& meshes,
                                      const std::vector<PointLight>& lights,
                                      const CameraModel& cam, const RenderSettings& s,
                                      RenderStats* stats = nullptr) {
  PlainView pv{view};
  return detail::render_loop(cam, s, stats, [&](const CameraRay& ray, size_t, int) {
    return trace_with_meshes(pv, meshes, lights, ray.o, ray.d, s);
  });
}

// ---------------------------------------------------------------------------
// Composite scenes: instanced particle sets + meshes + lights

struct CompositePart {
  Scene scene;
  ProxySet proxies;
  TriangleBvh bvh;
};

struct CompositeScene {
  std::vector<CompositePart> parts;
  std::vector<Transformf> instance_xforms;
  std::vector<uint32_t> instance_part;
  InstanceTree itree;
  MeshSet meshes;
  std::vector<PointLight> lights;

  void build(ProxyKind kind, float alpha_min) {
    for (auto& part : parts) {
      part.proxies = rebuild_proxies(part.scene, kind, alpha_min);
      part.bvh.build(part.proxies.vertices, part.proxies.triangles);
    }
    itree.instances.clear();
    for (size_t i = 0; i < instance_xforms.size(); ++i) {
      const CompositePart& part = parts[instance_part[i]];
      itree.instances.push_back(
          {instance_xforms[i], &part.bvh,
           part.proxies.two_sided.empty() ? nullptr : part.proxies.two_sided.data(),
           instance_part[i]});
    }
    itree.build();
    meshes.build();
  }
};

// March adapter over the instance tree: same Proc.-1 rounds with a
// lexicographic (t, instance, prim) cursor. Geometry is evaluated in instance
// space (unnormalized direction keeps t world-comparable); radiance always
// uses the world ray direction.
struct CompositeView {
  const CompositeScene* comp = nullptr;

  Aabbf scene_box() const { return comp->itree.scene_box(); }

  template <typename Visitor>
  WalkStats march(Vec3f o, Vec3f d, float t_clip, const RenderSettings& s,
                  Visitor&& visit) const {
    WalkStats st;
    if (comp->itree.top.empty()) return st;
    const Vec3f inv_d = safe_inv_dir(d);
    float t0, t1;
    if (!ray_aabb(o, inv_d, comp->itree.scene_box(), 0.0f, std::numeric_limits<float>::max(),
                  t0, t1))
      return st;
    st.scene_hit = true;
    st.scene_t0 = t0;
    st.scene_t1 = t1;
    const float t_far = std::min(detail::padded_far(t1), t_clip);

    HitBuffer buffer;
    float cur_t = 0.0f;
    int64_t have_key = -1;
    uint64_t cur_key = 0;
    uint64_t last_dedup = UINT64_MAX;
    float last_dedup_t = std::numeric_limits<float>::lowest();
    uint32_t cached_inst = UINT32_MAX;
    Vec3f o_l{}, d_l{};

    while (true) {
      buffer.reset(s.k);
      comp->itree.traverse_anyhit(
          o, d, detail::prev_float(cur_t), t_far, [&](float t, uint32_t prim, uint32_t inst) {
            const uint64_t key = (uint64_t(inst) << 32) | uint64_t(prim);
            if (have_key < 0) {
              if (t < cur_t) return HitDecision::Ignore;
            } else if (!hit_less(cur_t, cur_key, t, key)) {
              return HitDecision::Ignore;
            }
            return buffer.insert(t, key);
          });
      if (buffer.count == 0) break;
      const bool full = buffer.count == buffer.k;
      for (int i = 0; i < buffer.count; ++i) {
        const float t = buffer.entries[i].t;
        const uint64_t key = buffer.entries[i].key;
        cur_t = t;
        cur_key = key;
        have_key = 1;
        const uint32_t inst = uint32_t(key >> 32);
        const uint32_t prim = uint32_t(key);
        const CompositePart& part = comp->parts[comp->instance_part[inst]];
        const uint32_t pid = part.proxies.prim_to_particle[prim];
        const uint64_t dedup = (uint64_t(inst) << 32) | pid;
        if (dedup == last_dedup && t == last_dedup_t) continue;
        last_dedup = dedup;
        last_dedup_t = t;
        st.gathered++;
        if (inst != cached_inst) {
          const Transformf& x = comp->instance_xforms[inst];
          o_l = x.inv_point(o);
          d_l = x.inv_vector(d);
          cached_inst = inst;
        }
        const HitSample<float> h =
            particle_ray_sample(part.scene[pid], o_l, d_l, d, t, s.sh_degree, s.alpha_min);
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
};

inline RayResult trace_ray_composite(const CompositeScene& comp, Vec3f o, Vec3f d,
                                     const RenderSettings& s) {
  CompositeView cv{&comp};
  if (!comp.meshes.empty() || !comp.lights.empty())
    return trace_with_meshes(cv, comp.meshes, comp.lights, o, d, s);
  RayResult r;
  const WalkStats st = cv.march(o, d, std::numeric_limits<float>::max(), s,
                                [&](uint32_t, float, const HitSample<float>& h, float T) {
                                  detail::accumulate(r, h, T);
                                });
  detail::finish(r, st);
  return r;
}

inline Image render_composite(const CompositeScene& comp, const CameraModel& cam,
                              const RenderSettings& s, RenderStats* stats = nullptr) {
  return detail::render_loop(cam, s, stats, [&](const CameraRay& ray, size_t, int) {
    return trace_ray_composite(comp, ray.o, ray.d, s);
  });
}

}  // namespace gtrace
