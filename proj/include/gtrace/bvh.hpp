// SPDX-License-Identifier: Apache-2.0
//
// Software bounding volume hierarchy with the any-hit/closest-hit traversal
// contract of a hardware ray-tracing pipeline: the callback sees every
// primitive intersection inside (t_min, committed t_max]; accepting a hit
// shrinks the committed interval, ignoring continues the traversal
// unchanged. Binned SAH construction (16 bins, leaf size <= 4), bottom-up
// refit, and a two-level instance tree for rendering transformed copies.

#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "gtrace/math.hpp"

namespace gtrace {

enum class HitDecision : uint8_t { Ignore = 0, Accept = 1 };

// Generic BVH over primitive bounding boxes. Leaf primitive semantics are
// supplied by the caller at traversal time.
class Bvh {
 public:
  struct Node {
    Aabbf box;
    uint32_t left_first = 0;  // inner: first child index; leaf: first prim slot
    uint32_t count = 0;       // 0 for inner nodes
    bool is_leaf() const { return count > 0; }
  };

  static constexpr int kBins = 16;
  static constexpr uint32_t kMaxLeafSize = 4;

  void build(const Aabbf* boxes, size_t n) {
    nodes_.clear();
    prim_order_.resize(n);
    std::iota(prim_order_.begin(), prim_order_.end(), 0u);
    if (n == 0) return;
    std::vector<Vec3f> centroids(n);
    for (size_t i = 0; i < n; ++i) centroids[i] = boxes[i].center();
    nodes_.reserve(2 * n);
    nodes_.emplace_back();
    build_node(0, 0, uint32_t(n), boxes, centroids.data());
  }

  // Re-tightens node boxes bottom-up; topology unchanged. The primitive count
  // must match the build.
  void refit(const Aabbf* boxes, size_t n) {
    if (n != prim_order_.size())
      throw std::logic_error("Bvh::refit: primitive count changed since build");
    for (size_t i = nodes_.size(); i-- > 0;) {
      Node& node = nodes_[i];
      Aabbf box;
      if (node.is_leaf()) {
        for (uint32_t k = 0; k < node.count; ++k)
          box.expand(boxes[prim_order_[node.left_first + k]]);
      } else {
        box.expand(nodes_[node.left_first].box);
        box.expand(nodes_[node.left_first + 1].box);
      }
      node.box = box;
    }
  }

  bool empty() const { return nodes_.empty(); }
  const Aabbf& root_box() const { return nodes_[0].box; }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<uint32_t>& prim_order() const { return prim_order_; }

  // Calls leaf_fn(prim_index, committed) for primitives of every leaf whose
  // box overlaps (t_min, committed]; leaf_fn may shrink committed.
  template <typename LeafFn>
  void traverse(Vec3f o, Vec3f d, float t_min, float& committed, LeafFn&& leaf_fn) const {
    if (nodes_.empty()) return;
    const Vec3f inv_d = safe_inv_dir(d);
    uint32_t stack[64];
    int sp = 0;
    float t0, t1;
    if (!ray_aabb(o, inv_d, nodes_[0].box, t_min, committed, t0, t1)) return;
    stack[sp++] = 0;
    while (sp > 0) {
      const Node& node = nodes_[stack[--sp]];
      if (!ray_aabb(o, inv_d, node.box, t_min, committed, t0, t1)) continue;
      if (node.is_leaf()) {
        for (uint32_t k = 0; k < node.count; ++k)
          leaf_fn(prim_order_[node.left_first + k], committed);
        continue;
      }
      const uint32_t l = node.left_first, r = node.left_first + 1;
      float lt0, lt1, rt0, rt1;
      const bool hit_l = ray_aabb(o, inv_d, nodes_[l].box, t_min, committed, lt0, lt1);
      const bool hit_r = ray_aabb(o, inv_d, nodes_[r].box, t_min, committed, rt0, rt1);
      if (hit_l && hit_r) {
        // near child on top of the stack
        if (lt0 <= rt0) {
          stack[sp++] = r;
          stack[sp++] = l;
        } else {
          stack[sp++] = l;
          stack[sp++] = r;
        }
      } else if (hit_l) {
        stack[sp++] = l;
      } else if (hit_r) {
        stack[sp++] = r;
      }
    }
  }

 private:
  void build_node(uint32_t node_index, uint32_t first, uint32_t count, const Aabbf* boxes,
                  const Vec3f* centroids) {
    Aabbf box, cbox;
    for (uint32_t i = 0; i < count; ++i) {
      box.expand(boxes[prim_order_[first + i]]);
      cbox.expand(centroids[prim_order_[first + i]]);
    }
    nodes_[node_index].box = box;
    if (count <= kMaxLeafSize) {
      make_leaf(node_index, first, count);
      return;
    }

    // binned SAH over all three axes
    int best_axis = -1, best_bin = -1;
    float best_cost = float(count);  // leaf cost baseline
    const Vec3f cext = cbox.extent();
    for (int axis = 0; axis < 3; ++axis) {
      if (cext[axis] <= 0) continue;
      Aabbf bin_box[kBins];
      uint32_t bin_count[kBins] = {};
      const float scale = float(kBins) / cext[axis];
      for (uint32_t i = 0; i < count; ++i) {
        const uint32_t p = prim_order_[first + i];
        int b = int((centroids[p][axis] - cbox.lo[axis]) * scale);
        b = std::min(kBins - 1, std::max(0, b));
        bin_box[b].expand(boxes[p]);
        bin_count[b]++;
      }
      Aabbf right_box[kBins];
      uint32_t right_count[kBins] = {};
      Aabbf acc;
      uint32_t acc_n = 0;
      for (int b = kBins - 1; b > 0; --b) {
        acc.expand(bin_box[b]);
        acc_n += bin_count[b];
        right_box[b] = acc;
        right_count[b] = acc_n;
      }
      acc = Aabbf{};
      acc_n = 0;
      const float inv_root_area = 1.0f / std::max(box.surface_area(), 1e-30f);
      for (int b = 0; b < kBins - 1; ++b) {
        acc.expand(bin_box[b]);
        acc_n += bin_count[b];
        if (acc_n == 0 || right_count[b + 1] == 0) continue;
        const float cost = 0.125f + (acc.surface_area() * float(acc_n) +
                                     right_box[b + 1].surface_area() * float(right_count[b + 1])) *
                                        inv_root_area;
        if (cost < best_cost) {
          best_cost = cost;
          best_axis = axis;
          best_bin = b;
        }
      }
    }

    uint32_t mid;
    if (best_axis >= 0) {
      // stable two-pass partition keeps ordering deterministic
      const float scale = float(kBins) / cext[best_axis];
      auto bin_of = [&](uint32_t p) {
        int b = int((centroids[p][best_axis] - cbox.lo[best_axis]) * scale);
        return std::min(kBins - 1, std::max(0, b));
      };
      std::vector<uint32_t> tmp(prim_order_.begin() + first, prim_order_.begin() + first + count);
      uint32_t out = first;
      for (uint32_t p : tmp)
        if (bin_of(p) <= best_bin) prim_order_[out++] = p;
      mid = out;
      for (uint32_t p : tmp)
        if (bin_of(p) > best_bin) prim_order_[out++] = p;
    } else {
      // all centroids coincide (or SAH refuses): median split keeps the tree bounded
      mid = first + count / 2;
      if (cext[0] > 0 || cext[1] > 0 || cext[2] > 0) {
        int axis = 0;
        if (cext[1] > cext[axis]) axis = 1;
        if (cext[2] > cext[axis]) axis = 2;
        std::sort(prim_order_.begin() + first, prim_order_.begin() + first + count,
                  [&](uint32_t a, uint32_t b) {
                    if (centroids[a][axis] != centroids[b][axis])
                      return centroids[a][axis] < centroids[b][axis];
                    return a < b;
                  });
      }
    }
    if (mid == first || mid == first + count) mid = first + count / 2;

    const uint32_t left = uint32_t(nodes_.size());
    nodes_[node_index].left_first = left;
    nodes_[node_index].count = 0;
    nodes_.emplace_back();
    nodes_.emplace_back();
    build_node(left, first, mid - first, boxes, centroids);
    build_node(left + 1, mid, first + count - mid, boxes, centroids);
  }

  void make_leaf(uint32_t node_index, uint32_t first, uint32_t count) {
    nodes_[node_index].left_first = first;
    nodes_[node_index].count = count;
  }

  std::vector<Node> nodes_;
  std::vector<uint32_t> prim_order_;
};

// BVH over a triangle soup. Hits on back-facing triangles are skipped unless
// the primitive is flagged two-sided.
class TriangleBvh {
 public:
  void build(const std::vector<Vec3f>& vertices,
             const std::vector<std::array<uint32_t, 3>>& triangles) {
    vertices_ = &vertices;
    triangles_ = &triangles;
    std::vector<Aabbf> boxes(triangles.size());
    for (size_t i = 0; i < triangles.size(); ++i) boxes[i] = triangle_box(i);
    bvh_.build(boxes.data(), boxes.size());
  }

  // Triangle count must be unchanged since build.
  void refit() {
    std::vector<Aabbf> boxes(triangles_->size());
    for (size_t i = 0; i < boxes.size(); ++i) boxes[i] = triangle_box(i);
    bvh_.refit(boxes.data(), boxes.size());
  }

  bool empty() const { return bvh_.empty() || triangles_->empty(); }
  const Bvh& tree() const { return bvh_; }
  Aabbf scene_box() const { return bvh_.empty() ? Aabbf{} : bvh_.root_box(); }

  // Any-hit traversal per the module contract. callback(t, prim) returns
  // Accept to shrink the committed interval or Ignore to keep traversing.
  // Returns the final committed t.
  template <typename Callback>
  float traverse_anyhit(Vec3f o, Vec3f d, float t_min, float t_max, Callback&& callback,
                        const uint8_t* two_sided = nullptr) const {
    if (empty()) return t_max;
    float committed = t_max;
    bvh_.traverse(o, d, t_min, committed, [&](uint32_t prim, float& commit) {
      const auto& tri = (*triangles_)[prim];
      float t, u, v;
      bool front;
      if (!intersect_triangle(o, d, (*vertices_)[tri[0]], (*vertices_)[tri[1]],
                              (*vertices_)[tri[2]], t, u, v, front))
        return;
      if (!front && !(two_sided && two_sided[prim])) return;
      if (t <= t_min || t > commit) return;
      if (callback(t, prim) == HitDecision::Accept) commit = std::min(commit, t);
    });
    return committed;
  }

  struct ClosestHit {
    float t = 0;
    uint32_t prim = 0;
    bool valid = false;
  };

  // Closest accepted hit; ties resolved toward the lower primitive index.
  ClosestHit closest_hit(Vec3f o, Vec3f d, float t_min, float t_max,
                         const uint8_t* two_sided = nullptr, bool any_facing = false) const {
    ClosestHit best;
    if (empty()) return best;
    float committed = t_max;
    bvh_.traverse(o, d, t_min, committed, [&](uint32_t prim, float& commit) {
      const auto& tri = (*triangles_)[prim];
      float t, u, v;
      bool front;
      if (!intersect_triangle(o, d, (*vertices_)[tri[0]], (*vertices_)[tri[1]],
                              (*vertices_)[tri[2]], t, u, v, front))
        return;
      if (!front && !any_facing && !(two_sided && two_sided[prim])) return;
      if (t <= t_min || t > commit) return;
      if (!best.valid || t < best.t || (t == best.t && prim < best.prim)) {
        best = {t, prim, true};
        commit = std::min(commit, t);
      }
    });
    return best;
  }

  Vec3f triangle_normal(uint32_t prim) const {
    const auto& tri = (*triangles_)[prim];
    return normalize(cross((*vertices_)[tri[1]] - (*vertices_)[tri[0]],
                           (*vertices_)[tri[2]] - (*vertices_)[tri[0]]));
  }

 private:
  Aabbf triangle_box(size_t i) const {
    const auto& tri = (*triangles_)[i];
    Aabbf b;
    b.expand((*vertices_)[tri[0]]);
    b.expand((*vertices_)[tri[1]]);
    b.expand((*vertices_)[tri[2]]);
    return b;
  }

  const std::vector<Vec3f>* vertices_ = nullptr;
  const std::vector<std::array<uint32_t, 3>>* triangles_ = nullptr;
  Bvh bvh_;
};

// Two-level structure: a top BVH over instance bounds, each instance holding
// a similarity transform and a shared reference to a child triangle BVH.
// Rays are transformed into instance space with an unnormalized direction so
// t values stay world-scale comparable across instances.
struct InstanceTree {
  struct Instance {
    Transformf xform;
    const TriangleBvh* bvh = nullptr;
    const uint8_t* two_sided = nullptr;
    uint32_t user_id = 0;
  };

  std::vector<Instance> instances;
  Bvh top;

  void build() {
    std::vector<Aabbf> boxes(instances.size());
    for (size_t i = 0; i < instances.size(); ++i) {
      Aabbf world;
      const Aabbf local = instances[i].bvh->scene_box();
      for (int c = 0; c < 8; ++c)
        world.expand(instances[i].xform.point({c & 1 ? local.hi.x : local.lo.x,
                                               c & 2 ? local.hi.y : local.lo.y,
                                               c & 4 ? local.hi.z : local.lo.z}));
      boxes[i] = world;
    }
    top.build(boxes.data(), boxes.size());
  }

  Aabbf scene_box() const { return top.empty() ? Aabbf{} : top.root_box(); }

  // callback(t, prim, instance_index) with the same Accept/Ignore contract.
  template <typename Callback>
  void traverse_anyhit(Vec3f o, Vec3f d, float t_min, float t_max, Callback&& callback) const {
    if (top.empty()) return;
    float committed = t_max;
    top.traverse(o, d, t_min, committed, [&](uint32_t inst_id, float& commit) {
      const Instance& inst = instances[inst_id];
      const Vec3f o_l = inst.xform.inv_point(o);
      const Vec3f d_l = inst.xform.inv_vector(d);
      const float local_final = inst.bvh->traverse_anyhit(
          o_l, d_l, t_min, commit,
          [&](float t, uint32_t prim) { return callback(t, prim, inst_id); },
          inst.two_sided);
      commit = std::min(commit, local_final);
    });
  }
};

}  // namespace gtrace
