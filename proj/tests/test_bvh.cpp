// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "gtrace/bvh.hpp"
#include "gtrace/proxy.hpp"
#include "gtrace/render.hpp"
#include "test_util.hpp"

using namespace gtrace;

namespace {

struct Soup {
  std::vector<Vec3f> vertices;
  std::vector<std::array<uint32_t, 3>> triangles;
};

Soup random_soup(size_t n, uint64_t seed, float box = 10.0f, float tri_size = 0.5f) {
  Pcg32 rng(seed);
  Soup s;
  for (size_t i = 0; i < n; ++i) {
    const Vec3f base{rng.uniform(-box, box), rng.uniform(-box, box), rng.uniform(-box, box)};
    const uint32_t v0 = uint32_t(s.vertices.size());
    for (int k = 0; k < 3; ++k)
      s.vertices.push_back(base + Vec3f{rng.uniform(-tri_size, tri_size),
                                        rng.uniform(-tri_size, tri_size),
                                        rng.uniform(-tri_size, tri_size)});
    s.triangles.push_back({v0, v0 + 1, v0 + 2});
  }
  return s;
}

// structural validation per the module invariants
void validate(const Bvh& bvh, const std::vector<Aabbf>& boxes) {
  const auto& nodes = bvh.nodes();
  REQUIRE_FALSE(nodes.empty());
  std::vector<int> seen(boxes.size(), 0);
  std::vector<std::pair<uint32_t, Aabbf>> stack{{0u, nodes[0].box}};
  while (!stack.empty()) {
    auto [idx, parent_box] = stack.back();
    stack.pop_back();
    const auto& node = nodes[idx];
    REQUIRE(parent_box.contains(node.box));
    if (node.is_leaf()) {
      for (uint32_t k = 0; k < node.count; ++k) {
        const uint32_t prim = bvh.prim_order()[node.left_first + k];
        seen[prim]++;
        REQUIRE(node.box.contains(boxes[prim]));
      }
    } else {
      REQUIRE(node.left_first > idx);  // acyclic by construction
      stack.push_back({node.left_first, node.box});
      stack.push_back({node.left_first + 1, node.box});
    }
  }
  for (int c : seen) REQUIRE(c == 1);  // every primitive in exactly one leaf
}

// brute-force front-face intersections in (t_min, t_max]
std::multiset<std::pair<float, uint32_t>> brute_hits(const Soup& s, Vec3f o, Vec3f d,
                                                     float t_min, float t_max) {
  std::multiset<std::pair<float, uint32_t>> hits;
  for (uint32_t i = 0; i < s.triangles.size(); ++i) {
    const auto& tri = s.triangles[i];
    float t, u, v;
    bool front;
    if (!intersect_triangle(o, d, s.vertices[tri[0]], s.vertices[tri[1]], s.vertices[tri[2]],
                            t, u, v, front))
      continue;
    if (!front) continue;
    if (t <= t_min || t > t_max) continue;
    hits.insert({t, i});
  }
  return hits;
}

}  // namespace

TEST_CASE("single triangle becomes a single leaf") {
  Soup s;
  s.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  s.triangles = {{0, 1, 2}};
  TriangleBvh bvh;
  bvh.build(s.vertices, s.triangles);
  REQUIRE(bvh.tree().nodes().size() == 1);
  CHECK(bvh.tree().nodes()[0].is_leaf());
  CHECK(bvh.tree().nodes()[0].count == 1);
}

TEST_CASE("empty input: all traversals miss") {
  Soup s;
  TriangleBvh bvh;
  bvh.build(s.vertices, s.triangles);
  int calls = 0;
  bvh.traverse_anyhit({0, 0, 0}, {0, 0, 1}, 0, 100, [&](float, uint32_t) {
    calls++;
    return HitDecision::Ignore;
  });
  CHECK(calls == 0);
  CHECK_FALSE(bvh.closest_hit({0, 0, 0}, {0, 0, 1}, 0, 100).valid);
}

TEST_CASE("structural invariants hold on large random builds") {
  for (uint64_t seed : {1ull, 2ull}) {
    const Soup s = random_soup(20000, seed);
    std::vector<Aabbf> boxes(s.triangles.size());
    for (size_t i = 0; i < boxes.size(); ++i) {
      for (int c = 0; c < 3; ++c) boxes[i].expand(s.vertices[s.triangles[i][c]]);
    }
    Bvh bvh;
    bvh.build(boxes.data(), boxes.size());
    validate(bvh, boxes);
  }
}

TEST_CASE("SAH separates two distant clusters at the root") {
  Soup s = random_soup(200, 3, 1.0f, 0.1f);
  Soup far = random_soup(200, 4, 1.0f, 0.1f);
  for (auto& v : far.vertices) v += Vec3f{100, 0, 0};
  const uint32_t base = uint32_t(s.vertices.size());
  for (const auto& v : far.vertices) s.vertices.push_back(v);
  for (const auto& t : far.triangles)
    s.triangles.push_back({t[0] + base, t[1] + base, t[2] + base});

  TriangleBvh bvh;
  bvh.build(s.vertices, s.triangles);
  const auto& nodes = bvh.tree().nodes();
  REQUIRE_FALSE(nodes[0].is_leaf());
  const auto& left = nodes[nodes[0].left_first];
  const auto& right = nodes[nodes[0].left_first + 1];
  // each child holds exactly one cluster
  const bool left_near = left.box.hi.x < 50.0f;
  const Aabbf& near_box = left_near ? left.box : right.box;
  const Aabbf& far_box = left_near ? right.box : left.box;
  CHECK(near_box.hi.x < 5.0f);
  CHECK(far_box.lo.x > 95.0f);
}

TEST_CASE("refit: unchanged triangles keep node boxes, moved ones expand ancestors") {
  Soup s = random_soup(500, 5);
  TriangleBvh bvh;
  bvh.build(s.vertices, s.triangles);
  const auto nodes_before = bvh.tree().nodes();
  bvh.refit();
  for (size_t i = 0; i < nodes_before.size(); ++i) {
    CHECK(nodes_before[i].box.lo == bvh.tree().nodes()[i].box.lo);
    CHECK(nodes_before[i].box.hi == bvh.tree().nodes()[i].box.hi);
  }
  // translate one vertex far out; every ancestor box must cover it
  s.vertices[0] += Vec3f{50, 0, 0};
  bvh.refit();
  CHECK(bvh.scene_box().contains(s.vertices[0]));
}

TEST_CASE("refit equals rebuild on hit sets after motion") {
  Soup s = random_soup(2000, 6);
  TriangleBvh refitted;
  refitted.build(s.vertices, s.triangles);
  Pcg32 rng(7);
  for (auto& v : s.vertices)
    v += Vec3f{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  refitted.refit();
  TriangleBvh rebuilt;
  rebuilt.build(s.vertices, s.triangles);
  for (int i = 0; i < 500; ++i) {
    Vec3f o, d;
    testutil::random_ray(rng, 20.0f, o, d);
    std::multiset<std::pair<float, uint32_t>> a, b;
    refitted.traverse_anyhit(o, d, 0.0f, 1e30f, [&](float t, uint32_t prim) {
      a.insert({t, prim});
      return HitDecision::Ignore;
    });
    rebuilt.traverse_anyhit(o, d, 0.0f, 1e30f, [&](float t, uint32_t prim) {
      b.insert({t, prim});
      return HitDecision::Ignore;
    });
    REQUIRE(a == b);
  }
}

TEST_CASE("refit rejects a changed primitive count") {
  Soup s = random_soup(16, 8);
  std::vector<Aabbf> boxes(s.triangles.size());
  for (size_t i = 0; i < boxes.size(); ++i)
    for (int c = 0; c < 3; ++c) boxes[i].expand(s.vertices[s.triangles[i][c]]);
  Bvh bvh;
  bvh.build(boxes.data(), boxes.size());
  boxes.pop_back();
  CHECK_THROWS_AS(bvh.refit(boxes.data(), boxes.size()), std::logic_error);
}

TEST_CASE("hit completeness: ignored callbacks equal brute force") {
  const Soup s = random_soup(1000, 9, 5.0f, 0.8f);
  TriangleBvh bvh;
  bvh.build(s.vertices, s.triangles);
  Pcg32 rng(10);
  for (int i = 0; i < 10000; ++i) {
    Vec3f o, d;
    testutil::random_ray(rng, 12.0f, o, d);
    float t_min = 0.0f, t_max = 1e30f;
    if (i % 3 == 1) {
      t_min = rng.uniform(0.0f, 10.0f);
      t_max = t_min + rng.uniform(0.5f, 15.0f);
    }
    std::multiset<std::pair<float, uint32_t>> got;
    bvh.traverse_anyhit(o, d, t_min, t_max, [&](float t, uint32_t prim) {
      got.insert({t, prim});
      return HitDecision::Ignore;
    });
    const auto want = brute_hits(s, o, d, t_min, t_max);
    REQUIRE(got == want);
  }
}

TEST_CASE("ray through a particle proxy reports a front-face hit in its entry interval") {
  Scene scene(1);
  scene[0].opacity = 0.9f;
  const ProxySet set = rebuild_proxies(scene, ProxyKind::IcosahedronClamped, 0.01f);
  TriangleBvh bvh;
  bvh.build(set.vertices, set.triangles);
  int front_hits = 0;
  float first_t = 1e30f;
  bvh.traverse_anyhit({0, 0, -10}, {0, 0, 1}, 0.0f, 100.0f, [&](float t, uint32_t) {
    front_hits++;
    first_t = std::min(first_t, t);
    return HitDecision::Ignore;
  });
  REQUIRE(front_hits >= 1);
  // entry must be before the center (10) and after the proxy's near bound
  CHECK(first_t > 10.0f - 3.3f);
  CHECK(first_t < 10.0f);
}

TEST_CASE("closest_hit returns the minimum-t hit with index tie-break") {
  const Soup s = random_soup(300, 11, 4.0f);
  TriangleBvh bvh;
  bvh.build(s.vertices, s.triangles);
  Pcg32 rng(12);
  for (int i = 0; i < 2000; ++i) {
    Vec3f o, d;
    testutil::random_ray(rng, 10.0f, o, d);
    const auto got = bvh.closest_hit(o, d, 0.0f, 1e30f);
    const auto want = brute_hits(s, o, d, 0.0f, 1e30f);
    if (want.empty()) {
      CHECK_FALSE(got.valid);
    } else {
      REQUIRE(got.valid);
      CHECK(got.t == want.begin()->first);
      CHECK(got.prim == want.begin()->second);
    }
  }
}

TEST_CASE("instances: identity instance matches direct traversal") {
  const Soup s = random_soup(200, 13, 2.0f);
  TriangleBvh bvh;
  bvh.build(s.vertices, s.triangles);
  InstanceTree tree;
  tree.instances.push_back({Transformf{}, &bvh, nullptr, 0});
  tree.build();
  Pcg32 rng(14);
  for (int i = 0; i < 500; ++i) {
    Vec3f o, d;
    testutil::random_ray(rng, 8.0f, o, d);
    std::multiset<std::pair<float, uint32_t>> direct, inst;
    bvh.traverse_anyhit(o, d, 0.0f, 1e30f, [&](float t, uint32_t prim) {
      direct.insert({t, prim});
      return HitDecision::Ignore;
    });
    tree.traverse_anyhit(o, d, 0.0f, 1e30f, [&](float t, uint32_t prim, uint32_t inst_id) {
      CHECK(inst_id == 0);
      inst.insert({t, prim});
      return HitDecision::Ignore;
    });
    REQUIRE(direct == inst);
  }
}

TEST_CASE("instances: translated copy reports hits at the copy's location") {
  Scene scene(1);
  scene[0].opacity = 0.9f;
  const ProxySet set = rebuild_proxies(scene, ProxyKind::IcosahedronClamped, 0.01f);
  TriangleBvh bvh;
  bvh.build(set.vertices, set.triangles);
  InstanceTree tree;
  Transformf a, b;
  b.t = {20, 0, 0};
  tree.instances.push_back({a, &bvh, nullptr, 0});
  tree.instances.push_back({b, &bvh, nullptr, 1});
  tree.build();
  // ray through the copy only
  int hits = 0;
  float tmin_seen = 1e30f;
  tree.traverse_anyhit({20, 0, -10}, {0, 0, 1}, 0.0f, 100.0f,
                       [&](float t, uint32_t, uint32_t inst_id) {
                         CHECK(inst_id == 1);
                         hits++;
                         tmin_seen = std::min(tmin_seen, t);
                         return HitDecision::Ignore;
                       });
  REQUIRE(hits >= 1);
  CHECK(tmin_seen > 6.5f);
  CHECK(tmin_seen < 10.0f);
}

TEST_CASE("1024 instances render equals explicitly duplicated geometry") {
  // dyadic coordinates and integer translations keep the math bit-identical
  Pcg32 rng(15);
  Scene proto;
  for (int i = 0; i < 6; ++i) {
    Particle p = testutil::random_particle(rng, KernelType::Gaussian, 0.4f, 1);
    for (int c = 0; c < 3; ++c)
      p.mu[c] = std::round(p.mu[c] * 1024.0f) / 1024.0f;
    proto.push_back(p);
  }
  CompositeScene comp;
  comp.parts.push_back({proto, {}, {}});
  Scene duplicated;
  for (int gx = 0; gx < 32; ++gx)
    for (int gy = 0; gy < 32; ++gy) {
      Transformf x;
      x.t = {float(gx * 2), float(gy * 2), 0};
      comp.instance_xforms.push_back(x);
      comp.instance_part.push_back(0);
      for (Particle p : proto) {
        p.mu += x.t;
        duplicated.push_back(p);
      }
    }
  comp.build(ProxyKind::IcosahedronClamped, 0.01f);
  BoundScene dup;
  dup.scene = duplicated;
  dup.rebuild(ProxyKind::IcosahedronClamped, 0.01f);

  const CameraModel cam = testutil::orbit_camera(0, 1, 90.0f, 48);
  CameraModel cam2 = cam;
  cam2.pose0.t = {31, 31, -90};
  cam2.pose1 = cam2.pose0;
  RenderSettings s;
  s.threads = 1;
  s.t_min_transmittance = 0.001f;
  const Image a = render_composite(comp, cam2, s);
  const Image b = render_image(dup.view(), cam2, s);
  CHECK(max_abs_diff(a, b) <= 1e-5f);
}
