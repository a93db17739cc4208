// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry points: render, train, bench, compose.
// Exit codes: 0 ok, 1 usage, 2 I/O error, 3 numerical failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "gtrace/optim.hpp"
#include "gtrace/oracle.hpp"
#include "gtrace/render.hpp"
#include "gtrace/sceneio.hpp"

namespace fs = std::filesystem;
using namespace gtrace;

namespace {

struct SettingsFlags {
  std::string algorithm = "kbuffer";
  int k = 16;
  std::string kernel;
  float gg_n = 2.0f;
  float tmin = 0.03f;
  float alpha_min = 0.01f;
  int spp = 1;
  uint64_t seed = 1;
  int threads = hardware_threads();
  bool deterministic = false;
  int sh_degree = 3;
  std::string proxy = "icosahedron";
  int tile_size = 2;
  int slab_count = 16;
  std::string mlat_merge = "nearest";
  bool stats_json = false;
};

void add_settings_flags(CLI::App* app, SettingsFlags& f) {
  app->add_option("--algorithm", f.algorithm,
                  "kbuffer|naive|slab|mlat|tiled|stochastic")
      ->capture_default_str();
  app->add_option("--k", f.k, "hit buffer size")->capture_default_str();
  app->add_option("--kernel", f.kernel, "gaussian|generalized_gaussian|surface|cosine");
  app->add_option("--gg-n", f.gg_n, "generalized Gaussian degree")->capture_default_str();
  app->add_option("--tmin", f.tmin, "minimum transmittance for early termination")
      ->capture_default_str();
  app->add_option("--alpha-min", f.alpha_min, "response threshold")->capture_default_str();
  app->add_option("--spp", f.spp, "samples per pixel")->capture_default_str();
  app->add_option("--seed", f.seed, "RNG seed")->capture_default_str();
  app->add_option("--threads", f.threads, "worker threads")->capture_default_str();
  app->add_flag("--deterministic", f.deterministic, "single-threaded bit-stable mode");
  app->add_option("--sh-degree", f.sh_degree, "active SH degree")->capture_default_str();
  app->add_option("--proxy", f.proxy, "icosahedron|icosahedron_unclamped|octahedron|aabb")
      ->capture_default_str();
  app->add_option("--tile-size", f.tile_size, "tiled tracing tile size")->capture_default_str();
  app->add_option("--slab-count", f.slab_count, "slab tracing slab count")
      ->capture_default_str();
  app->add_option("--mlat-merge", f.mlat_merge, "nearest|last")->capture_default_str();
  app->add_flag("--stats-json", f.stats_json, "print render statistics as JSON to stdout");
}

TraceAlgorithm parse_algorithm(const std::string& s) {
  if (s == "kbuffer") return TraceAlgorithm::KBuffer;
  if (s == "naive") return TraceAlgorithm::NaiveClosestHit;
  if (s == "slab") return TraceAlgorithm::Slab;
  if (s == "mlat") return TraceAlgorithm::Mlat;
  if (s == "tiled") return TraceAlgorithm::Tiled;
  if (s == "stochastic") return TraceAlgorithm::StochasticDepth;
  throw CLI::ValidationError("--algorithm", "unknown algorithm '" + s + "'");
}

ProxyKind parse_proxy(const std::string& s) {
  if (s == "icosahedron") return ProxyKind::IcosahedronClamped;
  if (s == "icosahedron_unclamped") return ProxyKind::IcosahedronUnclamped;
  if (s == "octahedron") return ProxyKind::Octahedron;
  if (s == "aabb") return ProxyKind::Aabb;
  throw CLI::ValidationError("--proxy", "unknown proxy kind '" + s + "'");
}

RenderSettings to_settings(const SettingsFlags& f) {
  RenderSettings s;
  s.algorithm = parse_algorithm(f.algorithm);
  s.k = f.k;
  s.alpha_min = f.alpha_min;
  s.t_min_transmittance = f.tmin;
  s.sh_degree = f.sh_degree;
  s.seed = f.seed;
  s.spp = f.spp;
  s.threads = f.deterministic ? 1 : f.threads;
  s.tile_size = f.tile_size;
  s.slab_count = f.slab_count;
  s.mlat_merge = f.mlat_merge == "last" ? MlatMergeRule::LastTwo : MlatMergeRule::NearestPair;
  return s;
}

// The kernel is a render-time choice: stamp it onto the loaded particles.
void apply_kernel(Scene& scene, const std::string& kernel, float gg_n) {
  if (kernel.empty()) return;
  KernelType type;
  if (kernel == "gaussian") type = KernelType::Gaussian;
  else if (kernel == "generalized_gaussian") type = KernelType::GeneralizedGaussian;
  else if (kernel == "surface") type = KernelType::Surface2D;
  else if (kernel == "cosine") type = KernelType::CosineModulated;
  else throw CLI::ValidationError("--kernel", "unknown kernel '" + kernel + "'");
  for (Particle& p : scene) {
    p.kernel = type;
    p.gg_n = gg_n;
    if (type == KernelType::Surface2D) p.scale.z = 0.0f;
  }
}

void print_stats_json(const RenderStats& stats, double psnr = -1) {
  json j;
  j["rays"] = stats.rays;
  j["mean_hits"] = stats.mean_hits();
  j["mean_blended"] = stats.mean_blended();
  j["wall_ms"] = stats.wall_ms;
  j["nonfinite_skips"] = stats.nonfinite_skips;
  if (psnr >= 0) j["psnr_vs_reference"] = psnr;
  std::cout << j.dump() << "\n";
}

// ---------------------------------------------------------------------------

int cmd_render(const std::string& scene_path, const std::string& camera_path,
               const std::string& out_path, const SettingsFlags& flags) {
  Scene scene = load_ply(scene_path);
  apply_kernel(scene, flags.kernel, flags.gg_n);
  const CameraModel cam = load_camera(camera_path);

  BoundScene bound;
  bound.scene = std::move(scene);
  bound.rebuild(parse_proxy(flags.proxy), flags.alpha_min);

  const RenderSettings s = to_settings(flags);
  RenderStats stats;
  const Image img = render_image(bound.view(), cam, s, &stats);
  for (const Vec3f& px : img.pixels)
    if (!is_finite(px)) {
      std::cerr << "render: non-finite pixel produced\n";
      return 3;
    }
  write_image(img, out_path);
  if (flags.stats_json) print_stats_json(stats);
  std::cerr << "wrote " << out_path << " (" << img.width << "x" << img.height << ", "
            << stats.wall_ms << " ms, mean hits " << stats.mean_hits() << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& dataset_dir, const std::string& config_path,
              const std::string& out_dir, const std::string& resume_path,
              const SettingsFlags& flags, const json& flag_overrides) {
  json file_cfg = json::object();
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw IoError("train: cannot open config '" + config_path + "'");
    f >> file_cfg;
  }
  for (const auto& [k, v] : flag_overrides.items()) file_cfg[k] = v;  // flag wins
  TrainConfig cfg = parse_train_config(file_cfg);
  if (flags.deterministic) cfg.threads = 1;

  std::vector<TrainingView> all_views = load_dataset(dataset_dir);
  if (all_views.empty()) throw IoError("train: dataset has no views");
  std::vector<TrainingView> train_views;
  std::vector<TrainingView> test_views;
  for (size_t i = 0; i < all_views.size(); ++i) {
    if (cfg.holdout_every > 0 && i % size_t(cfg.holdout_every) == 0)
      test_views.push_back(all_views[i]);
    else
      train_views.push_back(all_views[i]);
  }

  fs::create_directories(out_dir);
  TrainState st;
  if (!resume_path.empty()) {
    st = load_train_state(resume_path, cfg);
    std::cerr << "resumed from " << resume_path << " at iteration " << st.iter << "\n";
  } else {
    // random init inside the camera-orbit volume
    std::vector<CameraModel> cams;
    for (const auto& v : train_views) cams.push_back(v.camera);
    const float extent = compute_scene_extent(cams);
    Vec3f center{0, 0, 0};
    for (const auto& c : cams) center += c.pose0.t;
    center = center / float(cams.size());
    Pcg32 init_rng(cfg.seed, 11);
    std::vector<Vec3f> pts;
    std::vector<Vec3f> cols;
    const size_t n_init = 2000;
    for (size_t i = 0; i < n_init; ++i) {
      pts.push_back(center + Vec3f{init_rng.uniform(-0.5f, 0.5f), init_rng.uniform(-0.5f, 0.5f),
                                   init_rng.uniform(-0.5f, 0.5f)} *
                                 extent);
      cols.push_back({init_rng.uniform(0.2f, 0.8f), init_rng.uniform(0.2f, 0.8f),
                      init_rng.uniform(0.2f, 0.8f)});
    }
    st = init_from_points(pts, cols, cams, cfg);
  }

  std::ofstream metrics(out_dir + "/metrics.csv", st.iter > 0 ? std::ios::app : std::ios::out);
  if (st.iter == 0) metrics << "iter,loss,psnr,particles,mean_hits\n";
  Pcg32 view_rng(cfg.seed, 23);

  while (st.iter < cfg.total_iters) {
    const StepMetrics m = train_step(st, train_views, view_rng);
    if (m.skipped) std::cerr << "iteration " << m.iter << ": non-finite loss, step skipped\n";
    if (m.iter % 50 == 0 || m.iter + 1 == cfg.total_iters) {
      metrics << m.iter << "," << m.loss << "," << m.psnr << "," << m.particles << ","
              << m.mean_hits << "\n";
      metrics.flush();
    }
    if (m.iter % 500 == 0)
      std::cerr << "iter " << m.iter << " loss " << m.loss << " psnr " << m.psnr
                << " particles " << m.particles << "\n";
  }

  save_ply(st.bound.scene, out_dir + "/checkpoint.ply");
  save_train_state(st, out_dir + "/checkpoint.state");

  if (!test_views.empty()) {
    RenderSettings s = cfg.render_settings(st.iter);
    double sum = 0;
    for (const auto& view : test_views)
      sum += psnr_srgb(render_image(st.bound.view(), view.camera, s), view.image);
    std::cerr << "held-out PSNR over " << test_views.size() << " views: "
              << sum / double(test_views.size()) << " dB\n";
  }
  std::cerr << "wrote " << out_dir << "/checkpoint.ply and metrics.csv\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct BenchRow {
  std::string algorithm;
  int k;
  std::string primitive;
  double time_ms;
  double psnr_vs_reference;
  double mean_hits;
  double bvh_build_ms;
};

int cmd_bench(const std::string& scene_path, const std::string& camera_path,
              const std::string& out_csv, const SettingsFlags& flags) {
  Scene scene = load_ply(scene_path);
  apply_kernel(scene, flags.kernel, flags.gg_n);
  const CameraModel cam = load_camera(camera_path);
  std::vector<BenchRow> rows;

  auto build_timed = [&](ProxyKind kind, BoundScene& bound, double& build_ms) {
    bound.scene = scene;
    const auto start = std::chrono::steady_clock::now();
    bound.rebuild(kind, flags.alpha_min);
    build_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
            .count();
  };

  // reference: k-buffer, k=16, icosahedron
  BoundScene ref_bound;
  double ref_build_ms;
  build_timed(ProxyKind::IcosahedronClamped, ref_bound, ref_build_ms);
  SettingsFlags ref_flags = flags;
  ref_flags.algorithm = "kbuffer";
  ref_flags.k = 16;
  const RenderSettings ref_settings = to_settings(ref_flags);
  RenderStats ref_stats;
  const Image reference = render_image(ref_bound.view(), cam, ref_settings, &ref_stats);

  auto run = [&](const std::string& algo, int k, ProxyKind kind, const std::string& prim_name,
                 int slab_count = 16, const std::string& merge = "nearest", int tile = 2) {
    BoundScene bound;
    double build_ms;
    build_timed(kind, bound, build_ms);
    SettingsFlags rf = flags;
    rf.algorithm = algo;
    rf.k = k;
    rf.slab_count = slab_count;
    rf.mlat_merge = merge;
    rf.tile_size = tile;
    const RenderSettings s = to_settings(rf);
    RenderStats stats;
    const Image img = render_image(bound.view(), cam, s, &stats);
    const double p = psnr_srgb(img, reference);
    rows.push_back({algo + (algo == "slab" ? "(" + std::to_string(slab_count) + ")"
                            : algo == "mlat" ? "(" + merge + ")"
                            : algo == "tiled" ? "(" + std::to_string(tile) + ")"
                                              : ""),
                    k, prim_name, stats.wall_ms, p, stats.mean_hits(), build_ms});
  };

  // primitive sweep under the reference algorithm
  run("kbuffer", 16, ProxyKind::IcosahedronClamped, "icosahedron");
  run("kbuffer", 16, ProxyKind::IcosahedronUnclamped, "icosahedron_unclamped");
  run("kbuffer", 16, ProxyKind::Octahedron, "octahedron");
  run("kbuffer", 16, ProxyKind::Aabb, "aabb");
  // hit buffer size sweep
  for (int k : {1, 4, 64}) run("kbuffer", k, ProxyKind::IcosahedronClamped, "icosahedron");
  // algorithm sweep
  run("naive", 16, ProxyKind::IcosahedronClamped, "icosahedron");
  for (int slabs : {8, 32}) run("slab", 16, ProxyKind::IcosahedronClamped, "icosahedron", slabs);
  for (const char* merge : {"nearest", "last"})
    run("mlat", 16, ProxyKind::IcosahedronClamped, "icosahedron", 16, merge);
  for (int tile : {2, 4})
    run("tiled", 16, ProxyKind::IcosahedronClamped, "icosahedron", 16, "nearest", tile);
  run("stochastic", 16, ProxyKind::IcosahedronClamped, "icosahedron");

  std::ofstream csv(out_csv);
  if (!csv) throw IoError("bench: cannot open '" + out_csv + "'");
  csv << "algorithm,k,primitive,time_ms,psnr_vs_reference,mean_hits,bvh_build_ms\n";
  csv << "kbuffer,16,icosahedron(reference)," << ref_stats.wall_ms << ",inf,"
      << ref_stats.mean_hits() << "," << ref_build_ms << "\n";
  for (const BenchRow& r : rows)
    csv << r.algorithm << "," << r.k << "," << r.primitive << "," << r.time_ms << ","
        << (std::isinf(r.psnr_vs_reference) ? std::string("inf")
                                            : std::to_string(r.psnr_vs_reference))
        << "," << r.mean_hits << "," << r.bvh_build_ms << "\n";
  std::cerr << "wrote " << out_csv << " (" << rows.size() + 1 << " rows)\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_compose(const std::string& spec_path, const std::string& out_path,
                const std::string& camera_override, SettingsFlags flags,
                const std::vector<std::string>& explicit_flags, CLI::App* sub) {
  const ComposeSpec spec = load_compose_spec(spec_path);

  // file settings apply first, explicit command-line flags win
  if (!spec.settings_overrides.is_null()) {
    for (const auto& [key, value] : spec.settings_overrides.items()) {
      auto overridden = [&](const std::string& flag) {
        return sub->count(flag) > 0;
      };
      if (key == "algorithm" && !overridden("--algorithm")) flags.algorithm = value;
      else if (key == "k" && !overridden("--k")) flags.k = value;
      else if (key == "kernel" && !overridden("--kernel")) flags.kernel = value;
      else if (key == "gg_n" && !overridden("--gg-n")) flags.gg_n = value;
      else if (key == "tmin" && !overridden("--tmin")) flags.tmin = value;
      else if (key == "alpha_min" && !overridden("--alpha-min")) flags.alpha_min = value;
      else if (key == "spp" && !overridden("--spp")) flags.spp = value;
      else if (key == "seed" && !overridden("--seed")) flags.seed = value;
      else if (key == "sh_degree" && !overridden("--sh-degree")) flags.sh_degree = value;
      else if (key == "proxy" && !overridden("--proxy")) flags.proxy = value;
      else if (key == "max_bounces") {}  // handled below
      else if (key == "algorithm" || key == "k") {}
      else if (key == "tile_size" && !overridden("--tile-size")) flags.tile_size = value;
      else if (key == "slab_count" && !overridden("--slab-count")) flags.slab_count = value;
      else
        throw IoError("compose: unknown settings key '" + key + "'");
    }
  }
  (void)explicit_flags;

  CompositeScene comp;
  std::vector<Scene> sources;
  for (const auto& path : spec.scene_paths) {
    Scene s = load_ply(path);
    apply_kernel(s, flags.kernel, flags.gg_n);
    sources.push_back(std::move(s));
  }
  // one part per (scene, crop) signature; instances reference parts
  for (const ComposeInstance& inst : spec.instances) {
    Scene part_scene;
    const Scene& src = sources[inst.scene_index];
    if (inst.has_crop) {
      for (const Particle& p : src)
        if (inst.crop.contains(p.mu)) part_scene.push_back(p);
    } else {
      part_scene = src;
    }
    // deduplicate identical parts so instancing shares child BVHs
    uint32_t part_id = UINT32_MAX;
    for (size_t i = 0; i < comp.parts.size(); ++i)
      if (comp.parts[i].scene.size() == part_scene.size() &&
          (part_scene.empty() || (comp.parts[i].scene[0].mu == part_scene[0].mu &&
                                  comp.parts[i].scene.back().mu == part_scene.back().mu)))
        part_id = uint32_t(i);
    if (part_id == UINT32_MAX) {
      comp.parts.push_back({std::move(part_scene), {}, {}});
      part_id = uint32_t(comp.parts.size() - 1);
    }
    comp.instance_xforms.push_back(inst.xform);
    comp.instance_part.push_back(part_id);
  }
  for (const auto& entry : spec.meshes) {
    const TriangleMesh mesh = load_obj(entry.obj_path);
    comp.meshes.append(mesh.vertices, mesh.triangles, entry.material);
  }
  comp.lights = spec.lights;
  comp.build(parse_proxy(flags.proxy), flags.alpha_min);

  const std::string cam_path = camera_override.empty() ? spec.camera_path : camera_override;
  if (cam_path.empty()) throw IoError("compose: no camera given (spec or --camera)");
  const CameraModel cam = load_camera(cam_path);

  const RenderSettings s = to_settings(flags);
  RenderStats stats;
  const Image img = render_composite(comp, cam, s, &stats);
  write_image(img, out_path);
  if (flags.stats_json) print_stats_json(stats);
  std::cerr << "wrote " << out_path << " (" << comp.parts.size() << " parts, "
            << comp.instance_xforms.size() << " instances, " << stats.wall_ms << " ms)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gtrace: differentiable ray tracer for volumetric particle scenes"};
  app.require_subcommand(1);

  // render
  auto* render = app.add_subcommand("render", "render a particle scene");
  std::string scene_path, camera_path, out_path = "out.png";
  render->add_option("scene", scene_path, "scene .ply")->required();
  render->add_option("camera", camera_path, "camera .json")->required();
  render->add_option("-o,--output", out_path, "output PNG")->capture_default_str();
  SettingsFlags render_flags;
  add_settings_flags(render, render_flags);

  // train
  auto* train = app.add_subcommand("train", "fit a scene to a dataset");
  std::string dataset_dir, config_path, train_out = "train_out", resume_path;
  train->add_option("dataset", dataset_dir, "dataset directory")->required();
  train->add_option("--config", config_path, "training config JSON");
  train->add_option("-o,--output", train_out, "output directory")->capture_default_str();
  train->add_option("--resume", resume_path, "resume from a .state checkpoint");
  SettingsFlags train_flags;
  train->add_flag("--deterministic", train_flags.deterministic, "single-threaded mode");
  // config keys exposed one-to-one as flags; a set flag overrides the file
  json train_overrides = json::object();
  double fv;
  long lv;
  std::string sv;
  auto add_cfg_num = [&](const std::string& key) {
    train->add_option_function<double>(
        "--" + key, [&train_overrides, key](const double& v) { train_overrides[key] = v; });
  };
  auto add_cfg_str = [&](const std::string& key) {
    train->add_option_function<std::string>(
        "--" + key,
        [&train_overrides, key](const std::string& v) { train_overrides[key] = v; });
  };
  for (const char* key :
       {"total_iters", "lr_rotation", "lr_scale", "lr_albedo", "lr_sh_rest", "lr_opacity",
        "lr_position", "lr_position_final", "densify_from", "densify_until",
        "densify_interval", "densify_grad_threshold", "split_scale_threshold",
        "split_scale_shrink", "prune_opacity", "opacity_reset_interval", "sh_degree_interval",
        "max_particles", "prune_target", "lambda_ssim", "incoherent_after", "incoherent_batch",
        "t_min_train", "k", "alpha_min", "sh_degree_max", "gg_n", "seed", "threads",
        "holdout_every"})
    add_cfg_num(key);
  for (const char* key : {"kernel", "proxy"}) add_cfg_str(key);
  (void)fv;
  (void)lv;
  (void)sv;

  // bench
  auto* bench = app.add_subcommand("bench", "sweep algorithms/primitives and emit a CSV");
  std::string bench_scene, bench_camera, bench_out = "bench.csv";
  bench->add_option("scene", bench_scene, "scene .ply")->required();
  bench->add_option("camera", bench_camera, "camera .json")->required();
  bench->add_option("-o,--output", bench_out, "output CSV")->capture_default_str();
  SettingsFlags bench_flags;
  add_settings_flags(bench, bench_flags);

  // compose
  auto* compose = app.add_subcommand("compose", "render a composition spec");
  std::string compose_spec, compose_out = "compose.png", compose_camera;
  compose->add_option("spec", compose_spec, "compose .json")->required();
  compose->add_option("-o,--output", compose_out, "output PNG")->capture_default_str();
  compose->add_option("--camera", compose_camera, "camera .json (overrides spec)");
  SettingsFlags compose_flags;
  add_settings_flags(compose, compose_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? 1 : 0;
  }

  try {
    if (render->parsed()) return cmd_render(scene_path, camera_path, out_path, render_flags);
    if (train->parsed())
      return cmd_train(dataset_dir, config_path, train_out, resume_path, train_flags,
                       train_overrides);
    if (bench->parsed()) return cmd_bench(bench_scene, bench_camera, bench_out, bench_flags);
    if (compose->parsed())
      return cmd_compose(compose_spec, compose_out, compose_camera, compose_flags, {}, compose);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
