// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient oracle: central differences (h=1e-4) over the
// 64-bit brute-force renderer, for the loss L = sum_r dot(g_r, radiance_r).
// Probes whose +h/-h renders blend a different hit sequence straddle a
// discontinuity (proxy edge, alpha_min gate, 0.999 clamp, T_min stop) and are
// marked invalid rather than compared. Rays whose float and double blend
// signatures already disagree at the center point are dropped up front.

#pragma once

#include <vector>

#include "gtrace/grad.hpp"
#include "gtrace/oracle.hpp"

namespace gtrace::testutil {

inline constexpr int kParamsPerParticle = 59;  // mu3 quat4 scale3 sigma_logit1 sh48

inline void apply_param(ParticleT<double>& p, int local, double delta) {
  if (local < 3) {
    p.mu[local] += delta;
  } else if (local < 7) {
    p.quat[local - 3] += delta;
  } else if (local < 10) {
    p.scale[local - 7] += delta;
  } else if (local == 10) {
    const double l = std::log(p.opacity / (1.0 - p.opacity));
    p.opacity = 1.0 / (1.0 + std::exp(-(l + delta)));
  } else {
    p.sh[size_t(local - 11)] += delta;
  }
}

struct FdRay {
  Vec3d o, d;
  Vec3d g;  // dL/dradiance for this ray
};

struct FdOutcome {
  std::vector<double> grads;   // kParamsPerParticle * n, row-major by particle
  std::vector<uint8_t> valid;  // same layout; 0 = probe straddled a discontinuity
  size_t dropped_rays = 0;
};

inline FdOutcome fd_gradients(const Scene& scene, const ProxySet& proxies, ProxyKind kind,
                              double alpha_min, double t_min_transmittance, int sh_degree,
                              std::vector<FdRay> rays, double h = 1e-4) {
  std::vector<ParticleT<double>> base;
  base.reserve(scene.size());
  for (const Particle& p : scene) base.push_back(p.cast<double>());

  // drop rays that sit on a float/double knife edge at the center point
  {
    const OracleScene<float> osf = make_oracle_scene(scene, proxies);
    const OracleScene<double> osd = make_oracle_scene(base, kind, alpha_min);
    std::vector<FdRay> kept;
    size_t dropped = 0;
    for (const FdRay& r : rays) {
      std::vector<uint64_t> sf, sd;
      oracle_render_ray<float>(osf, Vec3f(r.o), Vec3f(r.d), float(alpha_min),
                               float(t_min_transmittance), sh_degree, OracleOrder::ProxyEntry,
                               &sf);
      oracle_render_ray<double>(osd, r.o, r.d, alpha_min, t_min_transmittance, sh_degree,
                                OracleOrder::ProxyEntry, &sd);
      if (sf == sd)
        kept.push_back(r);
      else
        dropped++;
    }
    rays = std::move(kept);
    FdOutcome out;
    out.dropped_rays = dropped;
    out.grads.assign(scene.size() * kParamsPerParticle, 0.0);
    out.valid.assign(scene.size() * kParamsPerParticle, 1);

    auto evaluate = [&](const std::vector<ParticleT<double>>& particles,
                        std::vector<uint64_t>& signature) {
      const OracleScene<double> os = make_oracle_scene(particles, kind, alpha_min);
      double loss = 0;
      for (const FdRay& r : rays) {
        const OracleResult<double> res = oracle_render_ray<double>(
            os, r.o, r.d, alpha_min, t_min_transmittance, sh_degree, OracleOrder::ProxyEntry,
            &signature);
        loss += dot(r.g, res.radiance);
      }
      return loss;
    };

    for (size_t pi = 0; pi < scene.size(); ++pi) {
      for (int local = 0; local < kParamsPerParticle; ++local) {
        auto plus = base;
        apply_param(plus[pi], local, +h);
        auto minus = base;
        apply_param(minus[pi], local, -h);
        std::vector<uint64_t> sig_plus, sig_minus;
        const double up = evaluate(plus, sig_plus);
        const double dn = evaluate(minus, sig_minus);
        const size_t idx = pi * kParamsPerParticle + size_t(local);
        if (sig_plus != sig_minus) {
          out.valid[idx] = 0;
          continue;
        }
        out.grads[idx] = (up - dn) / (2.0 * h);
      }
    }
    return out;
  }
}

// Flattens analytic GradientBuffers into the same layout. The quaternion
// entries are the tangent-projected gradients, matching what central
// differences over raw-then-normalized quaternions measure at unit norm.
inline std::vector<double> flatten_gradients(const GradientBuffers& g) {
  std::vector<double> out(g.size() * kParamsPerParticle, 0.0);
  for (size_t i = 0; i < g.size(); ++i) {
    double* row = out.data() + i * kParamsPerParticle;
    for (int c = 0; c < 3; ++c) row[c] = g.d_mu[i][c];
    for (int c = 0; c < 4; ++c) row[3 + c] = g.d_quat[i][c];
    for (int c = 0; c < 3; ++c) row[7 + c] = g.d_scale[i][c];
    row[10] = g.d_sigma_logit[i];
    for (int c = 0; c < 48; ++c) row[11 + c] = g.d_sh[i][size_t(c)];
  }
  return out;
}

}  // namespace gtrace::testutil
