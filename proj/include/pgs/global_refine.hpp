#pragma once

#include <Eigen/Dense>

#include "pgs/core.hpp"

namespace pgs {

inline constexpr real kAdainEps = 1e-5;
inline constexpr real kStdGuard = 1e-12;

struct ChannelStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;  // population standard deviation
};

inline ChannelStats channel_stats(const Tensor& f) {
  const int n = f.h * f.w;
  ChannelStats st;
  st.mean.resize(f.c);
  st.std.resize(f.c);
  for (int ci = 0; ci < f.c; ++ci) {
    const real* plane = f.channel(ci);
    bool constant = true;
    for (int i = 1; i < n && constant; ++i) constant = plane[i] == plane[0];
    if (constant) {  // keeps (x - mu) exactly zero for flat planes
      st.mean[ci] = plane[0];
      st.std[ci] = 0.0;
      continue;
    }
    real sum = 0;
    for (int i = 0; i < n; ++i) sum += plane[i];
    const real mu = sum / n;
    real sq = 0;
    for (int i = 0; i < n; ++i) {
      const real d = plane[i] - mu;
      sq += d * d;
    }
    st.mean[ci] = mu;
    st.std[ci] = std::sqrt(sq / n);
  }
  return st;
}

// Accumulates d(loss)/d(f) given gradients w.r.t. the per-channel stats.
// Constant channels (std below guard) get zero gradient through std.
inline void channel_stats_backward(const Tensor& f, const ChannelStats& st,
                                   const Eigen::VectorXd& gmean, const Eigen::VectorXd& gstd,
                                   Tensor& gf) {
  const int n = f.h * f.w;
  for (int ci = 0; ci < f.c; ++ci) {
    ConstVecMap plane(f.channel(ci), n);
    VecMap gplane(gf.channel(ci), n);
    gplane.array() += gmean[ci] / n;
    if (st.std[ci] > kStdGuard)
      gplane.array() += gstd[ci] * (plane.array() - st.mean[ci]) / (n * st.std[ci]);
  }
}

struct AdainCache {
  Tensor xhat;  // (x - mu_x) / (sd_x + eps)
  Eigen::VectorXd mu_x, sd_x, mu_s, sd_s;
};

// y = sd_s * (x - mu_x) / (sd_x + eps) + mu_s, per channel.
inline Tensor adain_forward(const Tensor& x, const Tensor& style, AdainCache* cache) {
  if (x.c != style.c)
    throw ShapeError(cat("adain: channel mismatch ", x.c, " vs ", style.c));
  const ChannelStats sx = channel_stats(x);
  const ChannelStats ss = channel_stats(style);
  Tensor out(x.c, x.h, x.w);
  Tensor xhat(x.c, x.h, x.w);
  const int n = x.h * x.w;
  for (int ci = 0; ci < x.c; ++ci) {
    ConstVecMap plane(x.channel(ci), n);
    VecMap hat(xhat.channel(ci), n);
    VecMap optr(out.channel(ci), n);
    hat = (plane.array() - sx.mean[ci]) / (sx.std[ci] + kAdainEps);
    optr = ss.std[ci] * hat.array() + ss.mean[ci];
  }
  if (cache) {
    cache->xhat = xhat;
    cache->mu_x = sx.mean;
    cache->sd_x = sx.std;
    cache->mu_s = ss.mean;
    cache->sd_s = ss.std;
  }
  return out;
}

// Gradients flow to both inputs: x through the normalization, style through
// its channel statistics. Accumulates into gx / gstyle when non-null.
inline void adain_backward(const Tensor& x, const Tensor& style, const AdainCache& cache,
                           const Tensor& gout, Tensor* gx, Tensor* gstyle) {
  const int n = x.h * x.w;
  const int ns = style.h * style.w;
  for (int ci = 0; ci < x.c; ++ci) {
    const real* g = gout.channel(ci);
    const real* hat = cache.xhat.channel(ci);
    real gsum = 0, ghsum = 0;
    for (int i = 0; i < n; ++i) {
      gsum += g[i];
      ghsum += g[i] * hat[i];
    }
    if (gx) {
      // ghat -> gx through mean/std of x
      if (cache.sd_x[ci] > kStdGuard) {
        const real d = cache.sd_x[ci] + kAdainEps;
        const real ss = cache.sd_s[ci];
        const real m1 = ss * gsum / n;
        const real s2 = ss * ghsum / (n * cache.sd_x[ci]);
        real* gxp = gx->channel(ci);
        for (int i = 0; i < n; ++i) gxp[i] += (ss * g[i] - m1) / d - hat[i] * s2;
      }
    }
    if (gstyle) {
      const real* splane = style.channel(ci);
      real* gsp = gstyle->channel(ci);
      const real gmu = gsum / ns;
      for (int i = 0; i < ns; ++i) gsp[i] += gmu;
      if (cache.sd_s[ci] > kStdGuard) {
        const real scale = ghsum / (ns * cache.sd_s[ci]);
        for (int i = 0; i < ns; ++i) gsp[i] += scale * (splane[i] - cache.mu_s[ci]);
      }
    }
  }
}

inline Tensor adain(const Tensor& x, const Tensor& style) {
  return adain_forward(x, style, nullptr);
}

inline FeatureMap adain(const FeatureMap& x, const FeatureMap& style) {
  return {adain_forward(x.data, style.data, nullptr), x.layer_tag};
}

}  // namespace pgs
