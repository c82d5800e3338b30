#pragma once

#include <map>
#include <string>

#include "pgs/config.hpp"
#include "pgs/core.hpp"
#include "pgs/feature_codec.hpp"
#include "pgs/global_refine.hpp"

namespace pgs {

struct LossBreakdown {
  real content = 0;
  real style = 0;
  real total = 0;
  real lambda = 0;
};

namespace detail {
inline constexpr real kRmsGuard = 1e-30;

// Norm reduction convention: root of the mean square over all elements.
inline real rms_diff(const Tensor& a, const Tensor& b) {
  if (a.v.size() != b.v.size())
    throw ShapeError(cat("loss: feature shapes ", a.shape_str(), " vs ", b.shape_str()));
  real acc = 0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    const real d = a.v[i] - b.v[i];
    acc += d * d;
  }
  return std::sqrt(acc / a.v.size());
}

inline real rms_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return std::sqrt((a - b).squaredNorm() / a.size());
}
}  // namespace detail

struct ObjectiveCache {
  LossNetCache out_net;                      // loss network cache for the output image
  LossFeatures fo, fc, fs;                   // features of output / content / style
  std::map<std::string, ChannelStats> st_o;  // per-layer stats of the output features
  std::map<std::string, ChannelStats> st_s;
  LossBreakdown losses;
};

inline real content_loss_from_features(const LossFeatures& fo, const LossFeatures& fc) {
  return detail::rms_diff(fo.at("relu4_1").data, fc.at("relu4_1").data);
}

inline real style_loss_from_stats(const std::map<std::string, ChannelStats>& st_o,
                                  const std::map<std::string, ChannelStats>& st_s) {
  real loss = 0;
  for (const char* tag : kLossTags) {
    const ChannelStats& a = st_o.at(tag);
    const ChannelStats& b = st_s.at(tag);
    loss += detail::rms_diff(a.mean, b.mean) + detail::rms_diff(a.std, b.std);
  }
  return loss;
}

inline LossBreakdown total_loss_forward(const ImageTensor& output, const ImageTensor& content,
                                        const ImageTensor& style, real lambda,
                                        const ParamStore& store, const Config& cfg,
                                        ObjectiveCache* cache) {
  if (lambda < 0) throw ParamError("lambda must be >= 0");
  ObjectiveCache local;
  ObjectiveCache& c = cache ? *cache : local;
  c.fo = extract_loss_features(output, store, cfg, cache ? &c.out_net : nullptr);
  c.fc = extract_loss_features(content, store, cfg, nullptr);
  c.fs = extract_loss_features(style, store, cfg, nullptr);
  for (const char* tag : kLossTags) {
    c.st_o[tag] = channel_stats(c.fo.at(tag).data);
    c.st_s[tag] = channel_stats(c.fs.at(tag).data);
  }
  LossBreakdown out;
  out.lambda = lambda;
  out.content = content_loss_from_features(c.fo, c.fc);
  out.style = style_loss_from_stats(c.st_o, c.st_s);
  out.total = out.content + lambda * out.style;
  c.losses = out;
  return out;
}

inline real content_loss(const ImageTensor& output, const ImageTensor& content,
                         const ParamStore& store, const Config& cfg) {
  const LossFeatures fo = extract_loss_features(output, store, cfg, nullptr);
  const LossFeatures fc = extract_loss_features(content, store, cfg, nullptr);
  return content_loss_from_features(fo, fc);
}

inline real style_loss(const ImageTensor& output, const ImageTensor& style,
                       const ParamStore& store, const Config& cfg) {
  const LossFeatures fo = extract_loss_features(output, store, cfg, nullptr);
  const LossFeatures fs = extract_loss_features(style, store, cfg, nullptr);
  std::map<std::string, ChannelStats> st_o, st_s;
  for (const char* tag : kLossTags) {
    st_o[tag] = channel_stats(fo.at(tag).data);
    st_s[tag] = channel_stats(fs.at(tag).data);
  }
  return style_loss_from_stats(st_o, st_s);
}

inline LossBreakdown total_loss(const ImageTensor& output, const ImageTensor& content,
                                const ImageTensor& style, real lambda, const ParamStore& store,
                                const Config& cfg) {
  return total_loss_forward(output, content, style, lambda, store, cfg, nullptr);
}

// d(total)/d(output image). RMS terms at exactly zero get zero subgradient.
inline Tensor total_loss_backward(const ObjectiveCache& cache, ParamStore& store,
                                  const Config& cfg) {
  TapMap tap_grads;
  for (const char* tag : kLossTags)
    tap_grads[tag] = zeros_like(cache.fo.at(tag).data);

  {  // content term at relu4_1
    const Tensor& a = cache.fo.at("relu4_1").data;
    const Tensor& b = cache.fc.at("relu4_1").data;
    const real loss = cache.losses.content;
    if (loss > detail::kRmsGuard) {
      Tensor& g = tap_grads["relu4_1"];
      const real scale = 1.0 / (loss * a.v.size());
      for (size_t i = 0; i < a.v.size(); ++i) g.v[i] += (a.v[i] - b.v[i]) * scale;
    }
  }

  if (cache.losses.lambda > 0) {
    for (const char* tag : kLossTags) {
      const ChannelStats& so = cache.st_o.at(tag);
      const ChannelStats& ss = cache.st_s.at(tag);
      const Eigen::Index n = so.mean.size();
      const real lmu = detail::rms_diff(so.mean, ss.mean);
      const real lsd = detail::rms_diff(so.std, ss.std);
      Eigen::VectorXd gmu = Eigen::VectorXd::Zero(n);
      Eigen::VectorXd gsd = Eigen::VectorXd::Zero(n);
      if (lmu > detail::kRmsGuard)
        gmu = cache.losses.lambda * (so.mean - ss.mean) / (lmu * n);
      if (lsd > detail::kRmsGuard)
        gsd = cache.losses.lambda * (so.std - ss.std) / (lsd * n);
      channel_stats_backward(cache.fo.at(tag).data, so, gmu, gsd, tap_grads[tag]);
    }
  }

  return loss_features_backward(cache.out_net, tap_grads, store, cfg);
}

}  // namespace pgs
