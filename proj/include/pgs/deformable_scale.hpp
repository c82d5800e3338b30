#pragma once

#include <algorithm>
#include <vector>

#include "pgs/config.hpp"
#include "pgs/core.hpp"
#include "pgs/nn.hpp"
#include "pgs/params.hpp"
#include "pgs/patch_ops.hpp"

namespace pgs {

struct ScaleAssignment {
  NodeMatrix probs;          // N_loc x |S|, each row a probability distribution
  std::vector<int> scales;   // ordered scale set S

  void validate() const {
    if (scales.empty()) throw ContractError("scale set must not be empty");
    if (probs.cols() != static_cast<Eigen::Index>(scales.size()))
      throw ShapeError(cat("scale assignment has ", probs.cols(), " columns for ",
                           scales.size(), " scales"));
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      if (probs.row(i).minCoeff() < 0 || std::abs(probs.row(i).sum() - 1.0) > 1e-6)
        throw ContractError(cat("scale assignment row ", i, " is not a distribution"));
    }
  }
};

// ---------------------------------------------------------------------------
// Scale predictor: per style location, a softmax over the discrete scale set.
// Descriptor = [p-window channel means at the location | global-average-pooled
// content feature], fed through two hidden layers and a final FC.

inline void register_predictor_params(ParamStore& store, int channels, const Config& cfg) {
  const int hidden = cfg.predictor_hidden;
  const int num_scales = static_cast<int>(cfg.scales.size());
  store.add("predictor.fc1.weight", {hidden, 2 * channels});
  store.add("predictor.fc1.bias", {hidden});
  store.add("predictor.fc2.weight", {hidden, hidden});
  store.add("predictor.fc2.bias", {hidden});
  store.add("predictor.out.weight", {num_scales, hidden});
  store.add("predictor.out.bias", {num_scales});
}

inline void init_predictor_params(ParamStore& store, Rng& rng) {
  for (const char* name : {"predictor.fc1", "predictor.fc2", "predictor.out"}) {
    Param& w = store.at(std::string(name) + ".weight");
    const real sd = std::sqrt(2.0 / w.shape[1]);
    rng.fill_normal(w.value.data(), w.value.size(), 0.0, sd);
  }
}

struct PredictorCache {
  Eigen::VectorXd gap;           // content global average pool (c)
  NodeMatrix desc;               // N_loc x 2c
  NodeMatrix h1pre, h1, h2pre, h2, logits;
  ScaleAssignment assign;
  int c = 0, p = 0, stride = 0;
  int content_h = 0, content_w = 0, style_h = 0, style_w = 0;
};

namespace detail {
inline void style_location_grid(int h, int w, int p, int s, int& gh, int& gw) {
  check_patch_grid(h, w, p, s);
  gh = (h - p) / s + 1;
  gw = (w - p) / s + 1;
}
}  // namespace detail

inline ScaleAssignment predict_scales(const Tensor& content, const Tensor& style,
                                      const ParamStore& store, const Config& cfg,
                                      PredictorCache* cache) {
  if (content.c != style.c)
    throw ShapeError(cat("predict_scales: channel mismatch ", content.c, " vs ", style.c));
  const int c = content.c, p = cfg.patch_side, s = cfg.stride;
  int gh, gw;
  detail::style_location_grid(style.h, style.w, p, s, gh, gw);
  const int nloc = gh * gw;

  Eigen::VectorXd gap(c);
  const int chw = content.h * content.w;
  for (int ci = 0; ci < c; ++ci) {
    const real* plane = content.channel(ci);
    real sum = 0;
    for (int i = 0; i < chw; ++i) sum += plane[i];
    gap[ci] = sum / chw;
  }

  NodeMatrix desc(nloc, 2 * c);
  const real inv_pp = 1.0 / (static_cast<real>(p) * p);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const int loc = gy * gw + gx;
      for (int ci = 0; ci < c; ++ci) {
        real sum = 0;
        for (int dy = 0; dy < p; ++dy) {
          const real* row = &style.at(ci, gy * s + dy, gx * s);
          for (int dx = 0; dx < p; ++dx) sum += row[dx];
        }
        desc(loc, ci) = sum * inv_pp;
      }
      desc.row(loc).tail(c) = gap.transpose();
    }

  const Param& w1 = store.at("predictor.fc1.weight");
  const Param& b1 = store.at("predictor.fc1.bias");
  const Param& w2 = store.at("predictor.fc2.weight");
  const Param& b2 = store.at("predictor.fc2.bias");
  const Param& wo = store.at("predictor.out.weight");
  const Param& bo = store.at("predictor.out.bias");

  NodeMatrix h1pre = linear_forward(desc, w1, b1);
  NodeMatrix h1 = h1pre.cwiseMax(0.0);
  NodeMatrix h2pre = linear_forward(h1, w2, b2);
  NodeMatrix h2 = h2pre.cwiseMax(0.0);
  NodeMatrix logits = linear_forward(h2, wo, bo);

  ScaleAssignment out;
  out.scales = cfg.scales;
  out.probs = softmax_rows(logits);

  if (cache) {
    cache->gap = gap;
    cache->desc = desc;
    cache->h1pre = h1pre;
    cache->h1 = h1;
    cache->h2pre = h2pre;
    cache->h2 = h2;
    cache->logits = logits;
    cache->assign = out;
    cache->c = c;
    cache->p = p;
    cache->stride = s;
    cache->content_h = content.h;
    cache->content_w = content.w;
    cache->style_h = style.h;
    cache->style_w = style.w;
  }
  return out;
}

// Accumulates parameter gradients and (when non-null) input-feature gradients.
inline void predict_scales_backward(const NodeMatrix& gprobs, const PredictorCache& cache,
                                    ParamStore& store, Tensor* gcontent, Tensor* gstyle) {
  Param& w1 = store.at("predictor.fc1.weight");
  Param& b1 = store.at("predictor.fc1.bias");
  Param& w2 = store.at("predictor.fc2.weight");
  Param& b2 = store.at("predictor.fc2.bias");
  Param& wo = store.at("predictor.out.weight");
  Param& bo = store.at("predictor.out.bias");

  NodeMatrix glogits = softmax_rows_backward(cache.assign.probs, gprobs);
  NodeMatrix gh2 = linear_backward(cache.h2, wo, glogits, &wo.grad, &bo.grad);
  gh2 = (cache.h2pre.array() > 0).select(gh2, 0.0);
  NodeMatrix gh1 = linear_backward(cache.h1, w2, gh2, &w2.grad, &b2.grad);
  gh1 = (cache.h1pre.array() > 0).select(gh1, 0.0);
  NodeMatrix gdesc = linear_backward(cache.desc, w1, gh1, &w1.grad, &b1.grad);

  const int c = cache.c, p = cache.p, s = cache.stride;
  if (gstyle) {
    const int gw = (cache.style_w - p) / s + 1;
    const int gh = (cache.style_h - p) / s + 1;
    const real inv_pp = 1.0 / (static_cast<real>(p) * p);
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        const int loc = gy * gw + gx;
        for (int ci = 0; ci < c; ++ci) {
          const real g = gdesc(loc, ci) * inv_pp;
          for (int dy = 0; dy < p; ++dy) {
            real* row = &gstyle->at(ci, gy * s + dy, gx * s);
            for (int dx = 0; dx < p; ++dx) row[dx] += g;
          }
        }
      }
  }
  if (gcontent) {
    const real inv_hw = 1.0 / (static_cast<real>(cache.content_h) * cache.content_w);
    for (int ci = 0; ci < c; ++ci) {
      const real g = gdesc.col(c + ci).sum() * inv_hw;
      VecMap(gcontent->channel(ci), cache.content_h * cache.content_w).array() += g;
    }
  }
}

// ---------------------------------------------------------------------------
// Multi-scale style node extraction. Windows grow around each base-grid
// location's center and are clipped to bounds, then resized to side p.

inline Patch resize_patch(const Patch& patch, int target_side) {
  Patch out;
  out.origin_row = patch.origin_row;
  out.origin_col = patch.origin_col;
  out.native_scale = patch.native_scale;
  out.data = resize_bilinear(patch.data, target_side, target_side);
  return out;
}

struct MultiscaleCache {
  std::vector<NodeMatrix> per_scale;        // |S| matrices, N_loc x c*p*p
  std::vector<std::vector<int>> origin_y;   // [scale][loc] clipped window origin
  std::vector<std::vector<int>> origin_x;
  int c = 0, h = 0, w = 0, p = 0;
};

inline NodeMatrix extract_multiscale_style_nodes(const Tensor& style,
                                                 const ScaleAssignment& assign, int p, int stride,
                                                 bool hard, MultiscaleCache* cache) {
  assign.validate();
  int gh, gw;
  detail::style_location_grid(style.h, style.w, p, stride, gh, gw);
  const int nloc = gh * gw;
  if (assign.probs.rows() != nloc)
    throw ShapeError(cat("scale assignment has ", assign.probs.rows(), " rows for ", nloc,
                         " style locations"));
  for (int a : assign.scales)
    if (a > style.h || a > style.w)
      throw ShapeError(cat("scale ", a, " exceeds style feature map ", style.h, "x", style.w));

  const int c = style.c;
  const int din = c * p * p;
  const int ns = static_cast<int>(assign.scales.size());

  if (cache) {
    cache->per_scale.assign(ns, NodeMatrix());
    cache->origin_y.assign(ns, std::vector<int>(nloc));
    cache->origin_x.assign(ns, std::vector<int>(nloc));
    cache->c = c;
    cache->h = style.h;
    cache->w = style.w;
    cache->p = p;
  }

  std::vector<NodeMatrix> per_scale(ns);
  Tensor window;
  for (int si = 0; si < ns; ++si) {
    const int a = assign.scales[si];
    per_scale[si].resize(nloc, din);
    window = Tensor(c, a, a);
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        const int loc = gy * gw + gx;
        const int cy = gy * stride + p / 2, cx = gx * stride + p / 2;
        const int wy = std::clamp(cy - a / 2, 0, style.h - a);
        const int wx = std::clamp(cx - a / 2, 0, style.w - a);
        for (int ci = 0; ci < c; ++ci)
          for (int dy = 0; dy < a; ++dy)
            std::memcpy(&window.at(ci, dy, 0), &style.at(ci, wy + dy, wx), sizeof(real) * a);
        const Tensor resized = resize_bilinear(window, p, p);
        std::memcpy(per_scale[si].data() + static_cast<int64_t>(loc) * din, resized.v.data(),
                    sizeof(real) * din);
        if (cache) {
          cache->origin_y[si][loc] = wy;
          cache->origin_x[si][loc] = wx;
        }
      }
    if (cache) cache->per_scale[si] = per_scale[si];
  }

  NodeMatrix out(nloc, din);
  if (hard) {
    for (int loc = 0; loc < nloc; ++loc) {
      Eigen::Index best = 0;
      assign.probs.row(loc).maxCoeff(&best);
      out.row(loc) = per_scale[static_cast<int>(best)].row(loc);
    }
  } else {
    out.setZero();
    for (int si = 0; si < ns; ++si)
      out.array() += per_scale[si].array().colwise() * assign.probs.col(si).array();
  }
  return out;
}

// Soft-mode backward: distributes node gradients onto the per-scale patch
// branches (scaled by prob) and onto the probabilities (dot with the branch).
inline void extract_multiscale_backward(const NodeMatrix& gout, const ScaleAssignment& assign,
                                        const MultiscaleCache& cache, NodeMatrix* gprobs,
                                        Tensor* gstyle) {
  const int ns = static_cast<int>(assign.scales.size());
  const int nloc = static_cast<int>(gout.rows());
  const int c = cache.c, p = cache.p;
  if (gprobs) gprobs->setZero(nloc, ns);
  for (int si = 0; si < ns; ++si) {
    const int a = assign.scales[si];
    const NodeMatrix& flat = cache.per_scale[si];
    for (int loc = 0; loc < nloc; ++loc) {
      if (gprobs) (*gprobs)(loc, si) = gout.row(loc).dot(flat.row(loc));
      if (gstyle) {
        Tensor gpatch(c, p, p);
        const real prob = assign.probs(loc, si);
        ConstVecMap grow(gout.data() + static_cast<int64_t>(loc) * gout.cols(), gout.cols());
        VecMap(gpatch.v.data(), gpatch.v.size()) = prob * grow;
        const Tensor gwin = resize_bilinear_backward(gpatch, a, a);
        const int wy = cache.origin_y[si][loc], wx = cache.origin_x[si][loc];
        for (int ci = 0; ci < c; ++ci)
          for (int dy = 0; dy < a; ++dy) {
            real* dst = &gstyle->at(ci, wy + dy, wx);
            const real* src = &gwin.at(ci, dy, 0);
            for (int dx = 0; dx < a; ++dx) dst[dx] += src[dx];
          }
      }
    }
  }
}

// Fixed-scale fallback used when the deformable module is disabled.
inline NodeMatrix uniform_scale_assignment_nodes(const Tensor& style, int p, int stride) {
  return extract_node_matrix(style, p, stride);
}

}  // namespace pgs
