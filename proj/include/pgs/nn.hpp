#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pgs/core.hpp"
#include "pgs/params.hpp"

namespace pgs {

// Mirror-without-repeat boundary index (period 2n-2), clamped for n == 1.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

// ---------------------------------------------------------------------------
// Convolution, stride 1, odd kernel, reflection padding (same-size output).
// im2col + GEMM, processed in column chunks to bound the scratch buffer.

namespace detail {
inline constexpr int64_t kConvChunkBytes = 16 << 20;

inline int conv_chunk_cols(int64_t K, int64_t total) {
  int64_t cols = kConvChunkBytes / (K * static_cast<int64_t>(sizeof(real)));
  cols = std::max<int64_t>(cols, 64);
  return static_cast<int>(std::min(cols, total));
}

inline void fill_col_chunk(const Tensor& x, int ksize, const std::vector<int>& ry,
                           const std::vector<int>& rx, int c0, int c1, NodeMatrix& col) {
  const int w = x.w;
  const int kk = ksize * ksize;
  for (int r = 0; r < col.rows(); ++r) {
    const int ci = r / kk;
    const int ky = (r % kk) / ksize;
    const int kx = r % ksize;
    const real* plane = x.channel(ci);
    real* dst = col.data() + static_cast<int64_t>(r) * col.cols();
    int y = c0 / w, xx = c0 % w;
    for (int pix = c0; pix < c1; ++pix) {
      dst[pix - c0] = plane[ry[y + ky] * w + rx[xx + kx]];
      if (++xx == w) {
        xx = 0;
        ++y;
      }
    }
  }
}
}  // namespace detail

inline void check_conv_shapes(const Tensor& x, const Param& w, const Param& b) {
  if (w.shape.size() != 4 || w.shape[2] != w.shape[3] || w.shape[2] % 2 == 0)
    throw ShapeError(cat("conv weight '", w.name, "' must be [out,in,k,k] with odd k"));
  if (w.shape[1] != x.c)
    throw ShapeError(cat("conv '", w.name, "' expects ", w.shape[1], " input channels, got ", x.c));
  if (b.shape.size() != 1 || b.shape[0] != w.shape[0])
    throw ShapeError(cat("conv bias '", b.name, "' must have ", w.shape[0], " entries"));
}

inline Tensor conv2d_forward(const Tensor& x, const Param& w, const Param& b) {
  check_conv_shapes(x, w, b);
  const int out_c = w.shape[0], ksize = w.shape[2], pad = ksize / 2;
  const int64_t K = static_cast<int64_t>(x.c) * ksize * ksize;
  const int64_t hw = static_cast<int64_t>(x.h) * x.w;

  std::vector<int> ry(x.h + 2 * pad), rx(x.w + 2 * pad);
  for (size_t t = 0; t < ry.size(); ++t) ry[t] = reflect_index(static_cast<int>(t) - pad, x.h);
  for (size_t t = 0; t < rx.size(); ++t) rx[t] = reflect_index(static_cast<int>(t) - pad, x.w);

  Tensor out(out_c, x.h, x.w);
  MatMap out_mat(out.v.data(), out_c, hw);
  ConstMatMap w_mat(w.value.data(), out_c, K);
  ConstVecMap b_vec(b.value.data(), out_c);

  const int chunk = detail::conv_chunk_cols(K, hw);
  NodeMatrix col(K, chunk);
  for (int64_t c0 = 0; c0 < hw; c0 += chunk) {
    const int c1 = static_cast<int>(std::min<int64_t>(c0 + chunk, hw));
    const int bcols = static_cast<int>(c1 - c0);
    if (bcols != col.cols()) col.resize(K, bcols);
    detail::fill_col_chunk(x, ksize, ry, rx, static_cast<int>(c0), c1, col);
    out_mat.middleCols(c0, bcols).noalias() = w_mat * col;
    out_mat.middleCols(c0, bcols).colwise() += b_vec;
  }
  return out;
}

// Accumulates into w_grad/b_grad when given; returns grad w.r.t. x when
// want_gin (an empty Tensor otherwise).
inline Tensor conv2d_backward(const Tensor& x, const Param& w, const Tensor& gout,
                              std::vector<real>* w_grad, std::vector<real>* b_grad,
                              bool want_gin) {
  const int out_c = w.shape[0], ksize = w.shape[2], pad = ksize / 2;
  if (gout.c != out_c || gout.h != x.h || gout.w != x.w)
    throw ShapeError(cat("conv backward: grad shape ", gout.shape_str(), " does not match"));
  const int64_t K = static_cast<int64_t>(x.c) * ksize * ksize;
  const int64_t hw = static_cast<int64_t>(x.h) * x.w;

  std::vector<int> ry(x.h + 2 * pad), rx(x.w + 2 * pad);
  for (size_t t = 0; t < ry.size(); ++t) ry[t] = reflect_index(static_cast<int>(t) - pad, x.h);
  for (size_t t = 0; t < rx.size(); ++t) rx[t] = reflect_index(static_cast<int>(t) - pad, x.w);

  ConstMatMap gout_mat(gout.v.data(), out_c, hw);
  ConstMatMap w_mat(w.value.data(), out_c, K);

  if (b_grad) {
    for (int ci = 0; ci < out_c; ++ci) {
      const real* gptr = gout.channel(ci);
      real s = 0;
      for (int64_t i = 0; i < hw; ++i) s += gptr[i];
      (*b_grad)[ci] += s;
    }
  }

  Tensor gin;
  if (want_gin) gin = zeros_like(x);

  const int chunk = detail::conv_chunk_cols(K, hw);
  NodeMatrix col(K, chunk), gcol(K, chunk);
  const int kk = ksize * ksize;
  for (int64_t c0 = 0; c0 < hw; c0 += chunk) {
    const int c1 = static_cast<int>(std::min<int64_t>(c0 + chunk, hw));
    const int bcols = static_cast<int>(c1 - c0);
    if (bcols != col.cols()) {
      col.resize(K, bcols);
      gcol.resize(K, bcols);
    }
    if (w_grad) {
      detail::fill_col_chunk(x, ksize, ry, rx, static_cast<int>(c0), c1, col);
      MatMap gw(w_grad->data(), out_c, K);
      gw.noalias() += gout_mat.middleCols(c0, bcols) * col.transpose();
    }
    if (want_gin) {
      gcol.noalias() = w_mat.transpose() * gout_mat.middleCols(c0, bcols);
      for (int r = 0; r < K; ++r) {
        const int ci = r / kk;
        const int ky = (r % kk) / ksize;
        const int kx = r % ksize;
        real* plane = gin.channel(ci);
        const real* src = gcol.data() + static_cast<int64_t>(r) * bcols;
        int y = static_cast<int>(c0) / x.w, xx = static_cast<int>(c0) % x.w;
        for (int pix = static_cast<int>(c0); pix < c1; ++pix) {
          plane[ry[y + ky] * x.w + rx[xx + kx]] += src[pix - c0];
          if (++xx == x.w) {
            xx = 0;
            ++y;
          }
        }
      }
    }
  }
  return gin;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2. Requires even spatial dims; argmax records the
// winning plane-local input index per output element.

inline Tensor maxpool2_forward(const Tensor& x, std::vector<int32_t>* argmax) {
  if (x.h % 2 != 0 || x.w % 2 != 0)
    throw ShapeError(cat("maxpool2 needs even spatial dims, got ", x.shape_str()));
  const int oh = x.h / 2, ow = x.w / 2;
  Tensor out(x.c, oh, ow);
  if (argmax) argmax->resize(static_cast<size_t>(x.c) * oh * ow);
  for (int ci = 0; ci < x.c; ++ci) {
    const real* plane = x.channel(ci);
    real* optr = out.channel(ci);
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const int y = 2 * oy, xx = 2 * ox;
        int best = y * x.w + xx;
        real bv = plane[best];
        const int cand[3] = {y * x.w + xx + 1, (y + 1) * x.w + xx, (y + 1) * x.w + xx + 1};
        for (int idx : cand)
          if (plane[idx] > bv) {
            bv = plane[idx];
            best = idx;
          }
        optr[oy * ow + ox] = bv;
        if (argmax) (*argmax)[(static_cast<size_t>(ci) * oh + oy) * ow + ox] = best;
      }
  }
  return out;
}

inline Tensor maxpool2_backward(const Tensor& gout, const std::vector<int32_t>& argmax, int in_h,
                                int in_w) {
  Tensor gin(gout.c, in_h, in_w);
  for (int ci = 0; ci < gout.c; ++ci) {
    real* plane = gin.channel(ci);
    const real* gptr = gout.channel(ci);
    const size_t base = static_cast<size_t>(ci) * gout.h * gout.w;
    for (int i = 0; i < gout.h * gout.w; ++i) plane[argmax[base + i]] += gptr[i];
  }
  return gin;
}

// ---------------------------------------------------------------------------
// Corner-aligned bilinear resize (exact identity when sizes match).

namespace detail {
struct LerpIndex {
  int i0, i1;
  real f;
};

inline std::vector<LerpIndex> lerp_table(int in, int out) {
  std::vector<LerpIndex> t(out);
  const real scale = (out > 1 && in > 1) ? static_cast<real>(in - 1) / (out - 1) : 0.0;
  for (int i = 0; i < out; ++i) {
    const real src = scale * i;
    int i0 = static_cast<int>(std::floor(src));
    real f = src - i0;
    if (i0 >= in - 1) {
      i0 = in - 1;
      f = 0.0;
    }
    t[i] = {i0, std::min(i0 + 1, in - 1), f};
  }
  return t;
}
}  // namespace detail

inline Tensor resize_bilinear(const Tensor& x, int oh, int ow) {
  if (oh < 1 || ow < 1) throw ShapeError("resize target dims must be >= 1");
  if (oh == x.h && ow == x.w) return x;
  const auto ty = detail::lerp_table(x.h, oh);
  const auto tx = detail::lerp_table(x.w, ow);
  Tensor out(x.c, oh, ow);
  for (int ci = 0; ci < x.c; ++ci) {
    const real* plane = x.channel(ci);
    real* optr = out.channel(ci);
    for (int y = 0; y < oh; ++y) {
      const auto& ly = ty[y];
      for (int xx = 0; xx < ow; ++xx) {
        const auto& lx = tx[xx];
        const real v00 = plane[ly.i0 * x.w + lx.i0], v01 = plane[ly.i0 * x.w + lx.i1];
        const real v10 = plane[ly.i1 * x.w + lx.i0], v11 = plane[ly.i1 * x.w + lx.i1];
        const real top = v00 + (v01 - v00) * lx.f;
        const real bot = v10 + (v11 - v10) * lx.f;
        optr[y * ow + xx] = top + (bot - top) * ly.f;
      }
    }
  }
  return out;
}

inline Tensor resize_bilinear_backward(const Tensor& gout, int in_h, int in_w) {
  if (gout.h == in_h && gout.w == in_w) return gout;
  const auto ty = detail::lerp_table(in_h, gout.h);
  const auto tx = detail::lerp_table(in_w, gout.w);
  Tensor gin(gout.c, in_h, in_w);
  for (int ci = 0; ci < gout.c; ++ci) {
    real* plane = gin.channel(ci);
    const real* gptr = gout.channel(ci);
    for (int y = 0; y < gout.h; ++y) {
      const auto& ly = ty[y];
      for (int xx = 0; xx < gout.w; ++xx) {
        const auto& lx = tx[xx];
        const real g = gptr[y * gout.w + xx];
        plane[ly.i0 * in_w + lx.i0] += (1 - ly.f) * (1 - lx.f) * g;
        plane[ly.i0 * in_w + lx.i1] += (1 - ly.f) * lx.f * g;
        plane[ly.i1 * in_w + lx.i0] += ly.f * (1 - lx.f) * g;
        plane[ly.i1 * in_w + lx.i1] += ly.f * lx.f * g;
      }
    }
  }
  return gin;
}

// ---------------------------------------------------------------------------
// Pointwise activations.

inline Tensor relu_forward(const Tensor& x) {
  Tensor out = x;
  for (real& v : out.v) v = v > 0 ? v : 0;
  return out;
}

inline Tensor relu_backward(const Tensor& x_in, const Tensor& gout) {
  Tensor gin = gout;
  for (size_t i = 0; i < gin.v.size(); ++i)
    if (x_in.v[i] <= 0) gin.v[i] = 0;
  return gin;
}

inline Tensor clamp01_forward(const Tensor& x) {
  Tensor out = x;
  for (real& v : out.v) v = clamp01(v);
  return out;
}

inline Tensor clamp01_backward(const Tensor& x_in, const Tensor& gout) {
  Tensor gin = gout;
  for (size_t i = 0; i < gin.v.size(); ++i)
    if (x_in.v[i] <= 0 || x_in.v[i] >= 1) gin.v[i] = 0;
  return gin;
}

inline real leaky_relu(real z, real slope) { return z > 0 ? z : slope * z; }
inline real leaky_relu_grad(real z, real slope) { return z > 0 ? 1.0 : slope; }

// ---------------------------------------------------------------------------
// Dense layers over row-major node matrices: Y = X W^T + b.

inline NodeMatrix linear_forward(const NodeMatrix& X, const Param& w, const Param& b) {
  if (w.shape.size() != 2 || X.cols() != w.shape[1])
    throw ShapeError(cat("linear '", w.name, "': input width ", X.cols(), " vs weight in-dim ",
                         w.shape.size() == 2 ? w.shape[1] : -1));
  const int out = w.shape[0], in = w.shape[1];
  NodeMatrix Y = X * w.mat(out, in).transpose();
  Y.rowwise() += ConstVecMap(b.value.data(), out).transpose();
  return Y;
}

inline NodeMatrix linear_backward(const NodeMatrix& X, const Param& w, const NodeMatrix& gY,
                                  std::vector<real>* w_grad, std::vector<real>* b_grad) {
  const int out = w.shape[0], in = w.shape[1];
  if (w_grad) MatMap(w_grad->data(), out, in).noalias() += gY.transpose() * X;
  if (b_grad)
    for (Eigen::Index r = 0; r < gY.rows(); ++r)
      for (int j = 0; j < out; ++j) (*b_grad)[j] += gY(r, j);
  return gY * w.mat(out, in);
}

inline NodeMatrix softmax_rows(const NodeMatrix& logits) {
  NodeMatrix y = logits;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    row = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  return y;
}

inline NodeMatrix softmax_rows_backward(const NodeMatrix& y, const NodeMatrix& gy) {
  NodeMatrix gz = y;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const real dot = y.row(r).cwiseProduct(gy.row(r)).sum();
    gz.row(r) = (y.row(r).array() * (gy.row(r).array() - dot)).matrix();
  }
  return gz;
}

// ---------------------------------------------------------------------------
// Sequential conv networks described as layer lists. Taps let callers collect
// intermediate activations by tag (loss-network feature pyramid).

struct LayerDef {
  enum class Kind { conv, relu, maxpool, upsample2, clamp };
  Kind kind;
  std::string param_name;  // conv layers
  int in_c = 0, out_c = 0, ksize = 3;
  std::string tag;  // activation recorded after this layer when non-empty
};

inline LayerDef conv_layer(std::string name, int in_c, int out_c, int ksize = 3) {
  return {LayerDef::Kind::conv, std::move(name), in_c, out_c, ksize, ""};
}
inline LayerDef relu_layer(std::string tag = "") {
  return {LayerDef::Kind::relu, "", 0, 0, 0, std::move(tag)};
}
inline LayerDef maxpool_layer() { return {LayerDef::Kind::maxpool, "", 0, 0, 0, ""}; }
inline LayerDef upsample_layer() { return {LayerDef::Kind::upsample2, "", 0, 0, 0, ""}; }
inline LayerDef clamp_layer() { return {LayerDef::Kind::clamp, "", 0, 0, 0, ""}; }

using NetDef = std::vector<LayerDef>;

inline void net_register_params(const NetDef& net, ParamStore& store, bool trainable) {
  for (const auto& l : net)
    if (l.kind == LayerDef::Kind::conv) {
      store.add(l.param_name + ".weight", {l.out_c, l.in_c, l.ksize, l.ksize}, trainable);
      store.add(l.param_name + ".bias", {l.out_c}, trainable);
    }
}

inline void net_init_he(const NetDef& net, ParamStore& store, Rng& rng) {
  for (const auto& l : net)
    if (l.kind == LayerDef::Kind::conv) {
      Param& w = store.at(l.param_name + ".weight");
      const real sd = std::sqrt(2.0 / (static_cast<real>(l.in_c) * l.ksize * l.ksize));
      rng.fill_normal(w.value.data(), w.value.size(), 0.0, sd);
      std::fill(store.at(l.param_name + ".bias").value.begin(),
                store.at(l.param_name + ".bias").value.end(), 0.0);
    }
}

struct NetCache {
  std::vector<Tensor> inputs;            // input tensor of each layer
  std::vector<std::vector<int32_t>> pool_argmax;
  Tensor output;
};

using TapMap = std::map<std::string, Tensor>;

inline Tensor net_forward(const NetDef& net, const ParamStore& store, const Tensor& x,
                          NetCache* cache, TapMap* taps) {
  Tensor cur = x;
  if (cache) {
    cache->inputs.clear();
    cache->pool_argmax.assign(net.size(), {});
  }
  for (size_t i = 0; i < net.size(); ++i) {
    const auto& l = net[i];
    if (cache) cache->inputs.push_back(cur);
    switch (l.kind) {
      case LayerDef::Kind::conv:
        cur = conv2d_forward(cur, store.at(l.param_name + ".weight"),
                             store.at(l.param_name + ".bias"));
        break;
      case LayerDef::Kind::relu:
        cur = relu_forward(cur);
        break;
      case LayerDef::Kind::maxpool:
        cur = maxpool2_forward(cur, cache ? &cache->pool_argmax[i] : nullptr);
        break;
      case LayerDef::Kind::upsample2:
        cur = resize_bilinear(cur, cur.h * 2, cur.w * 2);
        break;
      case LayerDef::Kind::clamp:
        cur = clamp01_forward(cur);
        break;
    }
    if (!l.tag.empty() && taps) (*taps)[l.tag] = cur;
  }
  if (cache) cache->output = cur;
  return cur;
}

// Backward through the whole stack. `gout` is the gradient at the network
// output (pass an all-zero tensor when only tap gradients drive the pass);
// `tap_grads` entries are added where their tags were recorded. Weight/bias
// gradients accumulate into the store only for trainable params.
inline Tensor net_backward(const NetDef& net, ParamStore& store, const NetCache& cache,
                           const Tensor& gout, const TapMap* tap_grads, bool want_gin) {
  Tensor g = gout;
  for (int i = static_cast<int>(net.size()) - 1; i >= 0; --i) {
    const auto& l = net[i];
    if (!l.tag.empty() && tap_grads) {
      auto it = tap_grads->find(l.tag);
      if (it != tap_grads->end()) {
        if (it->second.v.size() != g.v.size())
          throw ShapeError(cat("tap grad '", l.tag, "' shape mismatch"));
        for (size_t t = 0; t < g.v.size(); ++t) g.v[t] += it->second.v[t];
      }
    }
    const Tensor& x_in = cache.inputs[i];
    const bool need_more = want_gin || i > 0;
    switch (l.kind) {
      case LayerDef::Kind::conv: {
        Param& w = store.at(l.param_name + ".weight");
        Param& b = store.at(l.param_name + ".bias");
        g = conv2d_backward(x_in, w, g, w.trainable ? &w.grad : nullptr,
                            b.trainable ? &b.grad : nullptr, need_more);
        if (!need_more) return Tensor();
        break;
      }
      case LayerDef::Kind::relu:
        g = relu_backward(x_in, g);
        break;
      case LayerDef::Kind::maxpool:
        g = maxpool2_backward(g, cache.pool_argmax[i], x_in.h, x_in.w);
        break;
      case LayerDef::Kind::upsample2:
        g = resize_bilinear_backward(g, x_in.h, x_in.w);
        break;
      case LayerDef::Kind::clamp:
        g = clamp01_backward(x_in, g);
        break;
    }
  }
  return g;
}

}  // namespace pgs
