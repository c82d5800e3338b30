#pragma once

#include <cstring>
#include <vector>

#include "pgs/core.hpp"

namespace pgs {

struct Patch {
  Tensor data;           // (c, p, p)
  int origin_row = 0;    // top-left corner in source feature-map coordinates
  int origin_col = 0;
  int native_scale = 0;  // side length before any resize
};

struct PatchCollection {
  std::vector<Patch> patches;
  int src_c = 0, src_h = 0, src_w = 0;
  int stride = 1;
  int patch_side = 1;

  int grid_h() const { return (src_h - patch_side) / stride + 1; }
  int grid_w() const { return (src_w - patch_side) / stride + 1; }
};

inline void check_patch_grid(int h, int w, int p, int s) {
  if (p < 1) throw ShapeError("patch side must be >= 1");
  if (s < 1) throw ShapeError("stride must be >= 1");
  if (p > h || p > w)
    throw ShapeError(cat("patch side ", p, " exceeds feature map ", h, "x", w));
}

// Row-major sliding-window extraction; only full windows, no boundary pads.
inline PatchCollection extract_patches(const Tensor& f, int p, int s) {
  check_patch_grid(f.h, f.w, p, s);
  PatchCollection out;
  out.src_c = f.c;
  out.src_h = f.h;
  out.src_w = f.w;
  out.stride = s;
  out.patch_side = p;
  const int gh = out.grid_h(), gw = out.grid_w();
  out.patches.reserve(static_cast<size_t>(gh) * gw);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      Patch pt;
      pt.origin_row = gy * s;
      pt.origin_col = gx * s;
      pt.native_scale = p;
      pt.data = Tensor(f.c, p, p);
      for (int ci = 0; ci < f.c; ++ci)
        for (int dy = 0; dy < p; ++dy)
          std::memcpy(&pt.data.at(ci, dy, 0), &f.at(ci, pt.origin_row + dy, pt.origin_col),
                      sizeof(real) * p);
      out.patches.push_back(std::move(pt));
    }
  return out;
}

inline PatchCollection extract_patches(const FeatureMap& f, int p, int s) {
  return extract_patches(f.data, p, s);
}

// Channel-major, then row, then column: identical to the tensor's own layout.
inline NodeFeature patch2feat(const Patch& patch) {
  return ConstVecMap(patch.data.v.data(), static_cast<Eigen::Index>(patch.data.v.size()));
}

inline Patch feat2patch(const NodeFeature& feature, int c, int p1, int p2) {
  if (feature.size() != static_cast<Eigen::Index>(c) * p1 * p2)
    throw ShapeError(cat("feat2patch: vector length ", feature.size(), " does not match shape (",
                         c, ",", p1, ",", p2, ")"));
  Patch out;
  out.data = Tensor(c, p1, p2);
  out.native_scale = p1;
  std::memcpy(out.data.v.data(), feature.data(), sizeof(real) * feature.size());
  return out;
}

// ---------------------------------------------------------------------------
// Node-matrix forms used by the pipeline (one flattened patch per row).

inline NodeMatrix extract_node_matrix(const Tensor& f, int p, int s) {
  check_patch_grid(f.h, f.w, p, s);
  const int gh = (f.h - p) / s + 1, gw = (f.w - p) / s + 1;
  const int din = f.c * p * p;
  NodeMatrix x(static_cast<Eigen::Index>(gh) * gw, din);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      real* row = x.data() + (static_cast<int64_t>(gy) * gw + gx) * din;
      for (int ci = 0; ci < f.c; ++ci)
        for (int dy = 0; dy < p; ++dy)
          std::memcpy(row + (ci * p + dy) * p, &f.at(ci, gy * s + dy, gx * s), sizeof(real) * p);
    }
  return x;
}

// Adjoint of extract_node_matrix: scatter-add rows back onto the map.
inline Tensor extract_node_matrix_backward(const NodeMatrix& gx, int c, int h, int w, int p,
                                           int s) {
  check_patch_grid(h, w, p, s);
  const int gh = (h - p) / s + 1, gw = (w - p) / s + 1;
  const int din = c * p * p;
  if (gx.rows() != static_cast<Eigen::Index>(gh) * gw || gx.cols() != din)
    throw ShapeError(cat("extract backward: grad is ", gx.rows(), "x", gx.cols(), ", expected ",
                         gh * gw, "x", din));
  Tensor gf(c, h, w);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx2 = 0; gx2 < gw; ++gx2) {
      const real* row = gx.data() + (static_cast<int64_t>(gy) * gw + gx2) * din;
      for (int ci = 0; ci < c; ++ci)
        for (int dy = 0; dy < p; ++dy) {
          real* dst = &gf.at(ci, gy * s + dy, gx2 * s);
          const real* src = row + (ci * p + dy) * p;
          for (int dx = 0; dx < p; ++dx) dst[dx] += src[dx];
        }
    }
  return gf;
}

inline std::vector<int> coverage_counts(int h, int w, int p, int s) {
  const int gh = (h - p) / s + 1, gw = (w - p) / s + 1;
  std::vector<int> n(static_cast<size_t>(h) * w, 0);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx) ++n[(gy * s + dy) * static_cast<size_t>(w) + gx * s + dx];
  return n;
}

// Overlap-mean recomposition. The mean is evaluated as v0 + sum(vi - v0)/n,
// which returns the source values bit-exactly whenever all covering patches
// agree (the decompose-compose identity).
inline Tensor compose_from_node_matrix(const NodeMatrix& x, int c, int h, int w, int p, int s) {
  check_patch_grid(h, w, p, s);
  const int gh = (h - p) / s + 1, gw = (w - p) / s + 1;
  const int din = c * p * p;
  if (x.rows() != static_cast<Eigen::Index>(gh) * gw || x.cols() != din)
    throw ContractError(cat("compose: node matrix is ", x.rows(), "x", x.cols(), ", expected ",
                            gh * gw, "x", din));
  const size_t plane = static_cast<size_t>(h) * w;
  std::vector<real> first(plane * c, 0.0), acc(plane * c, 0.0);
  std::vector<int> count(plane, 0);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      const real* row = x.data() + (static_cast<int64_t>(gy) * gw + gx) * din;
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx) {
          const size_t pos = (gy * s + dy) * static_cast<size_t>(w) + gx * s + dx;
          if (count[pos] == 0) {
            for (int ci = 0; ci < c; ++ci) first[ci * plane + pos] = row[(ci * p + dy) * p + dx];
          } else {
            for (int ci = 0; ci < c; ++ci)
              acc[ci * plane + pos] += row[(ci * p + dy) * p + dx] - first[ci * plane + pos];
          }
          ++count[pos];
        }
    }
  Tensor out(c, h, w);
  for (int ci = 0; ci < c; ++ci)
    for (size_t pos = 0; pos < plane; ++pos) {
      if (count[pos] == 0)
        throw ContractError("compose: the patch grid does not cover the full map");
      out.v[ci * plane + pos] = first[ci * plane + pos] + acc[ci * plane + pos] / count[pos];
    }
  return out;
}

// Adjoint of the overlap mean: each patch entry receives gout(pos)/n(pos).
inline NodeMatrix compose_from_node_matrix_backward(const Tensor& gout, int p, int s) {
  check_patch_grid(gout.h, gout.w, p, s);
  const int gh = (gout.h - p) / s + 1, gw = (gout.w - p) / s + 1;
  const int din = gout.c * p * p;
  const auto n = coverage_counts(gout.h, gout.w, p, s);
  NodeMatrix gx(static_cast<Eigen::Index>(gh) * gw, din);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx2 = 0; gx2 < gw; ++gx2) {
      real* row = gx.data() + (static_cast<int64_t>(gy) * gw + gx2) * din;
      for (int ci = 0; ci < gout.c; ++ci)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx) {
            const size_t pos = (gy * s + dy) * static_cast<size_t>(gout.w) + gx2 * s + dx;
            row[(ci * p + dy) * p + dx] = gout.v[ci * gout.h * static_cast<size_t>(gout.w) + pos] /
                                          n[pos];
          }
    }
  return gx;
}

// Patch-object front end over the matrix composer.
inline Tensor compose_overlapping(const PatchCollection& coll) {
  const int p = coll.patch_side, s = coll.stride;
  check_patch_grid(coll.src_h, coll.src_w, p, s);
  const int gh = coll.grid_h(), gw = coll.grid_w();
  if (static_cast<int>(coll.patches.size()) != gh * gw)
    throw ContractError(cat("compose: ", coll.patches.size(), " patches but the grid holds ",
                            gh * gw));
  const int din = coll.src_c * p * p;
  NodeMatrix x(static_cast<Eigen::Index>(gh) * gw, din);
  for (int i = 0; i < gh * gw; ++i) {
    const Patch& pt = coll.patches[i];
    if (pt.data.c != coll.src_c || pt.data.h != p || pt.data.w != p)
      throw ContractError(cat("compose: patch ", i, " has shape ", pt.data.shape_str(),
                              ", expected (", coll.src_c, ",", p, ",", p, ")"));
    if (pt.origin_row != (i / gw) * s || pt.origin_col != (i % gw) * s)
      throw ContractError(cat("compose: patch ", i, " origin (", pt.origin_row, ",",
                              pt.origin_col, ") is off the stride grid"));
    std::memcpy(x.data() + static_cast<int64_t>(i) * din, pt.data.v.data(), sizeof(real) * din);
  }
  return compose_from_node_matrix(x, coll.src_c, coll.src_h, coll.src_w, p, s);
}

}  // namespace pgs
