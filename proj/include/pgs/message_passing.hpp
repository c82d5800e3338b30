#pragma once

#include <string>
#include <vector>

#include "pgs/config.hpp"
#include "pgs/core.hpp"
#include "pgs/graph_builder.hpp"
#include "pgs/nn.hpp"
#include "pgs/params.hpp"

namespace pgs {

// View over one stage's attention parameters. W_b maps d_in -> d_head per
// head; W_a scores the concatenated pair; a shared output transform returns
// the head-averaged message to d_in before the residual.
struct AttentionParams {
  int heads = 0, d_head = 0, d_in = 0;
  real slope = 0.2;
  const Param* Wb = nullptr;    // [heads, d_head, d_in]
  const Param* Wa = nullptr;    // [heads, 2*d_head]
  const Param* out_w = nullptr; // [d_in, d_head]
  const Param* out_b = nullptr; // [d_in]

  ConstMatMap Wb_head(int h) const {
    return ConstMatMap(Wb->value.data() + static_cast<int64_t>(h) * d_head * d_in, d_head, d_in);
  }
  ConstVecMap Wa_head(int h) const {
    return ConstVecMap(Wa->value.data() + static_cast<int64_t>(h) * 2 * d_head, 2 * d_head);
  }
};

inline void register_attention_params(ParamStore& store, const std::string& prefix, int d_in,
                                      const Config& cfg) {
  store.add(prefix + ".Wb", {cfg.heads, cfg.head_dim, d_in});
  store.add(prefix + ".Wa", {cfg.heads, 2 * cfg.head_dim});
  store.add(prefix + ".out.weight", {d_in, cfg.head_dim});
  store.add(prefix + ".out.bias", {d_in});
}

inline void init_attention_params(ParamStore& store, const std::string& prefix, Rng& rng) {
  Param& wb = store.at(prefix + ".Wb");
  rng.fill_normal(wb.value.data(), wb.value.size(), 0.0, std::sqrt(1.0 / wb.shape[2]));
  Param& wa = store.at(prefix + ".Wa");
  rng.fill_normal(wa.value.data(), wa.value.size(), 0.0, std::sqrt(1.0 / wa.shape[1]));
  Param& ow = store.at(prefix + ".out.weight");
  rng.fill_normal(ow.value.data(), ow.value.size(), 0.0, std::sqrt(1.0 / ow.shape[1]));
}

inline AttentionParams attention_params(const ParamStore& store, const std::string& prefix,
                                        const Config& cfg, int d_in) {
  AttentionParams ap;
  ap.heads = cfg.heads;
  ap.d_head = cfg.head_dim;
  ap.d_in = d_in;
  ap.slope = cfg.leaky_slope;
  ap.Wb = &store.at(prefix + ".Wb");
  ap.Wa = &store.at(prefix + ".Wa");
  ap.out_w = &store.at(prefix + ".out.weight");
  ap.out_b = &store.at(prefix + ".out.bias");
  if (ap.Wb->shape[2] != d_in)
    throw ShapeError(cat(prefix, ".Wb expects d_in ", ap.Wb->shape[2], ", got ", d_in));
  return ap;
}

// ---------------------------------------------------------------------------
// Single-node reference operations.

inline std::vector<real> attention_coefficients(const NodeFeature& center,
                                                const std::vector<NodeFeature>& neighbors,
                                                const AttentionParams& params, int head) {
  if (neighbors.empty()) throw ContractError("attention over an empty neighbor list");
  if (head < 0 || head >= params.heads)
    throw ParamError(cat("head ", head, " out of range [0,", params.heads, ")"));
  const auto wb = params.Wb_head(head);
  const auto wa = params.Wa_head(head);
  const Eigen::VectorXd bc = wb * center;
  const real sc = wa.head(params.d_head).dot(bc);
  Eigen::VectorXd logits(neighbors.size());
  for (size_t j = 0; j < neighbors.size(); ++j) {
    const Eigen::VectorXd bn = wb * neighbors[j];
    logits[static_cast<Eigen::Index>(j)] =
        leaky_relu(sc + wa.tail(params.d_head).dot(bn), params.slope);
  }
  logits.array() -= logits.maxCoeff();
  Eigen::VectorXd w = logits.array().exp();
  w /= w.sum();
  return {w.data(), w.data() + w.size()};
}

inline NodeFeature aggregate(const NodeFeature& center, const std::vector<NodeFeature>& neighbors,
                             const AttentionParams& params) {
  if (neighbors.empty()) throw ContractError("aggregate over an empty neighbor list");
  Eigen::VectorXd u = Eigen::VectorXd::Zero(params.d_head);
  for (int h = 0; h < params.heads; ++h) {
    const auto coeff = attention_coefficients(center, neighbors, params, h);
    const auto wb = params.Wb_head(h);
    Eigen::VectorXd uh = Eigen::VectorXd::Zero(params.d_head);
    for (size_t j = 0; j < neighbors.size(); ++j) uh += coeff[j] * (wb * neighbors[j]);
    u += uh;
  }
  u /= params.heads;
  const int d_in = params.d_in;
  NodeFeature out = params.out_w->mat(d_in, params.d_head) * u;
  out += ConstVecMap(params.out_b->value.data(), d_in);
  out += center;
  return out;
}

// ---------------------------------------------------------------------------
// Batched attention pass over a uniform-k edge set.

struct StageCache {
  std::vector<NodeMatrix> Bq, Bk;   // per head
  std::vector<NodeMatrix> pre;     // per head, N x k pre-LeakyReLU logits
  std::vector<NodeMatrix> w;       // per head, N x k attention weights
  NodeMatrix u;                    // N x d_head, mean message over heads
};

inline NodeMatrix attention_pass(const NodeMatrix& queries, const NodeMatrix& keys,
                                 const KnnEdges& edges, const ParamStore& store,
                                 const std::string& prefix, const Config& cfg,
                                 StageCache* cache) {
  const int n = static_cast<int>(queries.rows());
  const int k = edges.k;
  if (k < 1) throw ContractError("attention pass needs at least one neighbor per node");
  if (edges.num_queries() != n)
    throw ShapeError(cat("edge set covers ", edges.num_queries(), " queries, expected ", n));
  const AttentionParams ap = attention_params(store, prefix, cfg, static_cast<int>(queries.cols()));
  if (keys.cols() != queries.cols())
    throw ShapeError("attention pass: query/key width mismatch");

  if (cache) {
    cache->Bq.assign(ap.heads, NodeMatrix());
    cache->Bk.assign(ap.heads, NodeMatrix());
    cache->pre.assign(ap.heads, NodeMatrix());
    cache->w.assign(ap.heads, NodeMatrix());
  }

  NodeMatrix u = NodeMatrix::Zero(n, ap.d_head);
  for (int h = 0; h < ap.heads; ++h) {
    const auto wb = ap.Wb_head(h);
    const auto wa = ap.Wa_head(h);
    NodeMatrix bq = queries * wb.transpose();  // n x d_head
    NodeMatrix bk = keys * wb.transpose();     // m x d_head
    Eigen::VectorXd sq = bq * wa.head(ap.d_head);
    Eigen::VectorXd sk = bk * wa.tail(ap.d_head);

    NodeMatrix pre(n, k);
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < k; ++r) pre(i, r) = sq[i] + sk[edges.neighbor(i, r)];
    NodeMatrix lo = pre;
    for (real* ptr = lo.data(); ptr != lo.data() + lo.size(); ++ptr)
      *ptr = leaky_relu(*ptr, ap.slope);
    NodeMatrix w = softmax_rows(lo);

    NodeMatrix uh = NodeMatrix::Zero(n, ap.d_head);
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < k; ++r) uh.row(i) += w(i, r) * bk.row(edges.neighbor(i, r));
    u += uh;

    if (cache) {
      cache->Bq[h] = std::move(bq);
      cache->Bk[h] = std::move(bk);
      cache->pre[h] = std::move(pre);
      cache->w[h] = std::move(w);
    }
  }
  u /= ap.heads;
  if (cache) cache->u = u;

  NodeMatrix out = u * ap.out_w->mat(ap.d_in, ap.d_head).transpose();
  out.rowwise() += ConstVecMap(ap.out_b->value.data(), ap.d_in).transpose();
  out += queries;  // residual
  return out;
}

// Accumulates parameter gradients into the store and input gradients into
// gqueries/gkeys (callers pass the same buffer twice when queries == keys).
inline void attention_pass_backward(const NodeMatrix& queries, const NodeMatrix& keys,
                                    const KnnEdges& edges, const StageCache& cache,
                                    const NodeMatrix& gout, ParamStore& store,
                                    const std::string& prefix, const Config& cfg,
                                    NodeMatrix* gqueries, NodeMatrix* gkeys) {
  const int n = static_cast<int>(queries.rows());
  const int m = static_cast<int>(keys.rows());
  const int k = edges.k;
  const AttentionParams ap = attention_params(store, prefix, cfg, static_cast<int>(queries.cols()));
  Param& wb_p = store.at(prefix + ".Wb");
  Param& wa_p = store.at(prefix + ".Wa");
  Param& ow_p = store.at(prefix + ".out.weight");
  Param& ob_p = store.at(prefix + ".out.bias");

  if (gqueries) *gqueries += gout;  // residual path

  // Output transform.
  MatMap gow(ow_p.grad.data(), ap.d_in, ap.d_head);
  gow.noalias() += gout.transpose() * cache.u;
  for (Eigen::Index r = 0; r < gout.rows(); ++r)
    for (Eigen::Index j = 0; j < gout.cols(); ++j) ob_p.grad[j] += gout(r, j);
  NodeMatrix gu = gout * ow_p.mat(ap.d_in, ap.d_head);
  gu /= ap.heads;  // mean over heads

  for (int h = 0; h < ap.heads; ++h) {
    const auto wb = ap.Wb_head(h);
    const auto wa = ap.Wa_head(h);
    const NodeMatrix& bq = cache.Bq[h];
    const NodeMatrix& bk = cache.Bk[h];
    const NodeMatrix& w = cache.w[h];
    const NodeMatrix& pre = cache.pre[h];

    NodeMatrix gbk = NodeMatrix::Zero(m, ap.d_head);
    NodeMatrix gw(n, k);
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < k; ++r) {
        const int j = edges.neighbor(i, r);
        gw(i, r) = gu.row(i).dot(bk.row(j));
        gbk.row(j) += w(i, r) * gu.row(i);
      }

    NodeMatrix glo = softmax_rows_backward(w, gw);
    for (Eigen::Index t = 0; t < glo.size(); ++t)
      glo.data()[t] *= leaky_relu_grad(pre.data()[t], ap.slope);

    Eigen::VectorXd gsq = glo.rowwise().sum();
    Eigen::VectorXd gsk = Eigen::VectorXd::Zero(m);
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < k; ++r) gsk[edges.neighbor(i, r)] += glo(i, r);

    // s_q = Bq a1, s_k = Bk a2
    VecMap gwa(wa_p.grad.data() + static_cast<int64_t>(h) * 2 * ap.d_head, 2 * ap.d_head);
    gwa.head(ap.d_head) += bq.transpose() * gsq;
    gwa.tail(ap.d_head) += bk.transpose() * gsk;

    NodeMatrix gbq = gsq * wa.head(ap.d_head).transpose();
    gbk.noalias() += gsk * wa.tail(ap.d_head).transpose();

    MatMap gwb(wb_p.grad.data() + static_cast<int64_t>(h) * ap.d_head * ap.d_in, ap.d_head,
               ap.d_in);
    gwb.noalias() += gbq.transpose() * queries;
    gwb.noalias() += gbk.transpose() * keys;
    if (gqueries) gqueries->noalias() += gbq * wb;
    if (gkeys) gkeys->noalias() += gbk * wb;
  }
}

// ---------------------------------------------------------------------------
// Alternate aggregators (ablation). Formulas:
//   gcn:      y = W * mean_j(x_j) + b
//   gin:      y = MLP((1 + eps) * center + sum_j x_j), eps = 0
//   sage:     y = W * [center || mean_j(x_j)] + b
//   edgeconv: y = max_j MLP([center || x_j - center])   (elementwise max)

inline void register_aggregator_params(ParamStore& store, const std::string& prefix,
                                       Aggregator kind, int d_in, const Config& cfg) {
  switch (kind) {
    case Aggregator::gat:
      register_attention_params(store, prefix, d_in, cfg);
      break;
    case Aggregator::gcn:
      store.add(prefix + ".gcn.weight", {d_in, d_in});
      store.add(prefix + ".gcn.bias", {d_in});
      break;
    case Aggregator::gin:
      store.add(prefix + ".gin.w1", {d_in, d_in});
      store.add(prefix + ".gin.b1", {d_in});
      store.add(prefix + ".gin.w2", {d_in, d_in});
      store.add(prefix + ".gin.b2", {d_in});
      break;
    case Aggregator::sage:
      store.add(prefix + ".sage.weight", {d_in, 2 * d_in});
      store.add(prefix + ".sage.bias", {d_in});
      break;
    case Aggregator::edgeconv:
      store.add(prefix + ".edge.w1", {d_in, 2 * d_in});
      store.add(prefix + ".edge.b1", {d_in});
      store.add(prefix + ".edge.w2", {d_in, d_in});
      store.add(prefix + ".edge.b2", {d_in});
      break;
  }
}

inline void init_aggregator_params(ParamStore& store, const std::string& prefix, Aggregator kind,
                                   Rng& rng) {
  if (kind == Aggregator::gat) {
    init_attention_params(store, prefix, rng);
    return;
  }
  const std::vector<std::string> names = [&]() -> std::vector<std::string> {
    switch (kind) {
      case Aggregator::gcn: return {prefix + ".gcn.weight"};
      case Aggregator::gin: return {prefix + ".gin.w1", prefix + ".gin.w2"};
      case Aggregator::sage: return {prefix + ".sage.weight"};
      default: return {prefix + ".edge.w1", prefix + ".edge.w2"};
    }
  }();
  for (const auto& nm : names) {
    Param& w = store.at(nm);
    rng.fill_normal(w.value.data(), w.value.size(), 0.0, std::sqrt(1.0 / w.shape[1]));
  }
}

struct AggCache {
  StageCache gat;
  NodeMatrix mean;            // gcn/sage: mean of neighbors
  NodeMatrix z, h1pre, h1;    // gin
  NodeMatrix concat;          // sage input
  NodeMatrix e, hpre, hact, o;  // edgeconv stacked (n*k rows)
  std::vector<int32_t> argmax;  // edgeconv winner rank per (node, out dim)
};

inline NodeMatrix neighbor_mean(const NodeMatrix& keys, const KnnEdges& edges, int n) {
  NodeMatrix m = NodeMatrix::Zero(n, keys.cols());
  for (int i = 0; i < n; ++i) {
    for (int r = 0; r < edges.k; ++r) m.row(i) += keys.row(edges.neighbor(i, r));
    m.row(i) /= edges.k;
  }
  return m;
}

inline NodeMatrix aggregator_pass(Aggregator kind, const NodeMatrix& queries,
                                  const NodeMatrix& keys, const KnnEdges& edges,
                                  const ParamStore& store, const std::string& prefix,
                                  const Config& cfg, AggCache* cache) {
  const int n = static_cast<int>(queries.rows());
  const int d = static_cast<int>(queries.cols());
  const int k = edges.k;
  if (k < 1) throw ContractError("aggregation needs at least one neighbor per node");
  switch (kind) {
    case Aggregator::gat:
      return attention_pass(queries, keys, edges, store, prefix, cfg,
                            cache ? &cache->gat : nullptr);
    case Aggregator::gcn: {
      NodeMatrix mean = neighbor_mean(keys, edges, n);
      NodeMatrix out = linear_forward(mean, store.at(prefix + ".gcn.weight"),
                                      store.at(prefix + ".gcn.bias"));
      if (cache) cache->mean = std::move(mean);
      return out;
    }
    case Aggregator::gin: {
      NodeMatrix z = queries;
      for (int i = 0; i < n; ++i)
        for (int r = 0; r < k; ++r) z.row(i) += keys.row(edges.neighbor(i, r));
      NodeMatrix h1pre = linear_forward(z, store.at(prefix + ".gin.w1"),
                                        store.at(prefix + ".gin.b1"));
      NodeMatrix h1 = h1pre.cwiseMax(0.0);
      NodeMatrix out = linear_forward(h1, store.at(prefix + ".gin.w2"),
                                      store.at(prefix + ".gin.b2"));
      if (cache) {
        cache->z = std::move(z);
        cache->h1pre = std::move(h1pre);
        cache->h1 = std::move(h1);
      }
      return out;
    }
    case Aggregator::sage: {
      NodeMatrix mean = neighbor_mean(keys, edges, n);
      NodeMatrix concat(n, 2 * d);
      concat.leftCols(d) = queries;
      concat.rightCols(d) = mean;
      NodeMatrix out = linear_forward(concat, store.at(prefix + ".sage.weight"),
                                      store.at(prefix + ".sage.bias"));
      if (cache) {
        cache->mean = std::move(mean);
        cache->concat = std::move(concat);
      }
      return out;
    }
    case Aggregator::edgeconv: {
      NodeMatrix e(static_cast<Eigen::Index>(n) * k, 2 * d);
      for (int i = 0; i < n; ++i)
        for (int r = 0; r < k; ++r) {
          e.row(static_cast<Eigen::Index>(i) * k + r).head(d) = queries.row(i);
          e.row(static_cast<Eigen::Index>(i) * k + r).tail(d) =
              keys.row(edges.neighbor(i, r)) - queries.row(i);
        }
      NodeMatrix hpre = linear_forward(e, store.at(prefix + ".edge.w1"),
                                       store.at(prefix + ".edge.b1"));
      NodeMatrix hact = hpre.cwiseMax(0.0);
      NodeMatrix o = linear_forward(hact, store.at(prefix + ".edge.w2"),
                                    store.at(prefix + ".edge.b2"));
      NodeMatrix out(n, d);
      std::vector<int32_t> argmax(static_cast<size_t>(n) * d);
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) {
          int best = 0;
          real bv = o(static_cast<Eigen::Index>(i) * k, c);
          for (int r = 1; r < k; ++r)
            if (o(static_cast<Eigen::Index>(i) * k + r, c) > bv) {
              bv = o(static_cast<Eigen::Index>(i) * k + r, c);
              best = r;
            }
          out(i, c) = bv;
          argmax[static_cast<size_t>(i) * d + c] = best;
        }
      if (cache) {
        cache->e = std::move(e);
        cache->hpre = std::move(hpre);
        cache->hact = std::move(hact);
        cache->o = std::move(o);
        cache->argmax = std::move(argmax);
      }
      return out;
    }
  }
  throw ParamError("unknown aggregator kind");
}

inline void aggregator_pass_backward(Aggregator kind, const NodeMatrix& queries,
                                     const NodeMatrix& keys, const KnnEdges& edges,
                                     const AggCache& cache, const NodeMatrix& gout,
                                     ParamStore& store, const std::string& prefix,
                                     const Config& cfg, NodeMatrix* gqueries,
                                     NodeMatrix* gkeys) {
  const int n = static_cast<int>(queries.rows());
  const int d = static_cast<int>(queries.cols());
  const int k = edges.k;
  auto scatter_mean_grad = [&](const NodeMatrix& gmean) {
    if (!gkeys) return;
    for (int i = 0; i < n; ++i)
      for (int r = 0; r < k; ++r) gkeys->row(edges.neighbor(i, r)) += gmean.row(i) / k;
  };
  switch (kind) {
    case Aggregator::gat:
      attention_pass_backward(queries, keys, edges, cache.gat, gout, store, prefix, cfg,
                              gqueries, gkeys);
      return;
    case Aggregator::gcn: {
      Param& w = store.at(prefix + ".gcn.weight");
      Param& b = store.at(prefix + ".gcn.bias");
      NodeMatrix gmean = linear_backward(cache.mean, w, gout, &w.grad, &b.grad);
      scatter_mean_grad(gmean);
      return;
    }
    case Aggregator::gin: {
      Param& w1 = store.at(prefix + ".gin.w1");
      Param& b1 = store.at(prefix + ".gin.b1");
      Param& w2 = store.at(prefix + ".gin.w2");
      Param& b2 = store.at(prefix + ".gin.b2");
      NodeMatrix gh1 = linear_backward(cache.h1, w2, gout, &w2.grad, &b2.grad);
      gh1 = (cache.h1pre.array() > 0).select(gh1, 0.0);
      NodeMatrix gz = linear_backward(cache.z, w1, gh1, &w1.grad, &b1.grad);
      if (gqueries) *gqueries += gz;
      if (gkeys)
        for (int i = 0; i < n; ++i)
          for (int r = 0; r < k; ++r) gkeys->row(edges.neighbor(i, r)) += gz.row(i);
      return;
    }
    case Aggregator::sage: {
      Param& w = store.at(prefix + ".sage.weight");
      Param& b = store.at(prefix + ".sage.bias");
      NodeMatrix gconcat = linear_backward(cache.concat, w, gout, &w.grad, &b.grad);
      if (gqueries) *gqueries += gconcat.leftCols(d);
      scatter_mean_grad(gconcat.rightCols(d));
      return;
    }
    case Aggregator::edgeconv: {
      Param& w1 = store.at(prefix + ".edge.w1");
      Param& b1 = store.at(prefix + ".edge.b1");
      Param& w2 = store.at(prefix + ".edge.w2");
      Param& b2 = store.at(prefix + ".edge.b2");
      NodeMatrix go = NodeMatrix::Zero(static_cast<Eigen::Index>(n) * k, d);
      for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c)
          go(static_cast<Eigen::Index>(i) * k + cache.argmax[static_cast<size_t>(i) * d + c], c) +=
              gout(i, c);
      NodeMatrix ghact = linear_backward(cache.hact, w2, go, &w2.grad, &b2.grad);
      ghact = (cache.hpre.array() > 0).select(ghact, 0.0);
      NodeMatrix ge = linear_backward(cache.e, w1, ghact, &w1.grad, &b1.grad);
      for (int i = 0; i < n; ++i)
        for (int r = 0; r < k; ++r) {
          const auto row = ge.row(static_cast<Eigen::Index>(i) * k + r);
          if (gqueries) gqueries->row(i) += row.head(d) - row.tail(d);
          if (gkeys) gkeys->row(edges.neighbor(i, r)) += row.tail(d);
        }
      return;
    }
  }
  throw ParamError("unknown aggregator kind");
}

// ---------------------------------------------------------------------------
// Stage wrappers matching the two passes of the pipeline.

inline NodeMatrix style_to_content_pass(const HeteroStyleGraph& g, const ParamStore& store,
                                        const Config& cfg, AggCache* cache) {
  return aggregator_pass(cfg.aggregator, g.content, g.style, g.inter, store, "gnn.inter", cfg,
                         cache);
}

inline NodeMatrix content_to_content_pass(const NodeMatrix& updated, const KnnEdges& intra,
                                          const ParamStore& store, const Config& cfg,
                                          AggCache* cache) {
  if (!cfg.intra_enabled) return updated;
  return aggregator_pass(cfg.aggregator, updated, updated, intra, store, "gnn.intra", cfg, cache);
}

}  // namespace pgs
