#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "pgs/core.hpp"
#include "pgs/patch_ops.hpp"

namespace pgs {

inline constexpr real kNccEps = 1e-12;

// Cosine of the flattened patches; zero-norm inputs yield similarity 0.
inline real ncc(const NodeFeature& a, const NodeFeature& b) {
  if (a.size() != b.size())
    throw ShapeError(cat("ncc: length mismatch ", a.size(), " vs ", b.size()));
  return a.dot(b) / ((a.norm() + kNccEps) * (b.norm() + kNccEps));
}

// Negated distance so "larger is more similar" matches the cosine convention.
inline real euclidean_similarity(const NodeFeature& a, const NodeFeature& b) {
  if (a.size() != b.size())
    throw ShapeError(cat("euclidean_similarity: length mismatch ", a.size(), " vs ", b.size()));
  return -(a - b).norm();
}

// Uniform-k neighbor lists, rank-ordered best-first per query.
struct KnnEdges {
  int k = 0;
  std::vector<int32_t> nbr;  // size N_q * k
  std::vector<real> sim;

  int32_t neighbor(int query, int rank) const { return nbr[static_cast<size_t>(query) * k + rank]; }
  real similarity(int query, int rank) const { return sim[static_cast<size_t>(query) * k + rank]; }
  int num_queries() const { return k == 0 ? 0 : static_cast<int>(nbr.size()) / k; }
};

namespace detail {
// Selects the top-k entries of one similarity row; ties go to the lower index.
inline void select_topk(const real* row, int n, int skip_index, int k, int32_t* out_idx,
                        real* out_sim) {
  thread_local std::vector<int32_t> order;
  order.clear();
  order.reserve(n);
  for (int j = 0; j < n; ++j)
    if (j != skip_index) order.push_back(j);
  auto better = [row](int32_t a, int32_t b) {
    if (row[a] != row[b]) return row[a] > row[b];
    return a < b;
  };
  std::partial_sort(order.begin(), order.begin() + k, order.end(), better);
  for (int r = 0; r < k; ++r) {
    out_idx[r] = order[r];
    out_sim[r] = row[order[r]];
  }
}

inline NodeMatrix normalized_rows(const NodeMatrix& x) {
  NodeMatrix out = x;
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) /= out.row(i).norm() + kNccEps;
  return out;
}
}  // namespace detail

// Exact brute-force KNN. The cosine path computes the similarity matrix in
// query-row blocks via GEMM on normalized rows; the euclidean path evaluates
// the same per-pair formula as euclidean_similarity.
inline KnnEdges knn_edges(const NodeMatrix& queries, const NodeMatrix& keys, int k, Metric metric,
                          bool exclude_self) {
  if (queries.cols() != keys.cols())
    throw ShapeError(cat("knn: query dim ", queries.cols(), " vs key dim ", keys.cols()));
  const int nq = static_cast<int>(queries.rows());
  const int nk = static_cast<int>(keys.rows());
  const int usable = nk - (exclude_self ? 1 : 0);
  if (k < 1) throw ParamError("knn: k must be >= 1");
  if (k > usable)
    throw ParamError(cat("knn: k=", k, " exceeds the usable key count ", usable));
  if (exclude_self && nq != nk)
    throw ContractError("knn: self-exclusion requires queries == keys");

  KnnEdges edges;
  edges.k = k;
  edges.nbr.resize(static_cast<size_t>(nq) * k);
  edges.sim.resize(static_cast<size_t>(nq) * k);

  if (metric == Metric::ncc) {
    const NodeMatrix qn = detail::normalized_rows(queries);
    const NodeMatrix kn = detail::normalized_rows(keys);
    const int block = std::max(1, std::min(nq, static_cast<int>((16 << 20) / (sizeof(real) * std::max(1, nk)))));
    NodeMatrix sims(block, nk);
    for (int q0 = 0; q0 < nq; q0 += block) {
      const int rows = std::min(block, nq - q0);
      sims.topRows(rows).noalias() = qn.middleRows(q0, rows) * kn.transpose();
      for (int r = 0; r < rows; ++r)
        detail::select_topk(sims.data() + static_cast<int64_t>(r) * nk, nk,
                            exclude_self ? q0 + r : -1, k,
                            edges.nbr.data() + static_cast<size_t>(q0 + r) * k,
                            edges.sim.data() + static_cast<size_t>(q0 + r) * k);
    }
  } else {
    std::vector<real> row(nk);
    for (int i = 0; i < nq; ++i) {
      for (int j = 0; j < nk; ++j) row[j] = -(queries.row(i) - keys.row(j)).norm();
      detail::select_topk(row.data(), nk, exclude_self ? i : -1, k,
                          edges.nbr.data() + static_cast<size_t>(i) * k,
                          edges.sim.data() + static_cast<size_t>(i) * k);
    }
  }
  return edges;
}

inline NodeMatrix nodes_to_matrix(const std::vector<NodeFeature>& nodes) {
  if (nodes.empty()) throw ContractError("node list must not be empty");
  NodeMatrix m(static_cast<Eigen::Index>(nodes.size()), nodes[0].size());
  for (size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].size() != m.cols())
      throw ShapeError(cat("node ", i, " has length ", nodes[i].size(), ", expected ", m.cols()));
    m.row(static_cast<Eigen::Index>(i)) = nodes[i].transpose();
  }
  return m;
}

struct HeteroStyleGraph {
  NodeMatrix content;  // N_c x d
  NodeMatrix style;    // N_s x d
  KnnEdges inter;      // per content node: k style neighbors
  KnnEdges intra;      // per content node: min(k, N_c-1) content neighbors, no self
  int k = 0;

  int num_content() const { return static_cast<int>(content.rows()); }
  int num_style() const { return static_cast<int>(style.rows()); }
};

inline HeteroStyleGraph build_graph(const NodeMatrix& content, const NodeMatrix& style, int k,
                                    Metric metric, bool with_intra = true) {
  if (content.rows() < 2) throw ContractError("graph needs at least 2 content nodes");
  HeteroStyleGraph g;
  g.content = content;
  g.style = style;
  g.k = k;
  g.inter = knn_edges(content, style, k, metric, false);
  if (with_intra) {
    const int k_intra = std::min<int>(k, static_cast<int>(content.rows()) - 1);
    g.intra = knn_edges(content, content, k_intra, metric, true);
  }
  return g;
}

inline HeteroStyleGraph build_graph(const PatchCollection& content,
                                    const std::vector<NodeFeature>& style_nodes, int k,
                                    Metric metric) {
  std::vector<NodeFeature> content_nodes;
  content_nodes.reserve(content.patches.size());
  for (const Patch& p : content.patches) content_nodes.push_back(patch2feat(p));
  return build_graph(nodes_to_matrix(content_nodes), nodes_to_matrix(style_nodes), k, metric,
                     true);
}

// Debug dump: `inter j i sim` / `intra j i sim`, row-major node indexing.
inline std::string dump_graph(const HeteroStyleGraph& g) {
  std::ostringstream os;
  for (int i = 0; i < g.inter.num_queries(); ++i)
    for (int r = 0; r < g.inter.k; ++r)
      os << "inter " << g.inter.neighbor(i, r) << ' ' << i << ' ' << g.inter.similarity(i, r)
         << '\n';
  for (int i = 0; i < g.intra.num_queries(); ++i)
    for (int r = 0; r < g.intra.k; ++r)
      os << "intra " << g.intra.neighbor(i, r) << ' ' << i << ' ' << g.intra.similarity(i, r)
         << '\n';
  return os.str();
}

}  // namespace pgs
