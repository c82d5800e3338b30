#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"

using namespace pgs;
using pgstest::grad_close;
using pgstest::random_matrix;

namespace {

double mat_dot(const NodeMatrix& a, const NodeMatrix& b) {
  return (a.array() * b.array()).sum();
}

ParamStore make_gat(const Config& cfg, int d_in, uint64_t seed) {
  ParamStore store;
  register_attention_params(store, "gnn.inter", d_in, cfg);
  Rng rng(seed);
  init_attention_params(store, "gnn.inter", rng);
  return store;
}

NodeFeature row_of(const NodeMatrix& m, int i) { return m.row(i).transpose(); }

std::vector<NodeFeature> rows_of(const NodeMatrix& m, std::initializer_list<int> idx) {
  std::vector<NodeFeature> out;
  for (int i : idx) out.push_back(row_of(m, i));
  return out;
}

KnnEdges manual_edges(int k, std::vector<int32_t> nbr) {
  KnnEdges e;
  e.k = k;
  e.nbr = std::move(nbr);
  e.sim.assign(e.nbr.size(), 0.0);
  return e;
}

oracle::Vec to_vec(const NodeFeature& f) { return {f.data(), f.data() + f.size()}; }

Config gat_config(int heads = 2, int head_dim = 3) {
  Config cfg = pgstest::tiny_config();
  cfg.heads = heads;
  cfg.head_dim = head_dim;
  return cfg;
}

}  // namespace

TEST_CASE("identical neighbors share attention equally", "[message_passing]") {
  const Config cfg = gat_config();
  const int d = 5;
  ParamStore store = make_gat(cfg, d, 3);
  const AttentionParams ap = attention_params(store, "gnn.inter", cfg, d);

  const NodeMatrix m = random_matrix(2, d, 4);
  const NodeFeature center = row_of(m, 0);
  const std::vector<NodeFeature> nbs(4, row_of(m, 1));
  for (int h = 0; h < cfg.heads; ++h) {
    const auto w = attention_coefficients(center, nbs, ap, h);
    REQUIRE(w.size() == 4);
    for (double wi : w) REQUIRE(wi == Catch::Approx(0.25).margin(1e-12));
  }
}

TEST_CASE("a single neighbor takes all the weight", "[message_passing]") {
  const Config cfg = gat_config();
  ParamStore store = make_gat(cfg, 4, 5);
  const AttentionParams ap = attention_params(store, "gnn.inter", cfg, 4);
  const NodeMatrix m = random_matrix(2, 4, 6);
  const auto w = attention_coefficients(row_of(m, 0), {row_of(m, 1)}, ap, 0);
  REQUIRE(w.size() == 1);
  REQUIRE(w[0] == 1.0);
}

TEST_CASE("attention coefficients match the dense oracle", "[message_passing]") {
  const Config cfg = gat_config(3, 4);
  const int d = 6;
  ParamStore store = make_gat(cfg, d, 7);
  const AttentionParams ap = attention_params(store, "gnn.inter", cfg, d);
  const oracle::RawAttention raw = oracle::raw_attention(store, "gnn.inter", cfg, d);

  const NodeMatrix m = random_matrix(6, d, 8);
  const NodeFeature center = row_of(m, 0);
  const std::vector<NodeFeature> nbs = rows_of(m, {1, 2, 3, 4, 5});
  std::vector<oracle::Vec> nbs_raw;
  for (const auto& nb : nbs) nbs_raw.push_back(to_vec(nb));

  for (int h = 0; h < cfg.heads; ++h) {
    const auto got = attention_coefficients(center, nbs, ap, h);
    const auto want = oracle::attention_weights(raw, h, to_vec(center), nbs_raw);
    double sum = 0;
    for (size_t j = 0; j < got.size(); ++j) {
      REQUIRE(got[j] == Catch::Approx(want[j]).margin(1e-6));
      sum += got[j];
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("attention rejects bad inputs", "[message_passing]") {
  const Config cfg = gat_config();
  ParamStore store = make_gat(cfg, 4, 9);
  const AttentionParams ap = attention_params(store, "gnn.inter", cfg, 4);
  const NodeMatrix m = random_matrix(2, 4, 10);
  REQUIRE_THROWS_AS(attention_coefficients(row_of(m, 0), {}, ap, 0), ContractError);
  REQUIRE_THROWS_AS(attention_coefficients(row_of(m, 0), {row_of(m, 1)}, ap, 2), ParamError);
  REQUIRE_THROWS_AS(attention_coefficients(row_of(m, 0), {row_of(m, 1)}, ap, -1), ParamError);
  REQUIRE_THROWS_AS(aggregate(row_of(m, 0), {}, ap), ContractError);
  // registered width 4, asked for 5
  REQUIRE_THROWS_AS(attention_params(store, "gnn.inter", cfg, 5), ShapeError);
}

TEST_CASE("aggregate reduces to the residual under zero messages", "[message_passing]") {
  const Config cfg = gat_config();
  const int d = 5;
  ParamStore store = make_gat(cfg, d, 11);
  std::fill(store.at("gnn.inter.out.bias").value.begin(),
            store.at("gnn.inter.out.bias").value.end(), 0.0);
  const AttentionParams ap = attention_params(store, "gnn.inter", cfg, d);

  const NodeFeature center = row_of(random_matrix(1, d, 12), 0);
  NodeFeature zero(d);
  zero.setZero();
  const NodeFeature out = aggregate(center, {zero, zero, zero}, ap);
  for (int i = 0; i < d; ++i) REQUIRE(out(i) == Catch::Approx(center(i)).margin(1e-12));
}

TEST_CASE("identity projections pass the neighbor through", "[message_passing]") {
  Config cfg = gat_config(1, 4);  // d_head == d_in
  const int d = 4;
  ParamStore store;
  register_attention_params(store, "gnn.inter", d, cfg);
  Param& wb = store.at("gnn.inter.Wb");
  for (int i = 0; i < d; ++i) wb.value[static_cast<size_t>(i) * d + i] = 1.0;
  Param& ow = store.at("gnn.inter.out.weight");
  for (int i = 0; i < d; ++i) ow.value[static_cast<size_t>(i) * d + i] = 1.0;
  // Wa stays zero: uniform attention; bias stays zero
  const AttentionParams ap = attention_params(store, "gnn.inter", cfg, d);

  const NodeMatrix m = random_matrix(2, d, 13);
  const NodeFeature out = aggregate(row_of(m, 0), {row_of(m, 1)}, ap);
  for (int i = 0; i < d; ++i)
    REQUIRE(out(i) == Catch::Approx(m(0, i) + m(1, i)).margin(1e-12));
}

TEST_CASE("aggregate matches the dense oracle", "[message_passing]") {
  const Config cfg = gat_config(4, 3);
  const int d = 7;
  ParamStore store = make_gat(cfg, d, 15);
  const AttentionParams ap = attention_params(store, "gnn.inter", cfg, d);
  const oracle::RawAttention raw = oracle::raw_attention(store, "gnn.inter", cfg, d);

  const NodeMatrix m = random_matrix(5, d, 16);
  const NodeFeature center = row_of(m, 0);
  const std::vector<NodeFeature> nbs = rows_of(m, {1, 2, 3, 4});
  std::vector<oracle::Vec> nbs_raw;
  for (const auto& nb : nbs) nbs_raw.push_back(to_vec(nb));

  const NodeFeature got = aggregate(center, nbs, ap);
  const oracle::Vec want = oracle::attention_aggregate(raw, to_vec(center), nbs_raw);
  for (int i = 0; i < d; ++i) REQUIRE(got(i) == Catch::Approx(want[i]).margin(1e-5));
}

TEST_CASE("batched attention equals the single-node reference", "[message_passing]") {
  const Config cfg = gat_config(2, 4);
  const int d = 6, n = 5, mkeys = 7, k = 3;
  ParamStore store = make_gat(cfg, d, 17);
  const AttentionParams ap = attention_params(store, "gnn.inter", cfg, d);

  const NodeMatrix queries = random_matrix(n, d, 18);
  const NodeMatrix keys = random_matrix(mkeys, d, 19);
  const KnnEdges edges = knn_edges(queries, keys, k, Metric::ncc, false);

  StageCache cache;
  const NodeMatrix out = attention_pass(queries, keys, edges, store, "gnn.inter", cfg, &cache);
  REQUIRE(out.rows() == n);
  REQUIRE(out.cols() == d);

  for (int i = 0; i < n; ++i) {
    std::vector<NodeFeature> nbs;
    for (int r = 0; r < k; ++r) nbs.push_back(row_of(keys, edges.neighbor(i, r)));
    const NodeFeature want = aggregate(row_of(queries, i), nbs, ap);
    for (int c = 0; c < d; ++c) REQUIRE(out(i, c) == Catch::Approx(want(c)).margin(1e-9));
  }

  // cached attention rows are distributions
  for (int h = 0; h < cfg.heads; ++h)
    for (int i = 0; i < n; ++i) {
      REQUIRE(cache.w[h].row(i).sum() == Catch::Approx(1.0).margin(1e-6));
      REQUIRE(cache.w[h].row(i).minCoeff() >= 0.0);
    }
}

TEST_CASE("attention pass with k=1 gives unit weights", "[message_passing]") {
  const Config cfg = gat_config();
  const int d = 4;
  ParamStore store = make_gat(cfg, d, 21);
  const NodeMatrix queries = random_matrix(3, d, 22);
  const NodeMatrix keys = random_matrix(4, d, 23);
  const KnnEdges edges = knn_edges(queries, keys, 1, Metric::ncc, false);
  StageCache cache;
  attention_pass(queries, keys, edges, store, "gnn.inter", cfg, &cache);
  for (int h = 0; h < cfg.heads; ++h)
    for (int i = 0; i < 3; ++i) REQUIRE(cache.w[h](i, 0) == 1.0);
}

TEST_CASE("duplicate queries produce duplicate outputs", "[message_passing]") {
  const Config cfg = gat_config();
  const int d = 5;
  ParamStore store = make_gat(cfg, d, 25);
  NodeMatrix queries = random_matrix(4, d, 26);
  queries.row(2) = queries.row(0);
  const NodeMatrix keys = random_matrix(6, d, 27);
  KnnEdges edges = knn_edges(queries, keys, 2, Metric::ncc, false);
  // same perception: force identical neighbor lists for the clone pair
  edges.nbr[4] = edges.nbr[0];
  edges.nbr[5] = edges.nbr[1];
  const NodeMatrix out = attention_pass(queries, keys, edges, store, "gnn.inter", cfg, nullptr);
  for (int c = 0; c < d; ++c) REQUIRE(out(2, c) == out(0, c));
}

TEST_CASE("neighbor order does not change the pass", "[message_passing]") {
  const Config cfg = gat_config();
  const int d = 5, n = 4, k = 3;
  ParamStore store = make_gat(cfg, d, 29);
  const NodeMatrix queries = random_matrix(n, d, 30);
  const NodeMatrix keys = random_matrix(8, d, 31);
  KnnEdges edges = knn_edges(queries, keys, k, Metric::ncc, false);
  const NodeMatrix base = attention_pass(queries, keys, edges, store, "gnn.inter", cfg, nullptr);

  KnnEdges shuffled = edges;
  for (int i = 0; i < n; ++i) {
    std::swap(shuffled.nbr[static_cast<size_t>(i) * k], shuffled.nbr[static_cast<size_t>(i) * k + 2]);
    std::swap(shuffled.sim[static_cast<size_t>(i) * k], shuffled.sim[static_cast<size_t>(i) * k + 2]);
  }
  const NodeMatrix out = attention_pass(queries, keys, shuffled, store, "gnn.inter", cfg, nullptr);
  REQUIRE((out - base).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention pass validates the edge set", "[message_passing]") {
  const Config cfg = gat_config();
  ParamStore store = make_gat(cfg, 4, 33);
  const NodeMatrix queries = random_matrix(3, 4, 34);
  const NodeMatrix keys = random_matrix(5, 4, 35);
  REQUIRE_THROWS_AS(attention_pass(queries, keys, KnnEdges{}, store, "gnn.inter", cfg, nullptr),
                    ContractError);
  const KnnEdges two = manual_edges(1, {0, 1});  // covers 2 queries, not 3
  REQUIRE_THROWS_AS(attention_pass(queries, keys, two, store, "gnn.inter", cfg, nullptr),
                    ShapeError);
  const NodeMatrix narrow = random_matrix(5, 3, 36);
  const KnnEdges e3 = manual_edges(1, {0, 1, 2});
  REQUIRE_THROWS_AS(attention_pass(queries, narrow, e3, store, "gnn.inter", cfg, nullptr),
                    ShapeError);
}

TEST_CASE("disabled intra pass is the identity", "[message_passing]") {
  Config cfg = gat_config();
  cfg.intra_enabled = false;
  ParamStore store;  // deliberately empty: the pass must not touch it
  const NodeMatrix x = random_matrix(4, 6, 37);
  const KnnEdges edges = manual_edges(1, {1, 0, 3, 2});
  const NodeMatrix out = content_to_content_pass(x, edges, store, cfg, nullptr);
  REQUIRE((out - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("stage wrappers hit their parameter prefixes", "[message_passing]") {
  Config cfg = gat_config();
  const int d = 4;
  ParamStore store;
  register_attention_params(store, "gnn.inter", d, cfg);
  register_attention_params(store, "gnn.intra", d, cfg);
  Rng rng(39);
  init_attention_params(store, "gnn.inter", rng);
  init_attention_params(store, "gnn.intra", rng);

  HeteroStyleGraph g = build_graph(random_matrix(4, d, 40), random_matrix(5, d, 41), 2,
                                   Metric::ncc);
  const NodeMatrix y1 = style_to_content_pass(g, store, cfg, nullptr);
  const NodeMatrix ref1 =
      attention_pass(g.content, g.style, g.inter, store, "gnn.inter", cfg, nullptr);
  REQUIRE((y1 - ref1).cwiseAbs().maxCoeff() == 0.0);

  const NodeMatrix y2 = content_to_content_pass(y1, g.intra, store, cfg, nullptr);
  const NodeMatrix ref2 = attention_pass(y1, y1, g.intra, store, "gnn.intra", cfg, nullptr);
  REQUIRE((y2 - ref2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gcn with a constant neighborhood is one linear map", "[message_passing]") {
  Config cfg = pgstest::tiny_config();
  cfg.aggregator = Aggregator::gcn;
  const int d = 5;
  ParamStore store;
  register_aggregator_params(store, "gnn.inter", Aggregator::gcn, d, cfg);
  Rng rng(43);
  init_aggregator_params(store, "gnn.inter", Aggregator::gcn, rng);

  NodeMatrix keys = random_matrix(3, d, 44);
  keys.row(1) = keys.row(0);
  keys.row(2) = keys.row(0);
  const NodeMatrix queries = random_matrix(2, d, 45);
  const KnnEdges edges = manual_edges(3, {0, 1, 2, 2, 1, 0});
  const NodeMatrix out =
      aggregator_pass(Aggregator::gcn, queries, keys, edges, store, "gnn.inter", cfg, nullptr);

  const Param& w = store.at("gnn.inter.gcn.weight");
  const Param& b = store.at("gnn.inter.gcn.bias");
  for (int i = 0; i < 2; ++i)
    for (int r = 0; r < d; ++r) {
      double s = b.value[r];
      for (int c = 0; c < d; ++c) s += w.value[static_cast<size_t>(r) * d + c] * keys(0, c);
      REQUIRE(out(i, r) == Catch::Approx(s).margin(1e-10));
    }
}

TEST_CASE("gin with zero neighbors is an MLP of the center", "[message_passing]") {
  Config cfg = pgstest::tiny_config();
  cfg.aggregator = Aggregator::gin;
  const int d = 4;
  ParamStore store;
  register_aggregator_params(store, "gnn.inter", Aggregator::gin, d, cfg);
  Rng rng(47);
  init_aggregator_params(store, "gnn.inter", Aggregator::gin, rng);

  const NodeMatrix queries = random_matrix(3, d, 48);
  const NodeMatrix keys = NodeMatrix::Zero(2, d);
  const KnnEdges edges = manual_edges(2, {0, 1, 1, 0, 0, 1});
  const NodeMatrix out =
      aggregator_pass(Aggregator::gin, queries, keys, edges, store, "gnn.inter", cfg, nullptr);
  for (int i = 0; i < 3; ++i) {
    const oracle::Vec want =
        oracle::gin_node(store, "gnn.inter", to_vec(row_of(queries, i)), {}, d);
    for (int c = 0; c < d; ++c) REQUIRE(out(i, c) == Catch::Approx(want[c]).margin(1e-10));
  }
}

TEST_CASE("all aggregators match their dense oracles", "[message_passing]") {
  Config cfg = gat_config(2, 3);
  const int d = 6, n = 4, mkeys = 6, k = 3;
  const NodeMatrix queries = random_matrix(n, d, 51);
  const NodeMatrix keys = random_matrix(mkeys, d, 52);
  const KnnEdges edges = knn_edges(queries, keys, k, Metric::ncc, false);
  const auto key_rows = oracle::matrix_rows(keys);

  for (const Aggregator kind : {Aggregator::gat, Aggregator::gcn, Aggregator::gin,
                                Aggregator::sage, Aggregator::edgeconv}) {
    cfg.aggregator = kind;
    ParamStore store;
    register_aggregator_params(store, "gnn.inter", kind, d, cfg);
    Rng rng(53);
    init_aggregator_params(store, "gnn.inter", kind, rng);
    const NodeMatrix out =
        aggregator_pass(kind, queries, keys, edges, store, "gnn.inter", cfg, nullptr);
    REQUIRE(out.rows() == n);
    REQUIRE(out.cols() == d);

    for (int i = 0; i < n; ++i) {
      const oracle::Vec center = to_vec(row_of(queries, i));
      const std::vector<oracle::Vec> nbs = oracle::gather_neighbors(key_rows, edges, i);
      oracle::Vec want;
      switch (kind) {
        case Aggregator::gat:
          want = oracle::attention_aggregate(oracle::raw_attention(store, "gnn.inter", cfg, d),
                                             center, nbs);
          break;
        case Aggregator::gcn:
          want = oracle::gcn_node(store, "gnn.inter", nbs, d);
          break;
        case Aggregator::gin:
          want = oracle::gin_node(store, "gnn.inter", center, nbs, d);
          break;
        case Aggregator::sage:
          want = oracle::sage_node(store, "gnn.inter", center, nbs, d);
          break;
        case Aggregator::edgeconv:
          want = oracle::edgeconv_node(store, "gnn.inter", center, nbs, d);
          break;
      }
      for (int c = 0; c < d; ++c) REQUIRE(out(i, c) == Catch::Approx(want[c]).margin(1e-5));
    }
  }
}

TEST_CASE("aggregator gradients match finite differences", "[message_passing]") {
  Config cfg = gat_config(2, 3);
  const int d = 4, n = 3, mkeys = 5, k = 2;
  NodeMatrix queries = random_matrix(n, d, 55);
  NodeMatrix keys = random_matrix(mkeys, d, 56);
  const KnnEdges edges = knn_edges(queries, keys, k, Metric::ncc, false);
  const NodeMatrix r = random_matrix(n, d, 57);

  for (const Aggregator kind : {Aggregator::gat, Aggregator::gcn, Aggregator::gin,
                                Aggregator::sage, Aggregator::edgeconv}) {
    cfg.aggregator = kind;
    ParamStore store;
    register_aggregator_params(store, "gnn.inter", kind, d, cfg);
    Rng rng(58);
    init_aggregator_params(store, "gnn.inter", kind, rng);

    auto loss = [&] {
      return mat_dot(aggregator_pass(kind, queries, keys, edges, store, "gnn.inter", cfg,
                                     nullptr),
                     r);
    };

    AggCache cache;
    aggregator_pass(kind, queries, keys, edges, store, "gnn.inter", cfg, &cache);
    store.zero_grad();
    NodeMatrix gq = NodeMatrix::Zero(n, d), gk = NodeMatrix::Zero(mkeys, d);
    aggregator_pass_backward(kind, queries, keys, edges, cache, r, store, "gnn.inter", cfg, &gq,
                             &gk);

    for (const std::string& name : store.names()) {
      Param& prm = store.at(name);
      for (size_t i = 0; i < prm.value.size(); i += 3)
        REQUIRE(grad_close(prm.grad[i], pgstest::fd_central(loss, &prm.value[i])));
    }
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c)
        REQUIRE(grad_close(gq(i, c), pgstest::fd_central(loss, &queries(i, c))));
    for (int i = 0; i < mkeys; ++i)
      for (int c = 0; c < d; ++c)
        REQUIRE(grad_close(gk(i, c), pgstest::fd_central(loss, &keys(i, c))));
  }
}

TEST_CASE("self-graph backward with a shared gradient buffer", "[message_passing]") {
  // the intra stage passes the same matrix as queries and keys and the same
  // buffer for both gradients; the result must be the total derivative
  Config cfg = gat_config(2, 3);
  const int d = 4, n = 5;
  NodeMatrix x = random_matrix(n, d, 61);
  const KnnEdges edges = knn_edges(x, x, 2, Metric::ncc, true);
  const NodeMatrix r = random_matrix(n, d, 62);
  ParamStore store;
  register_attention_params(store, "gnn.intra", d, cfg);
  Rng rng(63);
  init_attention_params(store, "gnn.intra", rng);

  auto loss = [&] {
    return mat_dot(attention_pass(x, x, edges, store, "gnn.intra", cfg, nullptr), r);
  };

  StageCache cache;
  attention_pass(x, x, edges, store, "gnn.intra", cfg, &cache);
  store.zero_grad();
  NodeMatrix gx = NodeMatrix::Zero(n, d);
  attention_pass_backward(x, x, edges, cache, r, store, "gnn.intra", cfg, &gx, &gx);

  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c)
      REQUIRE(grad_close(gx(i, c), pgstest::fd_central(loss, &x(i, c))));
}
