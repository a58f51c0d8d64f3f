#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "hgvt/retrieval.hpp"

using namespace hgvt;

namespace {

std::mt19937_64 g_rng(404);

std::vector<double> random_vec(std::size_t d, double mean = 0.0) {
  std::normal_distribution<double> nd(mean, 1.0);
  std::vector<double> v(d);
  for (double& x : v) x = nd(g_rng);
  return v;
}

// Synthetic class-clustered records: class centers far apart, members nearby.
EmbeddingDB clustered_db(std::size_t n_records, std::size_t n_classes,
                         std::size_t d, std::size_t edges_per = 3,
                         double spread = 0.05) {
  std::vector<std::vector<double>> centers;
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<double> ctr(d, 0.0);
    ctr[c % d] = 4.0;
    ctr[(c + 1) % d] = double(c);
    centers.push_back(ctr);
  }
  std::normal_distribution<double> nd(0.0, spread);
  EmbeddingDB db;
  db.centroid_width = d;
  db.edge_width = d;
  db.max_edges = edges_per;
  for (std::size_t i = 0; i < n_records; ++i) {
    std::size_t cls = i % n_classes;
    std::vector<double> cen(d);
    for (std::size_t k = 0; k < d; ++k) cen[k] = centers[cls][k] + nd(g_rng);
    std::vector<std::vector<double>> edges;
    for (std::size_t e = 0; e < edges_per; ++e) {
      std::vector<double> ev(d);
      for (std::size_t k = 0; k < d; ++k) ev[k] = centers[cls][k] + nd(g_rng);
      edges.push_back(std::move(ev));
    }
    DbRecord r = make_record(i, std::int64_t(cls), cen, edges);
    db.records.push_back(std::move(r));
  }
  return db;
}

double spearman(const std::vector<std::uint64_t>& a,
                const std::vector<std::uint64_t>& b) {
  REQUIRE(a.size() == b.size());
  std::unordered_map<std::uint64_t, double> rank_b;
  for (std::size_t i = 0; i < b.size(); ++i) rank_b[b[i]] = double(i);
  double n = double(a.size()), sum_d2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double diff = double(i) - rank_b.at(a[i]);
    sum_d2 += diff * diff;
  }
  return 1.0 - 6.0 * sum_d2 / (n * (n * n - 1.0));
}

}  // namespace

TEST_CASE("prune_graph: equal memberships fill min(M*N, |pE|) by lowest index") {
  GraphDims dims{4, 3, 7, 2};
  Tensor soft = Tensor::full({dims.vertices(), dims.edges()}, 0.6);
  Tensor xe({dims.edges(), 5});
  for (std::size_t e = 0; e < dims.edges(); ++e)
    for (std::size_t c = 0; c < 5; ++c) xe.at(e, c) = double(e * 10 + c);
  Tensor gate = Tensor::matrix(1, 2, {0.3, 0.7});

  PrunedGraph g = prune_graph(soft, xe, gate, dims, 3, 4);
  CHECK(g.root_edge == 7 + 1);  // second expert
  CHECK(g.root_confidence == doctest::Approx(0.7));
  REQUIRE(g.edges.size() == 7);  // min(3*4, 7)
  // all contributions tie -> ranked by lowest edge index
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    CHECK(g.edges[i].edge_index == i);
    CHECK(g.edges[i].features[0] == doctest::Approx(double(i * 10)));
  }
  // non-expert configuration rejected
  GraphDims no_ve{4, 3, 7, 0};
  CHECK_THROWS(prune_graph(soft, xe, Tensor({1, 0}), no_ve));
}

TEST_CASE("prune_graph: an edge shared by two vertices appears once") {
  GraphDims dims{2, 2, 3, 1};
  Tensor soft({dims.vertices(), dims.edges()});
  // both virtual vertices (rows 2,3) strongly prefer edge 0
  soft.at(2, 0) = 0.9; soft.at(2, 1) = 0.2; soft.at(2, 2) = 0.1;
  soft.at(3, 0) = 0.8; soft.at(3, 1) = 0.1; soft.at(3, 2) = 0.3;
  soft.at(2, 3) = 0.9; soft.at(3, 3) = 0.9;  // root memberships
  Tensor xe({4, 2});
  Tensor gate = Tensor::matrix(1, 1, {1.0});
  PrunedGraph g = prune_graph(soft, xe, gate, dims, 2, 1);
  // vertex ranks: both pick top-1; second vertex skips taken edge 0
  REQUIRE(g.edges.size() == 2);
  std::vector<std::size_t> idx = {g.edges[0].edge_index, g.edges[1].edge_index};
  std::sort(idx.begin(), idx.end());
  CHECK(idx == std::vector<std::size_t>{0, 2});
}

TEST_CASE("prune_graph contribution ranking matches brute force") {
  for (int trial = 0; trial < 50; ++trial) {
    GraphDims dims{3, 4, 8, 2};
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor soft({dims.vertices(), dims.edges()});
    for (double& v : soft.data()) v = u(g_rng);
    Tensor xe({dims.edges(), 3});
    Tensor gate = Tensor::matrix(1, 2, {u(g_rng), u(g_rng)});
    std::size_t M = 3, N = 2;
    PrunedGraph g = prune_graph(soft, xe, gate, dims, M, N);

    // brute-force contribution for every selected edge
    std::size_t root = dims.n_primary_edges + (gate[1] > gate[0] ? 1 : 0);
    CHECK(g.root_edge == root);
    for (const PrunedEdge& pe : g.edges) {
      double expect = 0;
      for (std::size_t v : g.top_vertices)
        expect += soft.at(v, pe.edge_index) * soft.at(v, root);
      CHECK(pe.contribution == doctest::Approx(expect).epsilon(1e-12));
    }
    // ranked descending with index tie-break
    for (std::size_t i = 1; i < g.edges.size(); ++i) {
      bool ordered = g.edges[i - 1].contribution > g.edges[i].contribution ||
                     (g.edges[i - 1].contribution == g.edges[i].contribution &&
                      g.edges[i - 1].edge_index < g.edges[i].edge_index);
      CHECK(ordered);
    }
    CHECK(g.edges.size() <= M * N);
  }
}

TEST_CASE("make_record variance summary, with an image prefix") {
  // two edges of width 2; concatenated centroid width 4
  std::vector<std::vector<double>> edges = {{1.0, 0.0}, {3.0, 0.0}};
  DbRecord r = make_record(7, 2, {9, 9, 9, 9}, edges);
  // dim 0 of the expert half: mean 2, var 1; dim 1: var 0; sbar = 0.5
  CHECK(r.mean_variance == doctest::Approx(0.5));
  CHECK(r.variance[2] == doctest::Approx(1.0));
  CHECK(r.variance[3] == doctest::Approx(0.0));
  // image half carries the mean variance
  CHECK(r.variance[0] == doctest::Approx(0.5));
  CHECK(r.variance[1] == doctest::Approx(0.5));
}

TEST_CASE("embedding database round-trips byte-identically") {
  EmbeddingDB db = clustered_db(20, 4, 6);
  const std::string p1 = "/tmp/hgvt_db_a.bin", p2 = "/tmp/hgvt_db_b.bin";
  save_db(p1, db);
  EmbeddingDB loaded = load_db(p1);
  REQUIRE(loaded.records.size() == db.records.size());
  CHECK(loaded.centroid_width == db.centroid_width);
  save_db(p2, loaded);
  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {});
  std::string sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
  CHECK(!sa.empty());
  // sidecar exists and parses
  std::ifstream side(p1 + ".json");
  CHECK(side.good());
  CHECK_THROWS(load_db("/tmp/hgvt_db_missing.bin"));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("ps_search identity, overflow, and oracle agreement") {
  EmbeddingDB db = clustered_db(30, 5, 8);
  // query equal to a record centroid ranks that id first
  auto top = ps_search(db.records[7].centroid, db, 5);
  REQUIRE(!top.empty());
  CHECK(top[0] == 7);
  // k beyond the db returns everything
  CHECK(ps_search(db.records[0].centroid, db, 1000).size() == 30);
  // exhaustive oracle agreement
  std::vector<double> q = random_vec(8);
  auto ranked = ps_search(q, db, 30);
  auto cosv = [&](const DbRecord& r) {
    double dot = 0, nq = 0, nr = 0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      dot += q[i] * r.centroid[i];
      nq += q[i] * q[i];
      nr += r.centroid[i] * r.centroid[i];
    }
    return dot / std::sqrt(nq * nr);
  };
  for (std::size_t i = 1; i < ranked.size(); ++i) {
    const DbRecord* a = nullptr;
    const DbRecord* b = nullptr;
    for (const DbRecord& r : db.records) {
      if (r.id == ranked[i - 1]) a = &r;
      if (r.id == ranked[i]) b = &r;
    }
    CHECK(cosv(*a) >= cosv(*b) - 1e-12);
  }
}

TEST_CASE("vs_distance closed forms and approximation ladder") {
  auto rec = [](std::vector<double> c, std::vector<double> var) {
    DbRecord r;
    r.centroid = std::move(c);
    r.variance = std::move(var);
    r.mean_variance =
        std::accumulate(r.variance.begin(), r.variance.end(), 0.0) /
        double(r.variance.size());
    return r;
  };

  // identical records: zero at every order
  DbRecord a = rec({1, 2, 3}, {0.5, 0.7, 0.9});
  for (VsOrder o : {VsOrder::pointwise, VsOrder::order0, VsOrder::order1,
                    VsOrder::order2, VsOrder::full})
    CHECK(vs_distance(a, a, o) == 0.0);

  // uniform variances: order-0 equals full exactly
  DbRecord u1 = rec({0, 0, 0}, {0.8, 0.8, 0.8});
  DbRecord u2 = rec({1, -2, 0.5}, {0.8, 0.8, 0.8});
  CHECK(vs_distance(u1, u2, VsOrder::order0) ==
        doctest::Approx(vs_distance(u1, u2, VsOrder::full)).epsilon(1e-12));

  // full order is symmetric
  DbRecord b = rec({0.3, -1, 2}, {0.4, 1.1, 0.6});
  CHECK(vs_distance(a, b, VsOrder::full) ==
        doctest::Approx(vs_distance(b, a, VsOrder::full)));

  // non-positive variance rejected
  DbRecord z = rec({0, 0, 0}, {0.0, 0.0, 0.0});
  CHECK_THROWS(vs_distance(z, z, VsOrder::full));

  // order-2 beats order-0 whenever the deviations are moderate
  std::uniform_real_distribution<double> u(0.5, 1.5);
  int improved = 0, eligible = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> va(4), vb(4);
    for (double& x : va) x = u(g_rng);
    for (double& x : vb) x = u(g_rng);
    DbRecord r1 = rec(random_vec(4), va), r2 = rec(random_vec(4), vb);
    double sbar = 0.5 * (r1.mean_variance + r2.mean_variance);
    double max_eta = 0;
    for (std::size_t i = 0; i < 4; ++i)
      max_eta = std::max(max_eta,
                         std::abs(0.5 * (va[i] + vb[i]) - sbar) / sbar);
    if (max_eta >= 0.5) continue;
    ++eligible;
    double full = vs_distance(r1, r2, VsOrder::full);
    double e0 = std::abs(vs_distance(r1, r2, VsOrder::order0) - full);
    double e2 = std::abs(vs_distance(r1, r2, VsOrder::order2) - full);
    improved += e2 <= e0 + 1e-12;
  }
  REQUIRE(eligible > 20);
  // per-dim the order-2 truncation error is smaller whenever |eta| < 1, but
  // signed cancellation across dims can occasionally favor order-0
  CHECK(double(improved) >= 0.9 * double(eligible));
}

TEST_CASE("vs_search identity, overflow, oracle, and order-0 exactness case") {
  EmbeddingDB db = clustered_db(40, 5, 8, 4, 0.3);
  const DbRecord& q = db.records[11];
  auto top = vs_search(q, db, 5, VsOrder::full);
  CHECK(top[0] == 11);
  CHECK(vs_search(q, db, 1000, VsOrder::order1).size() == 40);

  // oracle: ranking equals a direct sort by distance (stable id tie-break)
  auto ranked = vs_search(q, db, 40, VsOrder::order2);
  std::vector<std::pair<double, std::uint64_t>> oracle;
  for (const DbRecord& r : db.records)
    oracle.emplace_back(vs_distance(q, r, VsOrder::order2), r.id);
  std::stable_sort(oracle.begin(), oracle.end());
  for (std::size_t i = 0; i < ranked.size(); ++i) CHECK(ranked[i] == oracle[i].second);

  // uniform variances across the db: order-0 ranking == full ranking
  EmbeddingDB uni = db;
  for (DbRecord& r : uni.records) {
    std::fill(r.variance.begin(), r.variance.end(), 0.9);
    r.mean_variance = 0.9;
  }
  DbRecord uq = uni.records[3];
  CHECK(vs_search(uq, uni, 40, VsOrder::order0) ==
        vs_search(uq, uni, 40, VsOrder::full));

  // moderate deviations (max rho*delta^2 < 0.3): order-0 stays
  // rank-correlated with full
  EmbeddingDB mod = db;
  std::uniform_real_distribution<double> dev(-0.25, 0.25);
  for (DbRecord& r : mod.records) {
    for (double& v : r.variance) v = 0.8 * (1.0 + dev(g_rng));
    r.mean_variance = std::accumulate(r.variance.begin(), r.variance.end(), 0.0) /
                      double(r.variance.size());
  }
  const DbRecord& mq = mod.records[11];
  double rho = spearman(vs_search(mq, mod, 40, VsOrder::order0),
                        vs_search(mq, mod, 40, VsOrder::full));
  CHECK(rho >= 0.9);
}

TEST_CASE("centroid training: preconditions, determinism, bin diversity") {
  CHECK_THROWS(train_centroids(Tensor({4, 2}), 1));
  CHECK_THROWS(train_centroids(Tensor({0, 2}), 4));

  // 10 well-separated Gaussian clusters in 6 dims
  const std::size_t H = 10, d = 6, per = 60;
  std::normal_distribution<double> nd(0.0, 0.05);
  Tensor feats({H * per, d});
  for (std::size_t c = 0; c < H; ++c)
    for (std::size_t i = 0; i < per; ++i)
      for (std::size_t k = 0; k < d; ++k)
        feats.at(c * per + i, k) = (k == c % d ? 3.0 : 0.0) + double(c) * 0.7 + nd(g_rng);

  CentroidTrainOptions opts;
  opts.epochs = 8;
  opts.batch = 128;
  opts.seed = 5;
  CentroidHasher h1 = train_centroids(feats, H, opts);
  CentroidHasher h2 = train_centroids(feats, H, opts);
  CHECK(h1.centroids.data() == h2.centroids.data());  // bit-identical

  // bin diversity: normalized entropy of the assignment histogram
  std::vector<double> counts(H, 0.0);
  for (std::size_t i = 0; i < feats.rows(); ++i) {
    std::vector<double> f(d);
    for (std::size_t k = 0; k < d; ++k) f[k] = feats.at(i, k);
    counts[hash_assign(h1, f)] += 1.0;
  }
  double entropy = 0;
  for (double c : counts) {
    double p = c / double(feats.rows());
    if (p > 0) entropy -= p * std::log(p);
  }
  CHECK(entropy / std::log(double(H)) >= 0.9);
}

TEST_CASE("hash_assign nearest-centroid rule with low-index ties") {
  CentroidHasher h;
  h.centroids = Tensor::matrix(3, 2, {0, 0, 2, 0, 5, 5});
  CHECK(hash_assign(h, {0.1, 0.0}) == 0);
  CHECK(hash_assign(h, {2.0, 0.0}) == 1);
  CHECK(hash_assign(h, {1.0, 0.0}) == 0);  // equidistant to 0 and 1
  CHECK(hash_assign(h, {5.0, 5.0}) == 2);
  // oracle agreement on random features
  for (int i = 0; i < 50; ++i) {
    std::vector<double> f = random_vec(2);
    std::size_t best = 0;
    double bd = 1e300;
    for (std::size_t c = 0; c < 3; ++c) {
      double dx = f[0] - h.centroids.at(c, 0), dy = f[1] - h.centroids.at(c, 1);
      if (dx * dx + dy * dy < bd) {
        bd = dx * dx + dy * dy;
        best = c;
      }
    }
    CHECK(hash_assign(h, f) == best);
  }
}

TEST_CASE("adaptive rerank: identity first, disjoint bins zero, counters bounded") {
  EmbeddingDB db = clustered_db(60, 6, 6, 4, 0.05);
  Tensor feats({60 * 4, 6});
  std::size_t row = 0;
  for (const DbRecord& r : db.records)
    for (const auto& e : r.edges) {
      for (std::size_t k = 0; k < 6; ++k) feats.at(row, k) = e[k];
      ++row;
    }
  CentroidTrainOptions opts;
  opts.seed = 3;
  CentroidHasher hasher = train_centroids(feats, 6, opts);

  const DbRecord& q = db.records[13];
  auto shortlist = ps_search(q.centroid, db, 50);
  RerankResult rr = adaptive_rerank(q, shortlist, db, hasher, 4);
  CHECK(rr.ids.size() == shortlist.size());
  CHECK(rr.ids[0] == 13);  // the identical record wins
  CHECK(rr.lookups <= 50 * 4);
  CHECK_FALSE(rr.c_reduced);

  // C above the query's edge count is reduced and flagged
  RerankResult rc = adaptive_rerank(q, shortlist, db, hasher, 99);
  CHECK(rc.c_reduced);
  CHECK(rc.lookups <= 50 * q.edges.size());

  // candidate sharing no bins scores zero and drops behind scorers
  EmbeddingDB small;
  small.centroid_width = small.edge_width = 2;
  small.max_edges = 1;
  small.records.push_back(make_record(0, 0, {1, 0}, {{1.0, 0.0}, {1.0, 0.1}}));
  small.records.push_back(make_record(1, 0, {0.9, 0}, {{1.0, 0.05}, {0.9, 0.0}}));
  small.records.push_back(make_record(2, 1, {0, 1}, {{-8.0, -8.0}, {-8.0, -8.1}}));
  small.max_edges = 2;
  CentroidHasher h2;
  h2.centroids = Tensor::matrix(2, 2, {1, 0, -8, -8});
  RerankResult r2 = adaptive_rerank(small.records[0], {2, 1, 0}, small, h2, 2);
  CHECK(r2.ids[0] == 0);
  CHECK(r2.ids.back() == 2);  // no shared bins -> zero score -> tail
}

TEST_CASE("average precision closed forms and evaluation") {
  EmbeddingDB db = clustered_db(10, 10, 8);  // each label occurs once

  // single relevant item at rank r -> AP = 1/r
  std::vector<std::uint64_t> ranked = {4, 5, 3, 9, 8};
  CHECK(average_precision(ranked, db, db.records[3].label, 10) ==
        doctest::Approx(1.0 / 3.0));
  // perfect ranking -> 1.0
  CHECK(average_precision({3}, db, db.records[3].label, 10) == doctest::Approx(1.0));

  // separable clusters: PS mAP@10 high, evaluation plumbing works end-to-end
  EmbeddingDB big = clustered_db(200, 10, 12, 3, 0.05);
  std::vector<DbRecord> queries(big.records.begin(), big.records.begin() + 20);
  EvalResult ps = evaluate_retrieval(big, queries, "ps", 10);
  CHECK(ps.map_at_k >= 0.95);

  // hit-rate against an external top-1 reference
  std::unordered_map<std::uint64_t, std::uint64_t> ref;
  for (const DbRecord& q : queries) ref[q.id] = q.id;  // self is always in top-k
  EvalResult hr = evaluate_retrieval(big, queries, "ps", 10, VsOrder::order0,
                                     nullptr, &ref);
  CHECK(hr.hit_rate_at_k == doctest::Approx(1.0));
  CHECK_THROWS(evaluate_retrieval(big, queries, "nope", 10));
  CHECK_THROWS(evaluate_retrieval(big, queries, "aps", 10));  // needs hasher
}

TEST_CASE("aps/avs evaluation runs and stays in range") {
  EmbeddingDB db = clustered_db(120, 6, 8, 4, 0.05);
  Tensor feats({120 * 4, 8});
  std::size_t row = 0;
  for (const DbRecord& r : db.records)
    for (const auto& e : r.edges) {
      for (std::size_t k = 0; k < 8; ++k) feats.at(row, k) = e[k];
      ++row;
    }
  CentroidTrainOptions opts;
  opts.seed = 17;
  CentroidHasher hasher = train_centroids(feats, 6, opts);
  std::vector<DbRecord> queries(db.records.begin(), db.records.begin() + 10);
  for (const std::string& m : {std::string("aps"), std::string("avs")}) {
    EvalResult r = evaluate_retrieval(db, queries, m, 10, VsOrder::order1,
                                      &hasher, nullptr, 60, 4);
    CHECK(r.map_at_k >= 0.0);
    CHECK(r.map_at_k <= 1.0);
    CHECK(r.map_at_k > 0.5);  // separable data: reranking keeps quality
  }
}
