// Acceptance gate: ten independent criteria, one pass/fail line each.
// Exit status is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "hgvt/analysis.hpp"
#include "hgvt/attention.hpp"
#include "hgvt/hypergraph.hpp"
#include "hgvt/metrics.hpp"
#include "hgvt/model.hpp"
#include "hgvt/retrieval.hpp"
#include "hgvt/training.hpp"

using namespace hgvt;

namespace {

std::mt19937_64 g_rng(2024);

Tensor randn(std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor m({r, c});
  for (double& v : m.data()) v = d(g_rng);
  return m;
}

// ---- 1: gradient suite ---------------------------------------------------

bool c1_gradients(std::string& detail) {
  bool ok = true;
  ok &= finite_diff_check(
            [](Tape& t, const std::vector<Var>& in) {
              return smoothed_cross_entropy(t, in[0], 2, 0.1);
            },
            {randn(1, 6)})
            .pass;
  ok &= finite_diff_check(
            [](Tape& t, const std::vector<Var>& in) {
              return diversity_penalty(t, in[0]);
            },
            {randn(5, 7)})
            .pass;
  ok &= finite_diff_check(
            [](Tape& t, const std::vector<Var>& in) {
              return population_loss(t, form_soft_adjacency(t, in[0], in[1]),
                                     2.0, 0.5);
            },
            {randn(8, 4), randn(4, 4)})
            .pass;
  ok &= finite_diff_check(
            [](Tape& t, const std::vector<Var>& in) {
              return expert_density_loss(
                  t, {row_softmax(t, in[0]), row_softmax(t, in[1])});
            },
            {randn(1, 3), randn(1, 3)})
            .pass;
  ok &= finite_diff_check(
            [](Tape& t, const std::vector<Var>& in) {
              return expert_confidence_loss(t, row_softmax(t, in[0]));
            },
            {randn(1, 4)})
            .pass;

  // full nano forward-to-loss, sampled coordinates. Stochastic knobs off;
  // standard modulation because the modified Hadamard's correction factor is
  // gradient-stopped across its sign kinks (FD-checked separately).
  ModelConfig cfg = preset("nano");
  cfg.path_drop = 0.0;
  cfg.expert_noise_sigma = 0.0;
  cfg.expert_dropout = 0.0;
  cfg.class_dropout = 0.0;
  cfg.modulation = Modulation::standard;
  SyntheticDataset ds = make_synthetic_dataset(2, cfg.classes, cfg.image_size, 5);
  ModelWeights w = init_weights(cfg, 2);
  TrainConfig tc;
  FdReport rep = finite_diff_check_sampled(
      [&](Tape& t, const std::vector<Var>& in) {
        ModelParams p;
        p.vars = in;
        p.weights = &w;
        std::vector<ForwardResult> rs = {
            forward_classify(t, ds.images[0], p, cfg, true, nullptr),
            forward_classify(t, ds.images[1], p, cfg, true, nullptr)};
        return total_loss(t, rs, {ds.labels[0], ds.labels[1]}, cfg, tc).loss;
      },
      w.tensors, 3, 7);
  ok &= rep.pass;
  std::ostringstream os;
  os << "full-model max rel err " << rep.max_rel_err;
  detail = os.str();
  return ok;
}

// ---- 2: closed-form constants ----------------------------------------------

bool c2_constants(std::string& detail) {
  bool ok = true;
  // aligned, opposed, and orthogonal unit vectors give cos = 1, -1, 0
  Tape t;
  Tensor va = Tensor::matrix(3, 2, {1, 0, -1, 0, 0, 1});
  Tensor ea = Tensor::matrix(1, 2, {1, 0});
  Tensor a = t.value(form_soft_adjacency(t, t.input(va), t.input(ea)));
  auto close = [](double x, double y) { return std::abs(x - y) < 5e-6; };
  ok &= close(a.at(0, 0), 0.98201);
  ok &= close(a.at(1, 0), 0.01799);
  ok &= close(a.at(2, 0), 0.5);

  // nine sign cases of the modified Hadamard: output sign per the behavior
  // table, magnitude |S * (2A-1)|
  struct Case { double s, a; int sign; };
  const Case cases[] = {{2, 0.8, +1}, {0, 0.8, 0}, {-2, 0.8, -1},
                        {2, 0.5, 0},  {0, 0.5, 0}, {-2, 0.5, 0},
                        {2, 0.2, -1}, {0, 0.2, 0}, {-2, 0.2, -1}};
  for (const Case& c : cases) {
    Tape t2;
    double out = t2.value(modified_hadamard(t2, t2.input(Tensor::scalar(c.s)),
                                            t2.input(Tensor::scalar(c.a))))[0];
    double expect = std::abs(c.s * (2 * c.a - 1));
    if (c.sign == 0)
      ok &= std::abs(out) < 1e-12;
    else
      ok &= (c.sign > 0 ? out > 0 : out < 0) &&
            std::abs(std::abs(out) - expect) < 1e-12;
  }
  detail = "sigmoid(4)=" + std::to_string(a.at(0, 0));
  return ok;
}

// ---- 3: mask/sparsity equivalence -------------------------------------------

bool c3_sparsity(std::string& detail) {
  bool ok = true;
  std::bernoulli_distribution coin(0.35);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 6, d_f = 8, heads = 2, m = 3;
    Tensor hard({n, m});
    for (double& v : hard.data()) v = coin(g_rng) ? 1.0 : 0.0;
    Tensor xv = randn(n, d_f);
    Tape t;
    AttentionParams p{t.input(randn(d_f, d_f, 0.5)), t.input(randn(d_f, d_f, 0.5)),
                      t.input(randn(d_f, d_f, 0.5)), t.input(randn(d_f, d_f, 0.5))};
    Tensor dense = t.value(
        vertex_self_attention(t, t.input(xv), vertex_pair_mask(hard), p, heads));
    Tensor sparse = sparse_vertex_self_attention(xv, hard, t.value(p.wq),
                                                 t.value(p.wk), t.value(p.wv),
                                                 t.value(p.wo), heads);
    for (std::size_t i = 0; i < dense.size(); ++i) {
      double denom = std::max({std::abs(dense[i]), std::abs(sparse[i]), 1e-12});
      worst = std::max(worst, std::abs(dense[i] - sparse[i]) / denom);
    }
  }
  ok &= worst <= 1e-10;

  // hierarchy invariant: no gradient path from virtual-hyperedge features to
  // image-vertex outputs through distribute attention
  GraphDims dims{3, 2, 2, 2};
  Tensor hier = hierarchy_mask_additive(dims);
  BlockConfig cfg;
  cfg.heads = 2;
  for (int trial = 0; trial < 20 && ok; ++trial) {
    const std::size_t d_f = 4, d_a = 4;
    Tape t;
    AttentionParams pa{t.input(randn(d_f, d_f, 0.5)), t.input(randn(d_f, d_f, 0.5)),
                       t.input(randn(d_f, d_f, 0.5)), t.input(randn(d_f, d_f, 0.5))};
    Var xv = t.input(randn(dims.vertices(), d_f));
    Var xe = t.input(randn(dims.edges(), d_f));
    Var a = form_soft_adjacency(t, t.input(randn(dims.vertices(), d_a)),
                                t.input(randn(dims.edges(), d_a)));
    Var out = edge_distribute_attention(t, xv, xe, a, hier, pa, cfg);
    t.backward(sum_all(t, slice_rows(t, out, 0, dims.n_image_vertices)));
    const Tensor& ge = t.grad(xe);
    for (std::size_t j = dims.n_primary_edges; j < dims.edges(); ++j)
      for (std::size_t c = 0; c < d_f; ++c) ok &= ge.at(j, c) == 0.0;
  }
  std::ostringstream os;
  os << "sparse-vs-dense max rel err " << worst;
  detail = os.str();
  return ok;
}

// ---- 4: metric oracles --------------------------------------------------------
// Flat-loop brute-force references, sharing no helpers with the library.

struct OGraph {
  std::size_t nv = 0, ne = 0, nimg = 0, npe = 0, d = 0;
  std::vector<double> soft, hard, x;
  bool image_only = true;
  double A(std::size_t i, std::size_t j) const { return soft[i * ne + j]; }
  double H(std::size_t i, std::size_t j) const { return hard[i * ne + j]; }
  std::size_t vend() const { return image_only ? nimg : nv; }
};

double ocos(const OGraph& g, const std::vector<double>& a,
            const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t c = 0; c < g.d; ++c) {
    dot += a[c] * b[c];
    na += a[c] * a[c];
    nb += b[c] * b[c];
  }
  double den = std::sqrt(na) * std::sqrt(nb);
  return dot / (den < 1e-12 ? 1e-12 : den);
}

std::vector<double> orow(const OGraph& g, std::size_t i) {
  return std::vector<double>(g.x.begin() + i * g.d, g.x.begin() + (i + 1) * g.d);
}

std::vector<double> ocentroid(const OGraph& g, std::size_t j) {
  double w = 0;
  for (std::size_t i = 0; i < g.vend(); ++i) w += g.A(i, j);
  if (w <= 0) return {};
  std::vector<double> c(g.d, 0.0);
  for (std::size_t i = 0; i < g.vend(); ++i)
    for (std::size_t k = 0; k < g.d; ++k) c[k] += g.A(i, j) * g.x[i * g.d + k] / w;
  return c;
}

std::vector<std::size_t> omembers(const OGraph& g, std::size_t j) {
  std::vector<std::size_t> m;
  for (std::size_t i = 0; i < g.vend(); ++i)
    if (g.H(i, j) > 0) m.push_back(i);
  return m;
}

double oracle_he(const OGraph& g) {
  double total = 0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < g.npe; ++j) {
    auto mem = omembers(g, j);
    auto cen = ocentroid(g, j);
    if (mem.size() < 2 || cen.empty()) continue;
    std::vector<double> e;
    double z = 0;
    for (std::size_t i : mem) e.push_back(std::exp(ocos(g, orow(g, i), cen)));
    for (double v : e) z += v;
    double h = 0;
    for (double v : e) h -= (v / z) * std::log(v / z);
    total += h;
    ++n;
  }
  return n ? total / double(n) : 0.0;
}

double oracle_ics(const OGraph& g) {
  double total = 0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < g.npe; ++j) {
    auto mem = omembers(g, j);
    auto cen = ocentroid(g, j);
    if (mem.size() < 2 || cen.empty()) continue;
    double s = 0;
    for (std::size_t i : mem) s += ocos(g, orow(g, i), cen);
    total += s / double(mem.size());
    ++n;
  }
  return n ? total / double(n) : 0.0;
}

double oracle_icd(const OGraph& g) {
  std::vector<std::vector<double>> cs;
  for (std::size_t j = 0; j < g.npe; ++j) {
    auto c = ocentroid(g, j);
    if (!c.empty()) cs.push_back(c);
  }
  if (cs.size() < 2) return 0.0;
  double s = 0;
  for (std::size_t a = 0; a < cs.size(); ++a)
    for (std::size_t b = 0; b < cs.size(); ++b)
      if (a != b) s += 1.0 - ocos(g, cs[a], cs[b]);
  return s / double(cs.size() * (cs.size() - 1));
}

double oracle_sil(const OGraph& g) {
  double total = 0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < g.npe; ++j) {
    auto mem = omembers(g, j);
    if (mem.size() < 2) continue;
    for (std::size_t i : mem) {
      double an = 0, ad = 0;
      for (std::size_t u : mem)
        if (u != i) {
          an += g.A(u, j) * (1.0 - ocos(g, orow(g, i), orow(g, u)));
          ad += g.A(u, j);
        }
      if (ad <= 0) continue;
      double a = an / ad;
      bool have_b = false;
      double b = 0;
      for (std::size_t k = 0; k < g.npe; ++k) {
        if (k == j) continue;
        double bn = 0, bd = 0;
        for (std::size_t u : omembers(g, k))
          if (u != i) {
            bn += g.A(u, k) * (1.0 - ocos(g, orow(g, i), orow(g, u)));
            bd += g.A(u, k);
          }
        if (bd > 0) {
          double cand = bn / bd;
          if (!have_b || cand < b) b = cand, have_b = true;
        }
      }
      if (!have_b) continue;
      double m = a > b ? a : b;
      total += m > 0 ? (b - a) / m : 0.0;
      ++n;
    }
  }
  return n ? total / double(n) : 0.0;
}

bool c4_metric_oracles(std::string& detail) {
  std::mt19937_64 rng(99);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    OGraph g;
    std::uniform_int_distribution<std::size_t> vd(2, 12), ed(2, 6), dd(2, 6);
    g.nv = vd(rng);
    g.ne = ed(rng);
    g.d = dd(rng);
    g.nimg = std::uniform_int_distribution<std::size_t>(1, g.nv)(rng);
    g.npe = std::uniform_int_distribution<std::size_t>(1, g.ne)(rng);
    g.image_only = std::bernoulli_distribution(0.5)(rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> nrm(0.0, 1.0);
    g.soft.resize(g.nv * g.ne);
    g.hard.resize(g.nv * g.ne);
    for (std::size_t k = 0; k < g.soft.size(); ++k) {
      g.soft[k] = u(rng);
      g.hard[k] = g.soft[k] > 0.5 ? 1.0 : 0.0;
    }
    g.x.resize(g.nv * g.d);
    for (double& v : g.x) v = nrm(rng);

    ClusterView v;
    v.soft = Tensor({g.nv, g.ne}, g.soft);
    v.hard = Tensor({g.nv, g.ne}, g.hard);
    v.features = Tensor({g.nv, g.d}, g.x);
    v.n_image_vertices = g.nimg;
    v.n_primary_edges = g.npe;
    v.scope = g.image_only ? VertexScope::image_only : VertexScope::all_vertices;

    worst = std::max(worst, std::abs(hyperedge_entropy(v).mean - oracle_he(g)));
    worst = std::max(worst,
                     std::abs(intra_cluster_similarity(v).mean - oracle_ics(g)));
    worst = std::max(worst, std::abs(inter_cluster_distance(v) - oracle_icd(g)));
    worst = std::max(worst, std::abs(silhouette(v).global - oracle_sil(g)));
  }
  std::ostringstream os;
  os << "max abs deviation " << worst;
  detail = os.str();
  return worst <= 1e-9;
}

// ---- 5: regularizer behavior ----------------------------------------------------

bool c5_regularizers(std::string& detail) {
  // diversity: 500 AdamW steps on one embedding matrix
  ModelWeights w;
  w.names = {"x.w"};
  w.tensors = {randn(6, 8)};
  AdamWState st;
  TrainConfig tc;
  tc.weight_decay = 0.0;
  for (int i = 0; i < 500; ++i) {
    Tape t;
    Var x = t.input(w.tensors[0]);
    t.backward(diversity_penalty(t, x));
    std::vector<Tensor> grads = {t.grad(x)};
    clip_global_norm(grads, 1e9);
    adamw_step(w, grads, st, tc, 0.02);
  }
  const Tensor& x = w.tensors[0];
  double worst_cos = 0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.rows(); ++j) {
      if (i == j) continue;
      double d = 0, ni = 0, nj = 0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        d += x.at(i, c) * x.at(j, c);
        ni += x.at(i, c) * x.at(i, c);
        nj += x.at(j, c) * x.at(j, c);
      }
      worst_cos = std::max(worst_cos, std::abs(d) / std::sqrt(ni * nj));
    }
  bool div_ok = worst_cos < 0.05;

  // population: 12 vertices, 6 edges, beta = |V|/6 = 2, gamma = 0.5
  const double beta = 2.0, gamma = 0.5;
  ModelWeights pw;
  pw.names = {"adj.v.w", "adj.e.w"};
  pw.tensors = {randn(12, 8), randn(6, 8)};
  AdamWState pst;
  for (int i = 0; i < 300; ++i) {
    Tape t;
    Var v = t.input(pw.tensors[0]), e = t.input(pw.tensors[1]);
    t.backward(population_loss(t, form_soft_adjacency(t, v, e), beta, gamma));
    std::vector<Tensor> grads = {t.grad(v), t.grad(e)};
    clip_global_norm(grads, 1e9);
    adamw_step(pw, grads, pst, tc, 0.01);
  }
  Tape t;
  std::vector<double> dens = population_densities(t.value(
      form_soft_adjacency(t, t.constant(pw.tensors[0]), t.constant(pw.tensors[1]))));
  std::size_t in_range = 0;
  for (double p : dens) in_range += (p >= gamma - 0.05 && p <= beta + 0.05);
  bool pop_ok = double(in_range) >= 0.9 * double(dens.size());

  std::ostringstream os;
  os << "max |cos| " << worst_cos << ", densities in range " << in_range << "/"
     << dens.size();
  detail = os.str();
  return div_ok && pop_ok;
}

// ---- 6: scaling table -------------------------------------------------------------

bool c6_scaling(std::string& detail) {
  auto within = [](double v, double target) {
    return std::abs(v - target) <= 0.15 * target;
  };
  double lt = double(count_params(preset("lt")));
  double ti = double(count_params(preset("ti")));
  double fl = double(count_flops(preset("ti"), 224));
  std::ostringstream os;
  os << "Lt " << lt / 1e6 << "M, Ti " << ti / 1e6 << "M, Ti@224 " << fl / 1e9
     << "B";
  detail = os.str();
  return within(lt, 6.8e6) && within(ti, 7.7e6) && within(fl, 1.80e9);
}

// ---- 7: expert assignment ------------------------------------------------------------

bool c7_assignment(std::string& detail) {
  ExpertAssignment a = assign_classes_to_experts(
      {{0.54, 0.28, 0.12, 0.06}, {0.46, 0.24, 0.22, 0.08}});
  detail = std::to_string(a.per_class[0].size()) + " and " +
           std::to_string(a.per_class[1].size()) + " experts";
  return a.per_class[0].size() == 2 && a.per_class[1].size() == 3;
}

// ---- 8: retrieval -----------------------------------------------------------------------

EmbeddingDB clustered_db(std::size_t n_records, std::size_t n_classes,
                         std::size_t d, std::size_t edges_per, double spread,
                         std::mt19937_64& rng) {
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
    for (std::size_t k = 0; k < d; ++k) cen[k] = centers[cls][k] + nd(rng);
    std::vector<std::vector<double>> edges;
    for (std::size_t e = 0; e < edges_per; ++e) {
      std::vector<double> ev(d);
      for (std::size_t k = 0; k < d; ++k) ev[k] = centers[cls][k] + nd(rng);
      edges.push_back(std::move(ev));
    }
    db.records.push_back(make_record(i, std::int64_t(cls), cen, edges));
  }
  return db;
}

bool c8_retrieval(std::string& detail) {
  std::mt19937_64 rng(7);
  // 10-class separable embeddings, 1000 records
  EmbeddingDB db = clustered_db(1000, 10, 12, 3, 0.05, rng);
  std::vector<DbRecord> queries(db.records.begin(), db.records.begin() + 50);
  EvalResult ps = evaluate_retrieval(db, queries, "ps", 10);
  bool ps_ok = ps.map_at_k >= 0.95;

  // order-0 equals full when variances are uniform
  EmbeddingDB uni = db;
  for (DbRecord& r : uni.records) {
    std::fill(r.variance.begin(), r.variance.end(), 0.7);
    r.mean_variance = 0.7;
  }
  bool exact_ok = true;
  for (std::size_t q = 0; q < 10; ++q)
    exact_ok &= vs_search(uni.records[q], uni, 50, VsOrder::order0) ==
                vs_search(uni.records[q], uni, 50, VsOrder::full);

  // moderate deviations (max rho*delta^2 < 0.3): Spearman >= 0.9
  EmbeddingDB mod = db;
  std::uniform_real_distribution<double> dev(-0.25, 0.25);
  for (DbRecord& r : mod.records) {
    for (double& v : r.variance) v = 0.8 * (1.0 + dev(rng));
    r.mean_variance = std::accumulate(r.variance.begin(), r.variance.end(), 0.0) /
                      double(r.variance.size());
  }
  double rho_min = 1.0;
  for (std::size_t q = 0; q < 5; ++q) {
    std::unordered_map<std::uint64_t, double> rank_b;
    // rank the whole database so both orderings cover the same id set
    auto a = vs_search(mod.records[q * 7], mod, mod.records.size(), VsOrder::order0);
    auto b = vs_search(mod.records[q * 7], mod, mod.records.size(), VsOrder::full);
    for (std::size_t i = 0; i < b.size(); ++i) rank_b[b[i]] = double(i);
    double n = double(a.size()), sum_d2 = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      double diff = double(i) - rank_b.at(a[i]);
      sum_d2 += diff * diff;
    }
    rho_min = std::min(rho_min, 1.0 - 6.0 * sum_d2 / (n * (n * n - 1.0)));
  }
  bool spearman_ok = rho_min >= 0.9;

  // rerank lookup budget: at most R*C query-edge bin lookups per query
  Tensor feats({db.records.size() * 3, db.edge_width});
  std::size_t row = 0;
  for (const DbRecord& r : db.records)
    for (const auto& e : r.edges) {
      for (std::size_t k = 0; k < db.edge_width; ++k) feats.at(row, k) = e[k];
      ++row;
    }
  CentroidHasher hasher = train_centroids(feats, 10);
  bool budget_ok = true;
  for (std::size_t q = 0; q < 10; ++q) {
    std::vector<std::uint64_t> shortlist =
        ps_search(db.records[q].centroid, db, 100);
    RerankResult rr = adaptive_rerank(db.records[q], shortlist, db, hasher, 4);
    budget_ok &= rr.lookups <= 100 * 4;
  }

  std::ostringstream os;
  os << "PS mAP@10 " << ps.map_at_k << ", min Spearman " << rho_min;
  detail = os.str();
  return ps_ok && exact_ok && spearman_ok && budget_ok;
}

// ---- 9: centroid hashing ------------------------------------------------------------------

bool c9_hashing(std::string& detail) {
  const std::size_t H = 10, d = 6, per = 60;
  std::mt19937_64 rng(17);
  std::normal_distribution<double> nd(0.0, 0.05);
  Tensor feats({H * per, d});
  for (std::size_t c = 0; c < H; ++c)
    for (std::size_t i = 0; i < per; ++i)
      for (std::size_t k = 0; k < d; ++k)
        feats.at(c * per + i, k) =
            (k == c % d ? 3.0 : 0.0) + double(c) * 0.7 + nd(rng);
  CentroidTrainOptions opts;
  opts.epochs = 8;
  opts.batch = 128;
  opts.seed = 5;
  CentroidHasher h1 = train_centroids(feats, H, opts);
  CentroidHasher h2 = train_centroids(feats, H, opts);
  bool det_ok = h1.centroids.data() == h2.centroids.data();

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
  double diversity = entropy / std::log(double(H));
  std::ostringstream os;
  os << "bin diversity " << diversity << (det_ok ? ", deterministic" : ", NON-DETERMINISTIC");
  detail = os.str();
  return det_ok && diversity >= 0.9;
}

// ---- 10: training smoke -----------------------------------------------------------------------

bool c10_training(std::string& detail) {
  ModelConfig cfg = preset("nano");  // 4-class
  TrainConfig tc;
  tc.total_steps = 200;
  tc.warmup_steps = 10;
  tc.batch_size = 8;
  tc.peak_lr = 3e-3;
  tc.seed = 3;
  SyntheticDataset ds = make_synthetic_dataset(32, cfg.classes, cfg.image_size, 3);
  TrainResult r1 = train(ds, cfg, tc);
  TrainResult r2 = train(ds, cfg, tc);
  bool identical = r1.log_lines == r2.log_lines;

  auto loss_at = [&](std::size_t i) {
    return nlohmann::json::parse(r1.log_lines[i]).at("loss").get<double>();
  };
  double early = 0, late = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    early += loss_at(i);
    late += loss_at(190 + i);
  }
  early /= 10;
  late /= 10;
  bool loss_ok = late <= 0.7 * early;

  // full-dataset train accuracy in eval mode
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tape t;
    ModelParams p = bind_params(t, r1.weights);
    ForwardResult fr = forward_classify(t, ds.images[i], p, cfg, false);
    const Tensor& lg = t.value(fr.logits);
    std::size_t best = 0;
    for (std::size_t c = 1; c < lg.cols(); ++c)
      if (lg.at(0, c) > lg.at(0, best)) best = c;
    correct += best == ds.labels[i];
  }
  double acc = double(correct) / double(ds.size());
  std::ostringstream os;
  os << "loss " << early << " -> " << late << ", train acc " << acc
     << (identical ? ", logs bit-identical" : ", LOGS DIFFER");
  detail = os.str();
  return identical && loss_ok && acc >= 0.5;
}

}  // namespace

int main() {
  using CriterionFn = bool (*)(std::string&);
  struct Criterion {
    const char* name;
    CriterionFn fn;
    double limit_s;  // 0 = no runtime bound
  };
  const Criterion table[] = {
      {"gradient suite", c1_gradients, 120.0},
      {"closed-form constants", c2_constants, 0.0},
      {"mask/sparsity equivalence", c3_sparsity, 0.0},
      {"metric oracles", c4_metric_oracles, 0.0},
      {"regularizer behavior", c5_regularizers, 0.0},
      {"scaling table", c6_scaling, 0.0},
      {"expert assignment", c7_assignment, 0.0},
      {"retrieval", c8_retrieval, 0.0},
      {"centroid hashing", c9_hashing, 0.0},
      {"training smoke", c10_training, 300.0},
  };

  int failures = 0;
  int idx = 0;
  for (const Criterion& c : table) {
    ++idx;
    std::string detail;
    bool ok = false;
    auto t0 = std::chrono::steady_clock::now();
    try {
      ok = c.fn(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    if (c.limit_s > 0 && secs > c.limit_s) {
      ok = false;
      detail += " [over time limit]";
    }
    std::printf("[%2d] %-28s %s  (%.1fs%s%s)\n", idx, c.name,
                ok ? "PASS" : "FAIL", secs, detail.empty() ? "" : "; ",
                detail.c_str());
    if (!ok) ++failures;
  }
  return failures;
}
