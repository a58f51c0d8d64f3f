#include "hgvt/retrieval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace hgvt {

using nlohmann::json;

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  double den = std::sqrt(na) * std::sqrt(nb);
  return den < 1e-12 ? 0.0 : dot / den;
}

}  // namespace

PrunedGraph prune_graph(const Tensor& soft, const Tensor& xe,
                        const Tensor& gate_probs, const GraphDims& dims,
                        std::size_t M, std::size_t N) {
  if (dims.n_virtual_edges == 0 || gate_probs.size() != dims.n_virtual_edges)
    throw TensorError("prune_graph: expert gate probabilities required");
  if (soft.rows() != dims.vertices() || soft.cols() != dims.edges())
    throw TensorError("prune_graph: adjacency shape mismatch");

  PrunedGraph out;
  std::size_t best = 0;
  for (std::size_t e = 1; e < dims.n_virtual_edges; ++e)
    if (gate_probs[e] > gate_probs[best]) best = e;
  out.root_edge = dims.n_primary_edges + best;
  out.root_confidence = gate_probs[best];

  // top-M virtual vertices by soft membership to the root edge
  std::vector<std::size_t> vs(dims.n_virtual_vertices);
  std::iota(vs.begin(), vs.end(), dims.n_image_vertices);
  std::stable_sort(vs.begin(), vs.end(), [&](std::size_t a, std::size_t b) {
    return soft.at(a, out.root_edge) > soft.at(b, out.root_edge);
  });
  vs.resize(std::min(M, vs.size()));
  out.top_vertices = vs;

  // each vertex, in rank order, takes its top-N primary edges among those not
  // yet selected (ties by lowest index), filling up to M*N distinct edges
  std::vector<char> taken(dims.n_primary_edges, 0);
  std::vector<std::size_t> selected;
  for (std::size_t v : vs) {
    std::vector<std::size_t> order(dims.n_primary_edges);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return soft.at(v, a) > soft.at(v, b);
    });
    std::size_t picked = 0;
    for (std::size_t e : order) {
      if (picked == N) break;
      if (taken[e]) continue;
      taken[e] = 1;
      selected.push_back(e);
      ++picked;
    }
  }

  for (std::size_t e : selected) {
    PrunedEdge pe;
    pe.edge_index = e;
    for (std::size_t v : vs)
      pe.contribution += soft.at(v, e) * soft.at(v, out.root_edge);
    pe.features.resize(xe.cols());
    for (std::size_t c = 0; c < xe.cols(); ++c) pe.features[c] = xe.at(e, c);
    out.edges.push_back(std::move(pe));
  }
  std::stable_sort(out.edges.begin(), out.edges.end(),
                   [](const PrunedEdge& a, const PrunedEdge& b) {
                     if (a.contribution != b.contribution)
                       return a.contribution > b.contribution;
                     return a.edge_index < b.edge_index;
                   });
  return out;
}

DbRecord make_record(std::uint64_t id, std::int64_t label,
                     std::vector<double> centroid,
                     std::vector<std::vector<double>> edges) {
  DbRecord r;
  r.id = id;
  r.label = label;
  r.centroid = std::move(centroid);
  r.edges = std::move(edges);
  r.variance.assign(r.centroid.size(), 0.0);
  if (r.edges.empty()) return r;

  const std::size_t ew = r.edges[0].size();
  if (ew > r.centroid.size())
    throw TensorError("make_record: edge width exceeds centroid width");
  const std::size_t prefix = r.centroid.size() - ew;  // image half, if any
  const double n = double(r.edges.size());
  double total = 0;
  for (std::size_t d = 0; d < ew; ++d) {
    double mean = 0;
    for (const auto& e : r.edges) mean += e[d] / n;
    double var = 0;
    for (const auto& e : r.edges) var += (e[d] - mean) * (e[d] - mean) / n;
    r.variance[prefix + d] = var;
    total += var;
  }
  r.mean_variance = total / double(ew);
  for (std::size_t d = 0; d < prefix; ++d) r.variance[d] = r.mean_variance;
  return r;
}

// ---- DB I/O -----------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<char*>(b), 4);
}
void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, std::uint32_t(v));
  put_u32(os, std::uint32_t(v >> 32));
}
void put_f32(std::ostream& os, double v) {
  float f = float(v);
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}
std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}
std::uint64_t get_u64(std::istream& is) {
  std::uint64_t lo = get_u32(is);
  return lo | std::uint64_t(get_u32(is)) << 32;
}
double get_f32(std::istream& is) {
  std::uint32_t bits = get_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return double(f);
}

}  // namespace

void save_db(const std::string& path, const EmbeddingDB& db) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw TensorError("save_db: cannot open " + path);
  os.write("HGDB", 4);
  put_u32(os, 1);  // version
  put_u32(os, std::uint32_t(db.centroid_width));
  put_u32(os, std::uint32_t(db.edge_width));
  put_u32(os, std::uint32_t(db.max_edges));
  put_u64(os, db.records.size());
  for (const DbRecord& r : db.records) {
    if (r.centroid.size() != db.centroid_width ||
        r.variance.size() != db.centroid_width || r.edges.size() > db.max_edges)
      throw TensorError("save_db: record does not match the declared widths");
    put_u64(os, r.id);
    put_u64(os, std::uint64_t(r.label));
    put_u32(os, std::uint32_t(r.edges.size()));
    for (double v : r.centroid) put_f32(os, v);
    put_f32(os, r.mean_variance);
    for (double v : r.variance) put_f32(os, v);
    for (std::size_t e = 0; e < db.max_edges; ++e)
      for (std::size_t d = 0; d < db.edge_width; ++d)
        put_f32(os, e < r.edges.size() ? r.edges[e][d] : 0.0);
  }
  json side = {{"magic", "HGDB"},
               {"version", 1},
               {"centroid_width", db.centroid_width},
               {"edge_width", db.edge_width},
               {"max_edges", db.max_edges},
               {"records", db.records.size()}};
  std::ofstream(path + ".json") << side.dump(2) << "\n";
}

EmbeddingDB load_db(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TensorError("load_db: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (std::strncmp(magic, "HGDB", 4) != 0)
    throw TensorError("load_db: bad magic in " + path);
  if (get_u32(is) != 1) throw TensorError("load_db: unsupported version");
  EmbeddingDB db;
  db.centroid_width = get_u32(is);
  db.edge_width = get_u32(is);
  db.max_edges = get_u32(is);
  std::uint64_t n = get_u64(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    DbRecord r;
    r.id = get_u64(is);
    r.label = std::int64_t(get_u64(is));
    std::uint32_t n_edges = get_u32(is);
    r.centroid.resize(db.centroid_width);
    for (double& v : r.centroid) v = get_f32(is);
    r.mean_variance = get_f32(is);
    r.variance.resize(db.centroid_width);
    for (double& v : r.variance) v = get_f32(is);
    for (std::size_t e = 0; e < db.max_edges; ++e) {
      std::vector<double> edge(db.edge_width);
      for (double& v : edge) v = get_f32(is);
      if (e < n_edges) r.edges.push_back(std::move(edge));
    }
    if (!is) throw TensorError("load_db: truncated file " + path);
    db.records.push_back(std::move(r));
  }
  return db;
}

// ---- search -----------------------------------------------------------------

std::vector<std::uint64_t> ps_search(const std::vector<double>& query,
                                     const EmbeddingDB& db, std::size_t k) {
  std::vector<std::pair<double, std::uint64_t>> scored;
  for (const DbRecord& r : db.records)
    scored.emplace_back(cosine(query, r.centroid), r.id);
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < std::min(k, scored.size()); ++i)
    out.push_back(scored[i].second);
  return out;
}

double vs_distance(const DbRecord& a, const DbRecord& b, VsOrder order) {
  if (a.centroid.size() != b.centroid.size())
    throw TensorError("vs_distance: centroid width mismatch");
  const std::size_t d = a.centroid.size();

  if (order == VsOrder::pointwise) {
    // query variance set to zero: exact per-dim division by the candidate's
    // stored variances
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) {
      double var = b.variance[i];
      if (var <= 0) throw TensorError("vs_distance: non-positive variance");
      double delta = a.centroid[i] - b.centroid[i];
      s += delta * delta / var;
    }
    return s;
  }

  double sbar = 0.5 * (a.mean_variance + b.mean_variance);
  if (sbar <= 0) throw TensorError("vs_distance: non-positive mean variance");

  if (order == VsOrder::full) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) {
      double var = 0.5 * (a.variance[i] + b.variance[i]);
      if (var <= 0) throw TensorError("vs_distance: non-positive variance");
      double delta = a.centroid[i] - b.centroid[i];
      s += delta * delta / var;
    }
    return s;
  }

  const double rho = 1.0 / sbar;
  double s = 0;
  for (std::size_t i = 0; i < d; ++i) {
    double delta = a.centroid[i] - b.centroid[i];
    double dev = 0.5 * (a.variance[i] + b.variance[i]) - sbar;  // delta_i^2
    double eta = rho * dev;
    double factor = 1.0;
    if (order == VsOrder::order1)
      factor = std::max(1.0 - eta, 0.0);
    else if (order == VsOrder::order2)
      factor = 1.0 - eta + eta * eta;
    s += rho * delta * delta * factor;
  }
  return std::max(s, 0.0);
}

std::vector<std::uint64_t> vs_search(const DbRecord& query,
                                     const EmbeddingDB& db, std::size_t k,
                                     VsOrder order) {
  std::vector<std::pair<double, std::uint64_t>> scored;
  for (const DbRecord& r : db.records)
    scored.emplace_back(vs_distance(query, r, order), r.id);
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;  // ascending distance
    return a.second < b.second;
  });
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < std::min(k, scored.size()); ++i)
    out.push_back(scored[i].second);
  return out;
}

// ---- centroid hashing ---------------------------------------------------------

CentroidHasher train_centroids(const Tensor& features, std::size_t H,
                               const CentroidTrainOptions& opts) {
  if (H < 2) throw TensorError("train_centroids: H must be at least 2");
  if (features.rows() == 0) throw TensorError("train_centroids: empty feature set");
  const std::size_t n = features.rows(), d = features.cols();

  std::mt19937_64 rng(opts.seed);
  // init: random distinct samples (plus jitter so centroids stay distinct)
  Tensor c({H, d});
  std::normal_distribution<double> nd(0.0, 1e-3);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (std::size_t h = 0; h < H; ++h) {
    std::size_t s = pick(rng);
    for (std::size_t k = 0; k < d; ++k) c.at(h, k) = features.at(s, k) + nd(rng);
  }

  // plain Adam over the centroid matrix
  Tensor m({H, d}), v({H, d});
  std::size_t t_step = 0;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += opts.batch) {
      std::size_t bsz = std::min(opts.batch, n - start);
      Tensor grad({H, d});
      std::vector<double> load(H, 0.0);  // argmin routed fraction per bin
      std::vector<std::size_t> n1s(bsz), n2s(bsz);
      for (std::size_t b = 0; b < bsz; ++b) {
        std::size_t i = order[start + b];
        // nearest and second-nearest centroid
        std::size_t n1 = 0, n2 = 1;
        double d1 = 1e300, d2 = 1e300;
        for (std::size_t h = 0; h < H; ++h) {
          double dist = 0;
          for (std::size_t k = 0; k < d; ++k) {
            double diff = features.at(i, k) - c.at(h, k);
            dist += diff * diff;
          }
          if (dist < d1) {
            d2 = d1; n2 = n1;
            d1 = dist; n1 = h;
          } else if (dist < d2) {
            d2 = dist; n2 = h;
          }
        }
        n1s[b] = n1;
        n2s[b] = n2;
        load[n1] += 1.0 / double(bsz);
        // attraction to nearest, repulsion from second-nearest
        for (std::size_t k = 0; k < d; ++k) {
          double diff1 = c.at(n1, k) - features.at(i, k);
          double diff2 = c.at(n2, k) - features.at(i, k);
          grad.at(n1, k) += 2.0 * diff1 / double(bsz);
          grad.at(n2, k) -= opts.lambda_icd * 2.0 * diff2 / double(bsz);
        }
      }
      // load balancing: overloaded bins push their centroid away from the
      // batch members they captured (weight grows with excess load)
      for (std::size_t b = 0; b < bsz; ++b) {
        std::size_t i = order[start + b], n1 = n1s[b];
        double excess = load[n1] - 1.0 / double(H);
        if (excess <= 0) continue;
        for (std::size_t k = 0; k < d; ++k)
          grad.at(n1, k) -= opts.lambda_den * excess * 2.0 *
                            (c.at(n1, k) - features.at(i, k)) / double(bsz);
      }
      ++t_step;
      double bc1 = 1.0 - std::pow(b1, double(t_step));
      double bc2 = 1.0 - std::pow(b2, double(t_step));
      for (std::size_t idx = 0; idx < H * d; ++idx) {
        m[idx] = b1 * m[idx] + (1 - b1) * grad[idx];
        v[idx] = b2 * v[idx] + (1 - b2) * grad[idx] * grad[idx];
        c[idx] -= opts.lr * (m[idx] / bc1) / (std::sqrt(v[idx] / bc2) + eps);
      }
    }
  }
  return CentroidHasher{std::move(c)};
}

std::size_t hash_assign(const CentroidHasher& hasher,
                        const std::vector<double>& feature) {
  const Tensor& c = hasher.centroids;
  if (feature.size() != c.cols())
    throw TensorError("hash_assign: feature width mismatch");
  std::size_t best = 0;
  double best_d = 1e300;
  for (std::size_t h = 0; h < c.rows(); ++h) {
    double dist = 0;
    for (std::size_t k = 0; k < c.cols(); ++k) {
      double diff = feature[k] - c.at(h, k);
      dist += diff * diff;
    }
    if (dist < best_d) {  // strict: ties keep the lower index
      best_d = dist;
      best = h;
    }
  }
  return best;
}

RerankResult adaptive_rerank(const DbRecord& query,
                             const std::vector<std::uint64_t>& shortlist,
                             const EmbeddingDB& db,
                             const CentroidHasher& hasher, std::size_t C) {
  RerankResult out;
  if (query.edges.empty()) throw TensorError("adaptive_rerank: query has no edges");
  if (C > query.edges.size()) {
    C = query.edges.size();
    out.c_reduced = true;
  }

  std::unordered_map<std::uint64_t, const DbRecord*> by_id;
  for (const DbRecord& r : db.records) by_id[r.id] = &r;

  std::vector<std::size_t> qbin(C);
  for (std::size_t i = 0; i < C; ++i) qbin[i] = hash_assign(hasher, query.edges[i]);

  std::vector<std::pair<double, std::uint64_t>> scored;  // (score, shortlist pos)
  for (std::size_t pos = 0; pos < shortlist.size(); ++pos) {
    auto it = by_id.find(shortlist[pos]);
    if (it == by_id.end())
      throw TensorError("adaptive_rerank: shortlist id not in db");
    const DbRecord& cand = *it->second;
    std::vector<std::size_t> cbin(cand.edges.size());
    for (std::size_t e = 0; e < cand.edges.size(); ++e)
      cbin[e] = hash_assign(hasher, cand.edges[e]);

    double score = 0;
    for (std::size_t i = 0; i < C; ++i) {
      ++out.lookups;
      double best = 0;  // empty bin contributes 0
      bool any = false;
      for (std::size_t e = 0; e < cand.edges.size(); ++e) {
        if (cbin[e] != qbin[i]) continue;
        ++out.comparisons;
        double cs = cosine(query.edges[i], cand.edges[e]);
        if (!any || cs > best) best = cs;
        any = true;
      }
      score += best / double(C);
    }
    scored.emplace_back(score, pos);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;  // original shortlist order breaks ties
  });
  for (const auto& [score, pos] : scored) out.ids.push_back(shortlist[pos]);
  return out;
}

double average_precision(const std::vector<std::uint64_t>& ranked,
                         const EmbeddingDB& db, std::int64_t query_label,
                         std::size_t k) {
  std::unordered_map<std::uint64_t, std::int64_t> labels;
  std::size_t total_relevant = 0;
  for (const DbRecord& r : db.records) {
    labels[r.id] = r.label;
    total_relevant += r.label == query_label;
  }
  if (total_relevant == 0) return 0.0;
  double ap = 0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
    auto it = labels.find(ranked[r]);
    if (it == labels.end() || it->second != query_label) continue;
    ++hits;
    ap += double(hits) / double(r + 1);
  }
  return ap / double(std::min<std::size_t>(total_relevant, k));
}

EvalResult evaluate_retrieval(
    const EmbeddingDB& db, const std::vector<DbRecord>& queries,
    const std::string& method, std::size_t k, VsOrder order,
    const CentroidHasher* hasher,
    const std::unordered_map<std::uint64_t, std::uint64_t>* reference_top1,
    std::size_t shortlist_size, std::size_t C) {
  bool rerank = method == "aps" || method == "avs";
  bool volumetric = method == "vs" || method == "avs";
  if (!rerank && !volumetric && method != "ps")
    throw TensorError("evaluate_retrieval: unknown method " + method);
  if (rerank && !hasher)
    throw TensorError("evaluate_retrieval: reranking requires a hasher");

  EvalResult out;
  std::size_t hits = 0, hit_total = 0;
  for (const DbRecord& q : queries) {
    std::size_t depth = rerank ? shortlist_size : k;
    std::vector<std::uint64_t> ranked =
        volumetric ? vs_search(q, db, depth, order)
                   : ps_search(q.centroid, db, depth);
    if (rerank) ranked = adaptive_rerank(q, ranked, db, *hasher, C).ids;
    if (ranked.size() > k) ranked.resize(k);
    out.map_at_k += average_precision(ranked, db, q.label, k);
    if (reference_top1) {
      auto it = reference_top1->find(q.id);
      if (it != reference_top1->end()) {
        ++hit_total;
        hits += std::find(ranked.begin(), ranked.end(), it->second) != ranked.end();
      }
    }
  }
  if (!queries.empty()) out.map_at_k /= double(queries.size());
  if (hit_total) out.hit_rate_at_k = double(hits) / double(hit_total);
  return out;
}

}  // namespace hgvt
