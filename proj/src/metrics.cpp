#include "hgvt/metrics.hpp"

#include <cmath>
#include <limits>

namespace hgvt {

namespace {

double csim(const Tensor& x, std::size_t i, std::size_t j) {
  double dot = 0, ni = 0, nj = 0;
  for (std::size_t c = 0; c < x.cols(); ++c) {
    dot += x.at(i, c) * x.at(j, c);
    ni += x.at(i, c) * x.at(i, c);
    nj += x.at(j, c) * x.at(j, c);
  }
  return dot / std::max(std::sqrt(ni) * std::sqrt(nj), 1e-12);
}

double csim_row(const Tensor& x, std::size_t i, const Tensor& cents, std::size_t j) {
  double dot = 0, ni = 0, nj = 0;
  for (std::size_t c = 0; c < x.cols(); ++c) {
    dot += x.at(i, c) * cents.at(j, c);
    ni += x.at(i, c) * x.at(i, c);
    nj += cents.at(j, c) * cents.at(j, c);
  }
  return dot / std::max(std::sqrt(ni) * std::sqrt(nj), 1e-12);
}

// Selected-scope member lists per primary edge, from the hard adjacency.
std::vector<std::vector<std::size_t>> members(const ClusterView& v) {
  std::vector<std::vector<std::size_t>> m(v.n_primary_edges);
  for (std::size_t j = 0; j < v.n_primary_edges; ++j)
    for (std::size_t i = v.first_vertex(); i < v.last_vertex(); ++i)
      if (v.hard.at(i, j) > 0) m[j].push_back(i);
  return m;
}

}  // namespace

Centroids cluster_centroids(const ClusterView& v) {
  Centroids out;
  out.values = Tensor({v.n_primary_edges, v.features.cols()});
  out.defined.assign(v.n_primary_edges, false);
  for (std::size_t j = 0; j < v.n_primary_edges; ++j) {
    double wsum = 0;
    for (std::size_t i = v.first_vertex(); i < v.last_vertex(); ++i)
      wsum += v.soft.at(i, j);
    if (wsum <= 0) continue;
    out.defined[j] = true;
    for (std::size_t i = v.first_vertex(); i < v.last_vertex(); ++i)
      for (std::size_t c = 0; c < v.features.cols(); ++c)
        out.values.at(j, c) += v.soft.at(i, j) * v.features.at(i, c) / wsum;
  }
  return out;
}

EdgeMetric hyperedge_entropy(const ClusterView& v) {
  EdgeMetric out;
  out.per_edge.assign(v.n_primary_edges, std::nullopt);
  Centroids cents = cluster_centroids(v);
  auto mem = members(v);
  double sum = 0;
  for (std::size_t j = 0; j < v.n_primary_edges; ++j) {
    if (mem[j].size() < 2 || !cents.defined[j]) continue;
    std::vector<double> s(mem[j].size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < mem[j].size(); ++a) {
      s[a] = csim_row(v.features, mem[j][a], cents.values, j);
      mx = std::max(mx, s[a]);
    }
    double z = 0;
    for (double& x : s) {
      x = std::exp(x - mx);
      z += x;
    }
    double h = 0;
    for (double x : s) {
      double p = x / z;
      if (p > 0) h -= p * std::log(p);
    }
    out.per_edge[j] = h;
    sum += h;
    ++out.defined;
  }
  out.mean = out.defined ? sum / double(out.defined) : 0.0;
  return out;
}

EdgeMetric intra_cluster_similarity(const ClusterView& v) {
  EdgeMetric out;
  out.per_edge.assign(v.n_primary_edges, std::nullopt);
  Centroids cents = cluster_centroids(v);
  auto mem = members(v);
  double sum = 0;
  for (std::size_t j = 0; j < v.n_primary_edges; ++j) {
    if (mem[j].size() < 2 || !cents.defined[j]) continue;
    double s = 0;
    for (std::size_t i : mem[j]) s += csim_row(v.features, i, cents.values, j);
    out.per_edge[j] = s / double(mem[j].size());
    sum += *out.per_edge[j];
    ++out.defined;
  }
  out.mean = out.defined ? sum / double(out.defined) : 0.0;
  return out;
}

double inter_cluster_distance(const ClusterView& v) {
  Centroids cents = cluster_centroids(v);
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < v.n_primary_edges; ++j)
    if (cents.defined[j]) idx.push_back(j);
  if (idx.size() < 2) return 0.0;
  double sum = 0;
  for (std::size_t a : idx)
    for (std::size_t b : idx)
      if (a != b) sum += 1.0 - csim_row(cents.values, a, cents.values, b);
  // csim_row treats its first argument as the feature matrix; centroid rows
  // work equally because the function only reads rows.
  return sum / double(idx.size() * (idx.size() - 1));
}

SilhouetteResult silhouette(const ClusterView& v, bool literal_denominator) {
  SilhouetteResult out;
  auto mem = members(v);
  const std::size_t v0 = v.first_vertex(), v1 = v.last_vertex();
  out.per_pair.assign(v1 - v0, std::vector<std::optional<double>>(v.n_primary_edges));

  double total = 0;
  for (std::size_t j = 0; j < v.n_primary_edges; ++j) {
    if (mem[j].size() < 2) continue;
    for (std::size_t i : mem[j]) {
      // a: soft-weighted mean distance to co-members of j.
      double num = 0, den = 0;
      for (std::size_t u : mem[j]) {
        if (u == i) continue;
        num += v.soft.at(u, j) * (1.0 - csim(v.features, i, u));
        den += v.soft.at(u, j);
      }
      if (den <= 0) continue;
      double a = num / den;

      // b: min over other edges, weighted by membership in the COMPARED edge.
      double b = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.n_primary_edges; ++k) {
        if (k == j) continue;
        double kn = 0, kd = 0;
        for (std::size_t u : mem[k]) {
          if (u == i) continue;
          kn += v.soft.at(u, k) * (1.0 - csim(v.features, i, u));
          kd += v.soft.at(u, k);
        }
        if (kd > 0) b = std::min(b, kn / kd);
      }
      if (!std::isfinite(b)) continue;

      double denom = std::max(a, b);
      double s = denom > 0 ? (b - a) / denom : 0.0;  // a=b=0 -> 0 by convention
      out.per_pair[i - v0][j] = s;
      total += s;
      ++out.defined_pairs;
    }
  }
  if (literal_denominator)
    out.global = total / double(v.n_primary_edges * (v1 - v0));
  else
    out.global = out.defined_pairs ? total / double(out.defined_pairs) : 0.0;
  return out;
}

double sparsity(const Tensor& hard, SparsityScope scope, std::size_t n_primary) {
  std::size_t cols = scope == SparsityScope::primary_only ? n_primary : hard.cols();
  if (cols == 0 || hard.rows() == 0) return 1.0;
  std::size_t ones = 0;
  for (std::size_t i = 0; i < hard.rows(); ++i)
    for (std::size_t j = 0; j < cols; ++j) ones += hard.at(i, j) > 0;
  return 1.0 - double(ones) / double(hard.rows() * cols);
}

}  // namespace hgvt
