#pragma once

// Hypergraph quality metrics over primary-hyperedge clusters: hyperedge
// entropy, intra-cluster similarity, inter-cluster distance, silhouette, and
// hard-adjacency sparsity. Plain-tensor math (no tape); brute-force oracles
// live in the tests.

#include <cstddef>
#include <optional>
#include <vector>

#include "hgvt/tensor.hpp"

namespace hgvt {

enum class VertexScope { image_only, all_vertices };
enum class SparsityScope { all, primary_only };

// A snapshot of one layer's soft/hard adjacency plus vertex features, with
// metrics restricted to the primary-hyperedge columns.
struct ClusterView {
  Tensor soft;      // |V| x |E|
  Tensor hard;      // |V| x |E| binary
  Tensor features;  // |V| x d
  std::size_t n_image_vertices = 0;
  std::size_t n_primary_edges = 0;
  VertexScope scope = VertexScope::image_only;

  std::size_t first_vertex() const { return 0; }
  std::size_t last_vertex() const {
    return scope == VertexScope::image_only ? n_image_vertices : features.rows();
  }
};

struct EdgeMetric {
  std::vector<std::optional<double>> per_edge;  // nullopt = skipped/undefined
  double mean = 0.0;   // over defined edges
  std::size_t defined = 0;
};

// Soft-weighted centroids over the selected vertex subset; zero-weight
// columns are flagged undefined and excluded downstream.
struct Centroids {
  Tensor values;                    // |pE| x d (undefined rows are zero)
  std::vector<bool> defined;        // per primary edge
};
Centroids cluster_centroids(const ClusterView& view);

// Per edge: softmax over member-vertex cosines to the centroid, then entropy.
// Edges with fewer than 2 members are skipped.
EdgeMetric hyperedge_entropy(const ClusterView& view);

// Mean member cosine to the centroid; <2-member edges omitted.
EdgeMetric intra_cluster_similarity(const ClusterView& view);

// Mean cosine distance over ordered centroid pairs (both defined).
double inter_cluster_distance(const ClusterView& view);

struct SilhouetteResult {
  // s_ij for member pairs (vertex, primary edge); non-members and undefined
  // pairs are nullopt. Indexed [vertex][edge] over the selected scope.
  std::vector<std::vector<std::optional<double>>> per_pair;
  double global = 0.0;
  std::size_t defined_pairs = 0;
};

// a_ij: soft-weighted mean cosine distance of i to co-members of j; b_ij: min
// over other edges of the soft-weighted mean distance to that edge's members.
// literal_denominator averages over all |E'|*|V'| pairs (zeros for undefined)
// instead of only the defined ones.
SilhouetteResult silhouette(const ClusterView& view,
                            bool literal_denominator = false);

double sparsity(const Tensor& hard, SparsityScope scope,
                std::size_t n_primary = 0);

}  // namespace hgvt
