#pragma once

// Hypergraph image retrieval: graph pruning around the routed expert, an
// embedding database with fixed-width records, pooled-similarity and
// volumetric (diagonal-Mahalanobis) search with Taylor approximations,
// centroid hashing for bin assignment, adaptive reranking, and evaluation.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "hgvt/hypergraph.hpp"
#include "hgvt/tensor.hpp"

namespace hgvt {

struct PrunedEdge {
  std::size_t edge_index = 0;       // primary-hyperedge column
  double contribution = 0;          // summed membership toward the root
  std::vector<double> features;     // d_f feature vector
};

struct PrunedGraph {
  std::size_t root_edge = 0;        // absolute column of the argmax expert
  double root_confidence = 0;
  std::vector<std::size_t> top_vertices;  // top-M virtual vertices
  std::vector<PrunedEdge> edges;          // deduplicated, contribution-ranked
};

// Root = argmax gate expert; top-M virtual vertices by soft membership to the
// root; each vertex (in rank order) takes its top-N primary edges among those
// not yet selected, so equal memberships fill min(M*N, |pE|) distinct edges.
// Final ranking: contribution sum_{v in top-M} A[v][pE]*A[v][root],
// descending, ties by lowest edge index.
PrunedGraph prune_graph(const Tensor& soft, const Tensor& xe,
                        const Tensor& gate_probs, const GraphDims& dims,
                        std::size_t M = 3, std::size_t N = 4);

struct DbRecord {
  std::uint64_t id = 0;
  std::int64_t label = -1;
  std::vector<double> centroid;
  double mean_variance = 0;               // sigma-bar^2 over the edge dims
  std::vector<double> variance;           // per-dim sigma^2, centroid width
  std::vector<std::vector<double>> edges; // pruned hyperedge features
};

// Variance summary from the pruned edges around their per-dim mean. When the
// centroid is wider than the edges (image||expert concatenation) the leading
// image dims are assigned the mean variance (no per-dim signal exists there).
DbRecord make_record(std::uint64_t id, std::int64_t label,
                     std::vector<double> centroid,
                     std::vector<std::vector<double>> edges);

struct EmbeddingDB {
  std::size_t centroid_width = 0;
  std::size_t edge_width = 0;
  std::size_t max_edges = 0;  // fixed per-record capacity (zero-padded)
  std::vector<DbRecord> records;
};

// Binary format: "HGDB" magic, version, widths, little-endian f32 payload,
// fixed-width records; "<path>.json" sidecar carries widths and counts.
void save_db(const std::string& path, const EmbeddingDB& db);
EmbeddingDB load_db(const std::string& path);

// Cosine similarity to each record centroid, descending; ties by lower id.
std::vector<std::uint64_t> ps_search(const std::vector<double>& query,
                                     const EmbeddingDB& db, std::size_t k);

enum class VsOrder { pointwise, order0, order1, order2, full };

// Diagonal Mahalanobis d^2 between two records with combined per-dim variance
// sigma_i^2 = (s1_i + s2_i)/2. full: exact per-dim division. order0/1/2:
// Taylor expansion of 1/sigma_i^2 around the mean variance (rho = 1/sbar^2),
// order-1 factor clamped at 0. pointwise: candidate-only variances, exact
// per-dim division (query variance treated as zero).
double vs_distance(const DbRecord& a, const DbRecord& b, VsOrder order);

std::vector<std::uint64_t> vs_search(const DbRecord& query,
                                     const EmbeddingDB& db, std::size_t k,
                                     VsOrder order = VsOrder::order0);

struct CentroidHasher {
  Tensor centroids;  // H x d
};

struct CentroidTrainOptions {
  double lr = 4e-3;
  double lambda_icd = 0.1;
  double lambda_den = 0.5;
  std::size_t batch = 512;
  std::size_t epochs = 8;
  std::uint64_t seed = 0;
};

// Pulls each feature toward its nearest centroid, pushes the second-nearest
// away (lambda_icd), and adds a differentiable bin load-balancing penalty
// (lambda_den); Adam, deterministic from the seed.
CentroidHasher train_centroids(const Tensor& features, std::size_t H = 10,
                               const CentroidTrainOptions& opts = {});

// Nearest centroid by Euclidean distance; ties resolve to the lowest index.
std::size_t hash_assign(const CentroidHasher& hasher,
                        const std::vector<double>& feature);

struct RerankResult {
  std::vector<std::uint64_t> ids;
  std::size_t lookups = 0;      // (query edge, candidate) pairs, <= R*C
  std::size_t comparisons = 0;  // inner same-bin feature comparisons
  bool c_reduced = false;       // C exceeded the query's pruned-edge count
};

// Score per candidate = mean over the query's top-C edges of the best cosine
// similarity to a candidate edge sharing the same hash bin (0 if the bin is
// empty); descending, ties keep the original shortlist order.
RerankResult adaptive_rerank(const DbRecord& query,
                             const std::vector<std::uint64_t>& shortlist,
                             const EmbeddingDB& db,
                             const CentroidHasher& hasher, std::size_t C = 4);

// AP@k with relevance = label match; denominator min(#relevant-in-db, k).
double average_precision(const std::vector<std::uint64_t>& ranked,
                         const EmbeddingDB& db, std::int64_t query_label,
                         std::size_t k);

struct EvalResult {
  double map_at_k = 0;
  double hit_rate_at_k = 0;  // only meaningful when reference_top1 given
};

// method: "ps", "vs", "aps", "avs". reference_top1 maps query id to the
// externally designated top-1 db id (hit-rate); may be null.
EvalResult evaluate_retrieval(
    const EmbeddingDB& db, const std::vector<DbRecord>& queries,
    const std::string& method, std::size_t k = 10,
    VsOrder order = VsOrder::order0, const CentroidHasher* hasher = nullptr,
    const std::unordered_map<std::uint64_t, std::uint64_t>* reference_top1 =
        nullptr,
    std::size_t shortlist_size = 100, std::size_t C = 4);

}  // namespace hgvt
