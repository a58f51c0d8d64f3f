#pragma once

// Bipartite hypergraph state: dynamic adjacency formation from adjacency
// features, static hierarchy masks, and the two structural regularizers
// (diversity, population).

#include <cstddef>

#include "hgvt/tensor.hpp"

namespace hgvt {

inline constexpr double kNormEps = 1e-6;   // L2-normalization epsilon
inline constexpr double kMaskNegInf = -1e30;  // additive softmax mask value
inline constexpr double kDefaultAlpha = 4.0;  // adjacency sharpening factor

struct GraphDims {
  std::size_t n_image_vertices = 0;   // |iV|
  std::size_t n_virtual_vertices = 0; // |vV|
  std::size_t n_primary_edges = 0;    // |pE|
  std::size_t n_virtual_edges = 0;    // |vE|

  std::size_t vertices() const { return n_image_vertices + n_virtual_vertices; }
  std::size_t edges() const { return n_primary_edges + n_virtual_edges; }
};

// The four interleaved feature matrices, as tape handles. Vertex ordering is
// [iV then vV]; edge ordering is [pE then vE].
struct FeatureState {
  Var xv;      // |V| x d_f
  Var xe;      // |E| x d_f
  Var xv_adj;  // |V| x d_a
  Var xe_adj;  // |E| x d_a
};

// Soft membership matrix plus its thresholded binarization for one layer.
struct Adjacency {
  Tensor soft;  // |V| x |E|, entries in (0,1)
  Tensor hard;  // |V| x |E|, entries {0,1}; hard = [soft > 0.5], strict
  double alpha = kDefaultAlpha;
};

// A[i][j] = sigmoid(alpha * cos(Xv_adj[i], Xe_adj[j])), rows L2-normalized
// with eps. Differentiable w.r.t. both inputs.
Var form_soft_adjacency(Tape& t, Var xv_adj, Var xe_adj, double alpha = kDefaultAlpha,
                        double eps = kNormEps);

// Hard binarization, strict threshold at 0.5.
Tensor harden(const Tensor& soft);

// Additive |V| x |V| self-attention mask from the hard adjacency: pair (i,k)
// allowed iff they share a hyperedge or i == k (diagonal always allowed so an
// orphan vertex still attends to itself). Allowed -> 0, forbidden -> -1e30.
Tensor vertex_pair_mask(const Tensor& hard);

// Static |V| x |E| binary mask: 0 exactly on (image vertex, virtual hyperedge)
// pairs, 1 elsewhere.
Tensor hierarchy_mask(const GraphDims& dims);

// Additive form of the hierarchy mask (forbidden -> -1e30, allowed -> 0).
Tensor hierarchy_mask_additive(const GraphDims& dims);

// P_j = 2 * sum_i max(A[i][j] - 0.5, 0);
// loss = sum_j max(P_j - beta, 0) + max(gamma - P_j, 0).
// Computed over all columns unless primary_only is set.
Var population_loss(Tape& t, Var soft_adjacency, double beta, double gamma,
                    bool primary_only = false, std::size_t n_primary = 0);

// Per-column soft densities P_j as plain values (diagnostics).
std::vector<double> population_densities(const Tensor& soft);

// D_L(X) = 1/2 * sum_{i != j} |X~ X~^T|_{ij} with eps-guarded row normalization.
Var diversity_penalty(Tape& t, Var x, double eps = kNormEps);

// L_DIV over the four target matrices {X^(:vV), X^(:vV)_adj, X^E, X^E_adj}.
Var diversity_loss(Tape& t, const FeatureState& state, const GraphDims& dims,
                   double eps = kNormEps);

}  // namespace hgvt
