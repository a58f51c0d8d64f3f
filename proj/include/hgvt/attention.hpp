#pragma once

// The three attention pathways (vertex self-attention, edge aggregate, edge
// distribute), fuzzy logit modulation, the dual GeGLU FFN, and their assembly
// into one block. All forward math runs on a Tape; a plain-tensor gather
// implementation of sparse self-attention exists as an equivalence oracle.

#include <cstdint>
#include <random>

#include "hgvt/hypergraph.hpp"
#include "hgvt/tensor.hpp"

namespace hgvt {

enum class Modulation { standard, modified };

// Multi-head attention projections, all d_f x d_f.
struct AttentionParams {
  Var wq, wk, wv, wo;
};

// Gated FFN on concat(X_adj || X) with separate feature / adjacency output
// heads. w_gate, w_value: (d_a+d_f) x hidden; outputs hidden x d_f / d_a.
struct FfnParams {
  Var w_gate, b_gate;
  Var w_value, b_value;
  Var w_out_f, b_out_f;
  Var w_out_a, b_out_a;
};

struct BlockParams {
  AttentionParams self_attn;
  AttentionParams aggregate;   // edge queries over vertices
  AttentionParams distribute;  // vertex queries over edges
  FfnParams ffn_vertex;
  FfnParams ffn_edge;  // same Vars as ffn_vertex when the joint flag is set

  // RMS-norm affine scales per pre-norm site.
  Var ns_adj_v, ns_adj_e;        // d_a, adjacency formation inputs
  Var ns_self;                   // d_f, vertex self-attention input
  Var ns_agg_q, ns_agg_kv;       // d_f, edge-aggregate query / key-value
  Var ns_dist_q, ns_dist_kv;     // d_f, edge-distribute query / key-value
  Var ns_ffn_v_f, ns_ffn_v_a;    // FFN inputs, vertex set
  Var ns_ffn_e_f, ns_ffn_e_a;    // FFN inputs, edge set
};

struct BlockConfig {
  std::size_t heads = 2;
  double alpha = kDefaultAlpha;
  Modulation modulation = Modulation::modified;
  bool scale_logits = false;    // 1/sqrt(d_k); off by default
  bool sparse_inference = false;  // threshold A at 0.5 for edge attention
  double path_drop = 0.0;       // per-residual-branch drop probability
  bool training = false;
};

// Multi-head attention with additive mask B; logits are unscaled unless
// scale_logits. Returns the residual delta (already through W_O).
Var vertex_self_attention(Tape& t, Var xv, const Tensor& b_mask,
                          const AttentionParams& p, std::size_t heads,
                          bool scale_logits = false);

// clamp(sign(S) + sign(2A-1) + 1, -1, 1) ∘ (S ∘ (2A-1)); the clamp factor
// carries no gradient.
Var modified_hadamard(Tape& t, Var s, Var soft_a);

// Queries from edges, keys/values from vertices; logits modulated by A^T and
// additively masked by the hierarchy mask (and the thresholded adjacency on
// the sparse inference path).
Var edge_aggregate_attention(Tape& t, Var xe, Var xv, Var soft_a,
                             const Tensor& hierarchy_additive,
                             const AttentionParams& p, const BlockConfig& cfg);

// Mirror image: queries from vertices, keys/values from edges, modulation by A.
Var edge_distribute_attention(Tape& t, Var xv, Var xe, Var soft_a,
                              const Tensor& hierarchy_additive,
                              const AttentionParams& p, const BlockConfig& cfg);

struct FfnDelta {
  Var d_feature;
  Var d_adjacency;
};

// GeGLU on concat(X_adj || X): gelu(in Wg + bg) ∘ (in Wv + bv) -> two heads.
FfnDelta dual_ffn(Tape& t, Var x, Var x_adj, const FfnParams& p);

struct BlockOutput {
  FeatureState state;
  Adjacency adjacency;  // formed from the block's INPUT adjacency features
  Var soft_a;           // tape handle for the soft adjacency (for loss terms)
};

// One full block: adjacency formation, self-attention, aggregate, distribute,
// vertex FFN, edge FFN; every sub-step is pre-norm residual. rng drives
// stochastic path drop and may be null (no drop).
BlockOutput hgvt_block_forward(Tape& t, const FeatureState& state,
                               const BlockParams& p, const GraphDims& dims,
                               const BlockConfig& cfg,
                               std::mt19937_64* rng = nullptr);

// Plain-tensor gather-based sparse self-attention: per vertex, attends only
// over vertices sharing a hyperedge (plus itself). Oracle for the masked
// dense path.
Tensor sparse_vertex_self_attention(const Tensor& xv, const Tensor& hard,
                                    const Tensor& wq, const Tensor& wk,
                                    const Tensor& wv, const Tensor& wo,
                                    std::size_t heads);

}  // namespace hgvt
