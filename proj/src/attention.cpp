#include "hgvt/attention.hpp"

#include <cmath>

namespace hgvt {

namespace {

// Shared multi-head core. q_in: nq x d_f, kv_in: nk x d_f. mod_a (optional)
// is the soft modulation matrix oriented nq x nk; add_mask (optional) is an
// additive nq x nk tensor.
Var multi_head(Tape& t, Var q_in, Var kv_in, const AttentionParams& p,
               std::size_t heads, const Tensor* add_mask, const Var* mod_a,
               Modulation modulation, bool scale_logits) {
  const std::size_t d_f = t.value(p.wq).cols();
  if (d_f % heads != 0)
    throw TensorError("attention: feature width " + std::to_string(d_f) +
                      " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t d_k = d_f / heads;

  Var q = matmul(t, q_in, p.wq);
  Var k = matmul(t, kv_in, p.wk);
  Var v = matmul(t, kv_in, p.wv);

  Var merged;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(t, q, h * d_k, (h + 1) * d_k);
    Var kh = slice_cols(t, k, h * d_k, (h + 1) * d_k);
    Var vh = slice_cols(t, v, h * d_k, (h + 1) * d_k);
    Var logits = matmul(t, qh, transpose(t, kh));
    if (scale_logits) logits = scalar_mul(t, logits, 1.0 / std::sqrt(double(d_k)));
    if (mod_a) {
      logits = (modulation == Modulation::modified)
                   ? modified_hadamard(t, logits, *mod_a)
                   : mul(t, logits, *mod_a);
    }
    Var attn = add_mask ? row_softmax_masked(t, logits, *add_mask)
                        : row_softmax(t, logits);
    Var out_h = matmul(t, attn, vh);
    merged = (h == 0) ? out_h : concat_cols(t, merged, out_h);
  }
  return matmul(t, merged, p.wo);
}

// Extra additive mask for the sparse inference path: forbid A <= 0.5.
Tensor threshold_mask(const Tensor& soft) {
  Tensor m = soft;
  for (double& v : m.data()) v = (v > 0.5) ? 0.0 : kMaskNegInf;
  return m;
}

Tensor combine_masks(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::max(out[i] + b[i], kMaskNegInf);
  return out;
}

}  // namespace

Var vertex_self_attention(Tape& t, Var xv, const Tensor& b_mask,
                          const AttentionParams& p, std::size_t heads,
                          bool scale_logits) {
  return multi_head(t, xv, xv, p, heads, &b_mask, nullptr,
                    Modulation::standard, scale_logits);
}

Var modified_hadamard(Tape& t, Var s, Var soft_a) {
  if (!t.value(s).same_shape(t.value(soft_a)))
    throw TensorError("modified_hadamard: shape mismatch " +
                      t.value(s).shape_str() + " vs " +
                      t.value(soft_a).shape_str());
  Var a_tilde = scalar_add(t, scalar_mul(t, soft_a, 2.0), -1.0);
  Var corr = clamp(
      t, scalar_add(t, add(t, sign(t, s), sign(t, a_tilde)), 1.0), -1.0, 1.0);
  return mul(t, stop_grad(t, corr), mul(t, s, a_tilde));
}

Var edge_aggregate_attention(Tape& t, Var xe, Var xv, Var soft_a,
                             const Tensor& hierarchy_additive,
                             const AttentionParams& p, const BlockConfig& cfg) {
  Var a_t = transpose(t, soft_a);  // |E| x |V|
  Tensor mask = hierarchy_additive;
  // Additive mask oriented edges x vertices.
  {
    Tensor mt({mask.cols(), mask.rows()});
    for (std::size_t i = 0; i < mask.rows(); ++i)
      for (std::size_t j = 0; j < mask.cols(); ++j) mt.at(j, i) = mask.at(i, j);
    mask = std::move(mt);
  }
  if (cfg.sparse_inference)
    mask = combine_masks(mask, threshold_mask(t.value(a_t)));
  return multi_head(t, xe, xv, p, cfg.heads, &mask, &a_t, cfg.modulation,
                    cfg.scale_logits);
}

Var edge_distribute_attention(Tape& t, Var xv, Var xe, Var soft_a,
                              const Tensor& hierarchy_additive,
                              const AttentionParams& p, const BlockConfig& cfg) {
  Tensor mask = hierarchy_additive;
  if (cfg.sparse_inference)
    mask = combine_masks(mask, threshold_mask(t.value(soft_a)));
  return multi_head(t, xv, xe, p, cfg.heads, &mask, &soft_a, cfg.modulation,
                    cfg.scale_logits);
}

FfnDelta dual_ffn(Tape& t, Var x, Var x_adj, const FfnParams& p) {
  Var in = concat_cols(t, x_adj, x);
  Var gate = gelu(t, add_rowvec(t, matmul(t, in, p.w_gate), p.b_gate));
  Var value = add_rowvec(t, matmul(t, in, p.w_value), p.b_value);
  Var hidden = mul(t, gate, value);
  const std::size_t d_f = t.value(x).cols();
  const std::size_t d_a = t.value(x_adj).cols();
  if (t.value(p.w_out_f).cols() != d_f || t.value(p.w_out_a).cols() != d_a)
    throw TensorError("dual_ffn: output head widths do not match inputs");
  return {add_rowvec(t, matmul(t, hidden, p.w_out_f), p.b_out_f),
          add_rowvec(t, matmul(t, hidden, p.w_out_a), p.b_out_a)};
}

namespace {

// Residual add with stochastic path drop: during training each branch is
// skipped with probability p and survivors are scaled by 1/(1-p).
Var residual(Tape& t, Var base, Var delta, const BlockConfig& cfg,
             std::mt19937_64* rng) {
  if (cfg.training && cfg.path_drop > 0.0 && rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(*rng) < cfg.path_drop) return base;
    delta = scalar_mul(t, delta, 1.0 / (1.0 - cfg.path_drop));
  }
  return add(t, base, delta);
}

}  // namespace

BlockOutput hgvt_block_forward(Tape& t, const FeatureState& state,
                               const BlockParams& p, const GraphDims& dims,
                               const BlockConfig& cfg, std::mt19937_64* rng) {
  FeatureState s = state;

  // (1) adjacency from the block's input adjacency features.
  Var xv_adj_n = rms_norm(t, s.xv_adj, p.ns_adj_v);
  Var xe_adj_n = rms_norm(t, s.xe_adj, p.ns_adj_e);
  Var soft_a = form_soft_adjacency(t, xv_adj_n, xe_adj_n, cfg.alpha);
  Adjacency adj;
  adj.soft = t.value(soft_a);
  adj.hard = harden(adj.soft);
  adj.alpha = cfg.alpha;

  Tensor hier = hierarchy_mask_additive(dims);

  // (2) vertex self-attention within shared hyperedges.
  Tensor b_mask = vertex_pair_mask(adj.hard);
  Var d_self = vertex_self_attention(t, rms_norm(t, s.xv, p.ns_self), b_mask,
                                     p.self_attn, cfg.heads, cfg.scale_logits);
  s.xv = residual(t, s.xv, d_self, cfg, rng);

  // (3) vertices -> edges.
  Var d_agg = edge_aggregate_attention(
      t, rms_norm(t, s.xe, p.ns_agg_q), rms_norm(t, s.xv, p.ns_agg_kv), soft_a,
      hier, p.aggregate, cfg);
  s.xe = residual(t, s.xe, d_agg, cfg, rng);

  // (4) edges -> vertices.
  Var d_dist = edge_distribute_attention(
      t, rms_norm(t, s.xv, p.ns_dist_q), rms_norm(t, s.xe, p.ns_dist_kv),
      soft_a, hier, p.distribute, cfg);
  s.xv = residual(t, s.xv, d_dist, cfg, rng);

  // (5) FFN on vertices, then edges.
  FfnDelta dv = dual_ffn(t, rms_norm(t, s.xv, p.ns_ffn_v_f),
                         rms_norm(t, s.xv_adj, p.ns_ffn_v_a), p.ffn_vertex);
  s.xv = residual(t, s.xv, dv.d_feature, cfg, rng);
  s.xv_adj = residual(t, s.xv_adj, dv.d_adjacency, cfg, rng);

  FfnDelta de = dual_ffn(t, rms_norm(t, s.xe, p.ns_ffn_e_f),
                         rms_norm(t, s.xe_adj, p.ns_ffn_e_a), p.ffn_edge);
  s.xe = residual(t, s.xe, de.d_feature, cfg, rng);
  s.xe_adj = residual(t, s.xe_adj, de.d_adjacency, cfg, rng);

  return {s, adj, soft_a};
}

Tensor sparse_vertex_self_attention(const Tensor& xv, const Tensor& hard,
                                    const Tensor& wq, const Tensor& wk,
                                    const Tensor& wv, const Tensor& wo,
                                    std::size_t heads) {
  const std::size_t n = xv.rows();
  const std::size_t d_f = wq.cols();
  const std::size_t d_k = d_f / heads;

  auto mm = [](const Tensor& a, const Tensor& b) {
    Tensor out({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t kk = 0; kk < a.cols(); ++kk) {
        double av = a.at(i, kk);
        for (std::size_t j = 0; j < b.cols(); ++j)
          out.at(i, j) += av * b.at(kk, j);
      }
    return out;
  };

  Tensor q = mm(xv, wq), k = mm(xv, wk), v = mm(xv, wv);

  // Neighbor sets from the hard adjacency (self always included).
  std::vector<std::vector<std::size_t>> nbrs(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      bool share = (i == j);
      for (std::size_t e = 0; !share && e < hard.cols(); ++e)
        share = hard.at(i, e) > 0 && hard.at(j, e) > 0;
      if (share) nbrs[i].push_back(j);
    }
  }

  Tensor merged({n, d_f});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& nb = nbrs[i];
      std::vector<double> logits(nb.size());
      double mx = -1e300;
      for (std::size_t a = 0; a < nb.size(); ++a) {
        double dot = 0;
        for (std::size_t c = 0; c < d_k; ++c)
          dot += q.at(i, h * d_k + c) * k.at(nb[a], h * d_k + c);
        logits[a] = dot;
        mx = std::max(mx, dot);
      }
      double z = 0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        z += l;
      }
      for (std::size_t a = 0; a < nb.size(); ++a)
        for (std::size_t c = 0; c < d_k; ++c)
          merged.at(i, h * d_k + c) += (logits[a] / z) * v.at(nb[a], h * d_k + c);
    }
  }
  return mm(merged, wo);
}

}  // namespace hgvt
