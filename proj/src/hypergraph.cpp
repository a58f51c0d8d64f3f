#include "hgvt/hypergraph.hpp"

#include <cmath>
#include <stdexcept>

namespace hgvt {

Var form_soft_adjacency(Tape& t, Var xv_adj, Var xe_adj, double alpha, double eps) {
  // cos(x_i, e_j) on eps-guarded unit rows is just the row-normalized inner
  // product, so the whole map is sigmoid(alpha * Xn En^T).
  Var xn = l2_row_normalize(t, xv_adj, eps);
  Var en = l2_row_normalize(t, xe_adj, eps);
  Var cos = matmul(t, xn, transpose(t, en));
  return sigmoid(t, scalar_mul(t, cos, alpha));
}

Tensor harden(const Tensor& soft) {
  Tensor hard = soft;
  for (double& v : hard.data()) v = (v > 0.5) ? 1.0 : 0.0;
  return hard;
}

Tensor vertex_pair_mask(const Tensor& hard) {
  const std::size_t n = hard.rows();
  const std::size_t m = hard.cols();
  Tensor mask({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      bool allowed = (i == k);
      for (std::size_t j = 0; !allowed && j < m; ++j)
        allowed = hard.at(i, j) > 0.0 && hard.at(k, j) > 0.0;
      mask.at(i, k) = allowed ? 0.0 : kMaskNegInf;
    }
  }
  return mask;
}

Tensor hierarchy_mask(const GraphDims& dims) {
  Tensor mask({dims.vertices(), dims.edges()});
  for (std::size_t i = 0; i < dims.vertices(); ++i)
    for (std::size_t j = 0; j < dims.edges(); ++j) {
      bool forbidden = i < dims.n_image_vertices && j >= dims.n_primary_edges;
      mask.at(i, j) = forbidden ? 0.0 : 1.0;
    }
  return mask;
}

Tensor hierarchy_mask_additive(const GraphDims& dims) {
  Tensor mask = hierarchy_mask(dims);
  for (double& v : mask.data()) v = (v > 0.0) ? 0.0 : kMaskNegInf;
  return mask;
}

Var population_loss(Tape& t, Var soft_adjacency, double beta, double gamma,
                    bool primary_only, std::size_t n_primary) {
  if (beta <= gamma)
    throw TensorError("population_loss: beta must exceed gamma");
  Var a = soft_adjacency;
  if (primary_only) a = slice_cols(t, a, 0, n_primary);
  // P_j = 2 sum_i max(A_ij - 0.5, 0), via relu.
  Var shifted = relu(t, scalar_add(t, a, -0.5));
  Var p = scalar_mul(t, sum_rows(t, shifted), 2.0);
  // p is 1 x |E|; hinge on both sides.
  Var over = relu(t, scalar_add(t, p, -beta));
  Var under = relu(t, scalar_mul(t, scalar_add(t, p, -gamma), -1.0));
  return sum_all(t, add(t, over, under));
}

std::vector<double> population_densities(const Tensor& soft) {
  std::vector<double> p(soft.cols(), 0.0);
  for (std::size_t j = 0; j < soft.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < soft.rows(); ++i)
      s += std::max(soft.at(i, j) - 0.5, 0.0);
    p[j] = 2.0 * s;
  }
  return p;
}

Var diversity_penalty(Tape& t, Var x, double eps) {
  Var xn = l2_row_normalize(t, x, eps);
  Var gram = matmul(t, xn, transpose(t, xn));
  Var absg = abs_op(t, gram);
  // Subtract the diagonal (|cos(x,x)| = squared norm ratio; exactly the
  // diagonal entries of |gram|), keeping only i != j terms.
  const Tensor& g = t.value(gram);
  Tensor diag_mask({g.rows(), g.cols()});
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j)
      diag_mask.at(i, j) = (i == j) ? 0.0 : 1.0;
  Var off = mul(t, absg, t.constant(diag_mask, "diag_mask"));
  return scalar_mul(t, sum_all(t, off), 0.5);
}

Var diversity_loss(Tape& t, const FeatureState& state, const GraphDims& dims,
                   double eps) {
  Var xv_virt = slice_rows(t, state.xv, dims.n_image_vertices, dims.vertices());
  Var xv_adj_virt =
      slice_rows(t, state.xv_adj, dims.n_image_vertices, dims.vertices());
  Var total = diversity_penalty(t, xv_virt, eps);
  total = add(t, total, diversity_penalty(t, xv_adj_virt, eps));
  total = add(t, total, diversity_penalty(t, state.xe, eps));
  total = add(t, total, diversity_penalty(t, state.xe_adj, eps));
  return total;
}

}  // namespace hgvt
