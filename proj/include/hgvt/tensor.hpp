#pragma once

// Dense f64 tensors with reverse-mode automatic differentiation on a
// define-by-run tape. Everything differentiable in the model is built on
// these primitives; a finite-difference verifier lives alongside so any
// expression can be checked against central differences.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace hgvt {

struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, double v);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor row(std::vector<double> values);
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;
  bool all_finite() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

// Handle to a node on a tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

// Reverse-mode tape. Rebuilt per forward pass; single-threaded per tape,
// distinct tapes are independent. Node values are immutable once recorded.
class Tape {
 public:
  Var input(Tensor value, std::string name = "input");
  Var constant(Tensor value, std::string name = "const");

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& grad(Var v) const;
  std::size_t num_nodes() const { return nodes_.size(); }
  const std::string& name(Var v) const { return nodes_[v.id].name; }

  // Seeds the output node and propagates gradients to every input.
  void backward(Var output, Tensor seed);
  // Convenience for scalar outputs: seed = 1.
  void backward(Var output);

  // --- internal use by op implementations ---
  using BackwardFn = std::function<void(Tape&)>;
  Var record(Tensor value, std::string name, BackwardFn fn, bool differentiable = true);
  void set_backward(Var v, BackwardFn fn) { nodes_[v.id].backward = std::move(fn); }
  Tensor& grad_buffer(Var v);
  bool wants_grad(Var v) const { return nodes_[v.id].differentiable; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool grad_set = false;
    bool differentiable = true;
    std::string name;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---- primitives -----------------------------------------------------------
// All ops validate shapes (throwing TensorError naming the primitive and the
// offending shapes) and reject non-finite outputs naming the node.

Var matmul(Tape& t, Var a, Var b);
Var transpose(Tape& t, Var a);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);  // elementwise, same shape
Var scalar_mul(Tape& t, Var a, double s);
Var scalar_add(Tape& t, Var a, double s);
Var add_rowvec(Tape& t, Var a, Var bias);  // bias broadcast over rows

Var sigmoid(Tape& t, Var a);
Var exp_op(Tape& t, Var a);
Var log_op(Tape& t, Var a);
Var gelu(Tape& t, Var a);
Var silu(Tape& t, Var a);
Var abs_op(Tape& t, Var a);
Var clamp(Tape& t, Var a, double lo, double hi);
Var sign(Tape& t, Var a);        // gradient-stopped by construction
Var stop_grad(Tape& t, Var a);
Var relu(Tape& t, Var a);

// Row softmax with optional additive mask (same shape as a). The mask is a
// plain tensor, it never carries gradient.
Var row_softmax(Tape& t, Var a);
Var row_softmax_masked(Tape& t, Var a, const Tensor& mask);
Var log_row_softmax(Tape& t, Var a);

// RMS norm per row, optional affine scale (length = cols).
Var rms_norm(Tape& t, Var a);
Var rms_norm(Tape& t, Var a, Var scale);
Var l2_row_normalize(Tape& t, Var a, double eps);

Var concat_cols(Tape& t, Var a, Var b);
Var slice_rows(Tape& t, Var a, std::size_t r0, std::size_t r1);  // [r0, r1)
Var slice_cols(Tape& t, Var a, std::size_t c0, std::size_t c1);

Var sum_all(Tape& t, Var a);   // -> scalar {1}
Var mean_all(Tape& t, Var a);  // -> scalar {1}
Var max_all(Tape& t, Var a);   // -> scalar {1}; grad to first argmax
Var mean_rows(Tape& t, Var a); // column means -> {1, cols}
Var sum_rows(Tape& t, Var a);  // column sums  -> {1, cols}

// 2-D convolution on a {C,H,W} tensor with a {Co,Ci,k,k} kernel, stride s,
// "same-ish" padding p. Output {Co,Ho,Wo}.
Var conv2d(Tape& t, Var x, Var w, std::size_t stride, std::size_t pad);

// Layout permutations between a {C,H,W} feature map and a {H*W, C} matrix
// (row-major over spatial positions). Exact inverses of each other.
Var chw_to_rows(Tape& t, Var x);
Var rows_to_chw(Tape& t, Var x, std::size_t h, std::size_t w);

// ---- finite-difference verifier -------------------------------------------

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_coord = 0;
  bool pass = false;
};

// Builds the scalar expression from fresh input Vars; point supplies values.
using ScalarExpr = std::function<Var(Tape&, const std::vector<Var>&)>;

FdReport finite_diff_check(const ScalarExpr& f, const std::vector<Tensor>& point,
                           double step = 1e-5, double tol = 1e-4);

// Same check restricted to at most max_coords randomly chosen coordinates per
// input (seeded); used when the point is a full parameter set.
FdReport finite_diff_check_sampled(const ScalarExpr& f, const std::vector<Tensor>& point,
                                   std::size_t max_coords, std::uint64_t seed,
                                   double step = 1e-5, double tol = 1e-4);

}  // namespace hgvt
