#include "hgvt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace hgvt {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

[[noreturn]] void shape_fail(const std::string& op, const Tensor& a, const Tensor& b) {
  throw TensorError(op + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

void require_2d(const std::string& op, const Tensor& a) {
  if (a.ndim() != 2) throw TensorError(op + ": expected 2-D tensor, got " + a.shape_str());
}

void check_finite(const std::string& op, const Tensor& v) {
  if (!v.all_finite()) throw TensorError(op + ": produced non-finite value");
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {
  for (std::size_t d : shape_)
    if (d == 0) throw TensorError("Tensor: zero dimension in " + shape_str());
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_product(shape_))
    throw TensorError("Tensor: values length " + std::to_string(data_.size()) +
                      " != product of shape " + shape_str());
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

Tensor Tensor::row(std::vector<double> values) {
  std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t r, std::size_t c, std::vector<double> values) {
  return Tensor({r, c}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (shape_.size() != 2) throw TensorError("rows(): tensor is not 2-D: " + shape_str());
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() != 2) throw TensorError("cols(): tensor is not 2-D: " + shape_str());
  return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

// ---- Tape ------------------------------------------------------------------

Var Tape::input(Tensor value, std::string name) {
  nodes_.push_back(Node{std::move(value), Tensor{}, false, true, std::move(name), nullptr});
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Tensor value, std::string name) {
  nodes_.push_back(Node{std::move(value), Tensor{}, false, false, std::move(name), nullptr});
  return Var{nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::string name, BackwardFn fn, bool differentiable) {
  check_finite(name, value);
  nodes_.push_back(Node{std::move(value), Tensor{}, false, differentiable, std::move(name), std::move(fn)});
  return Var{nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (!n.grad_set) {
    n.grad = Tensor(n.value.shape());
    n.grad_set = true;
  }
  return n.grad;
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (!n.grad_set) {
    static thread_local Tensor empty;
    empty = Tensor(n.value.shape());
    return empty;
  }
  return n.grad;
}

void Tape::backward(Var output, Tensor seed) {
  const Node& out = nodes_[output.id];
  if (!seed.same_shape(out.value))
    throw TensorError("backward: seed shape " + seed.shape_str() + " != output shape " +
                      out.value.shape_str());
  grad_buffer(output) = std::move(seed);
  for (std::size_t i = output.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad_set) n.backward(*this);
  }
}

void Tape::backward(Var output) {
  if (nodes_[output.id].value.size() != 1)
    throw TensorError("backward: default seed requires scalar output, got " +
                      nodes_[output.id].value.shape_str());
  backward(output, Tensor::full(nodes_[output.id].value.shape(), 1.0));
}

// ---- op implementations ------------------------------------------------------

namespace {

Var make_op(Tape& t, Tensor value, const std::string& name,
            std::function<void(Tape&, Var)> fn) {
  Var out = t.record(std::move(value), name, nullptr);
  t.set_backward(out, [out, fn = std::move(fn)](Tape& tp) { fn(tp, out); });
  return out;
}

void accumulate(Tape& t, Var target, const Tensor& delta) {
  if (!t.wants_grad(target)) return;
  Tensor& g = t.grad_buffer(target);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

Var pointwise(Tape& t, Var a, const std::string& name, double (*f)(double),
              double (*df)(double)) {
  const Tensor& x = t.value(a);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_op(t, std::move(y), name, [a, df](Tape& tp, Var out) {
    const Tensor& x = tp.value(a);
    const Tensor& gy = tp.grad(out);
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] = gy[i] * df(x[i]);
    accumulate(tp, a, gx);
  });
}

double sigmoid_f(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double sigmoid_df(double x) {
  double s = sigmoid_f(x);
  return s * (1.0 - s);
}
double gelu_f(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
double gelu_df(double x) {
  double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * phi;
}
double silu_f(double x) { return x * sigmoid_f(x); }
double silu_df(double x) {
  double s = sigmoid_f(x);
  return s + x * s * (1.0 - s);
}
double exp_df(double x) { return std::exp(x); }
double log_f(double x) { return std::log(x); }
double log_df(double x) { return 1.0 / x; }
double relu_f(double x) { return x > 0.0 ? x : 0.0; }
double relu_df(double x) { return x > 0.0 ? 1.0 : 0.0; }
double abs_df(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require_2d("matmul", A);
  require_2d("matmul", B);
  if (A.cols() != B.rows()) shape_fail("matmul", A, B);
  std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      double av = A.data()[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B.data()[p * n];
      double* crow = &C.data()[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  check_finite("matmul", C);
  return make_op(t, std::move(C), "matmul", [a, b](Tape& tp, Var out) {
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    const Tensor& gC = tp.grad(out);
    std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    if (tp.wants_grad(a)) {
      Tensor gA({m, k});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += gC.data()[i * n + j] * B.data()[p * n + j];
          gA.data()[i * k + p] = s;
        }
      accumulate(tp, a, gA);
    }
    if (tp.wants_grad(b)) {
      Tensor gB({k, n});
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t i = 0; i < m; ++i) {
          double av = A.data()[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gB.data()[p * n + j] += av * gC.data()[i * n + j];
        }
      accumulate(tp, b, gB);
    }
  });
}

Var transpose(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  require_2d("transpose", A);
  std::size_t m = A.rows(), n = A.cols();
  Tensor T({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) T.data()[j * m + i] = A.data()[i * n + j];
  return make_op(t, std::move(T), "transpose", [a, m, n](Tape& tp, Var out) {
    const Tensor& gT = tp.grad(out);
    Tensor gA({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gA.data()[i * n + j] = gT.data()[j * m + i];
    accumulate(tp, a, gA);
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (!A.same_shape(B)) shape_fail("add", A, B);
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] + B[i];
  check_finite("add", C);
  return make_op(t, std::move(C), "add", [a, b](Tape& tp, Var out) {
    accumulate(tp, a, tp.grad(out));
    accumulate(tp, b, tp.grad(out));
  });
}

Var sub(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (!A.same_shape(B)) shape_fail("sub", A, B);
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] - B[i];
  check_finite("sub", C);
  return make_op(t, std::move(C), "sub", [a, b](Tape& tp, Var out) {
    const Tensor& g = tp.grad(out);
    accumulate(tp, a, g);
    if (tp.wants_grad(b)) {
      Tensor neg(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
      accumulate(tp, b, neg);
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (!A.same_shape(B)) shape_fail("mul", A, B);
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] * B[i];
  check_finite("mul", C);
  return make_op(t, std::move(C), "mul", [a, b](Tape& tp, Var out) {
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    const Tensor& g = tp.grad(out);
    if (tp.wants_grad(a)) {
      Tensor ga(A.shape());
      for (std::size_t i = 0; i < A.size(); ++i) ga[i] = g[i] * B[i];
      accumulate(tp, a, ga);
    }
    if (tp.wants_grad(b)) {
      Tensor gb(B.shape());
      for (std::size_t i = 0; i < B.size(); ++i) gb[i] = g[i] * A[i];
      accumulate(tp, b, gb);
    }
  });
}

Var scalar_mul(Tape& t, Var a, double s) {
  const Tensor& A = t.value(a);
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] * s;
  check_finite("scalar_mul", C);
  return make_op(t, std::move(C), "scalar_mul", [a, s](Tape& tp, Var out) {
    const Tensor& g = tp.grad(out);
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * s;
    accumulate(tp, a, ga);
  });
}

Var scalar_add(Tape& t, Var a, double s) {
  const Tensor& A = t.value(a);
  Tensor C(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) C[i] = A[i] + s;
  check_finite("scalar_add", C);
  return make_op(t, std::move(C), "scalar_add",
                 [a](Tape& tp, Var out) { accumulate(tp, a, tp.grad(out)); });
}

Var add_rowvec(Tape& t, Var a, Var bias) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(bias);
  require_2d("add_rowvec", A);
  if (B.size() != A.cols()) shape_fail("add_rowvec", A, B);
  Tensor C(A.shape());
  std::size_t n = A.cols();
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) C.data()[i * n + j] = A.data()[i * n + j] + B[j];
  check_finite("add_rowvec", C);
  return make_op(t, std::move(C), "add_rowvec", [a, bias](Tape& tp, Var out) {
    const Tensor& g = tp.grad(out);
    accumulate(tp, a, g);
    if (tp.wants_grad(bias)) {
      const Tensor& B = tp.value(bias);
      Tensor gb(B.shape());
      std::size_t n = tp.value(a).cols();
      for (std::size_t i = 0; i < tp.value(a).rows(); ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g.data()[i * n + j];
      accumulate(tp, bias, gb);
    }
  });
}

Var sigmoid(Tape& t, Var a) { return pointwise(t, a, "sigmoid", sigmoid_f, sigmoid_df); }
Var exp_op(Tape& t, Var a) { return pointwise(t, a, "exp", std::exp, exp_df); }
Var log_op(Tape& t, Var a) { return pointwise(t, a, "log", log_f, log_df); }
Var gelu(Tape& t, Var a) { return pointwise(t, a, "gelu", gelu_f, gelu_df); }
Var silu(Tape& t, Var a) { return pointwise(t, a, "silu", silu_f, silu_df); }
Var relu(Tape& t, Var a) { return pointwise(t, a, "relu", relu_f, relu_df); }
Var abs_op(Tape& t, Var a) { return pointwise(t, a, "abs", std::fabs, abs_df); }

Var clamp(Tape& t, Var a, double lo, double hi) {
  const Tensor& x = t.value(a);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::min(hi, std::max(lo, x[i]));
  return make_op(t, std::move(y), "clamp", [a, lo, hi](Tape& tp, Var out) {
    const Tensor& x = tp.value(a);
    const Tensor& g = tp.grad(out);
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
      gx[i] = (x[i] > lo && x[i] < hi) ? g[i] : 0.0;
    accumulate(tp, a, gx);
  });
}

Var sign(Tape& t, Var a) {
  const Tensor& x = t.value(a);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] > 0.0) ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
  // Zero gradient everywhere: explicit gradient stop.
  return t.record(std::move(y), "sign", nullptr, false);
}

Var stop_grad(Tape& t, Var a) {
  return t.record(t.value(a), "stop_grad", nullptr, false);
}

namespace {

Var softmax_impl(Tape& t, Var a, const Tensor* mask, const std::string& name) {
  const Tensor& x = t.value(a);
  require_2d(name, x);
  if (mask && !mask->same_shape(x)) shape_fail(name, x, *mask);
  std::size_t m = x.rows(), n = x.cols();
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double v = x.data()[i * n + j] + (mask ? mask->data()[i * n + j] : 0.0);
      mx = std::max(mx, v);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double v = x.data()[i * n + j] + (mask ? mask->data()[i * n + j] : 0.0);
      double e = std::exp(v - mx);
      y.data()[i * n + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) y.data()[i * n + j] /= z;
  }
  check_finite(name, y);
  return make_op(t, std::move(y), name, [a](Tape& tp, Var out) {
    const Tensor& y = tp.value(out);
    const Tensor& g = tp.grad(out);
    std::size_t m = y.rows(), n = y.cols();
    Tensor gx({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g.data()[i * n + j] * y.data()[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx.data()[i * n + j] = y.data()[i * n + j] * (g.data()[i * n + j] - dot);
    }
    accumulate(tp, a, gx);
  });
}

}  // namespace

Var row_softmax(Tape& t, Var a) { return softmax_impl(t, a, nullptr, "row_softmax"); }
Var row_softmax_masked(Tape& t, Var a, const Tensor& mask) {
  return softmax_impl(t, a, &mask, "row_softmax_masked");
}

Var log_row_softmax(Tape& t, Var a) {
  const Tensor& x = t.value(a);
  require_2d("log_row_softmax", x);
  std::size_t m = x.rows(), n = x.cols();
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mx = *std::max_element(x.data().begin() + i * n, x.data().begin() + (i + 1) * n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x.data()[i * n + j] - mx);
    double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) y.data()[i * n + j] = x.data()[i * n + j] - lz;
  }
  check_finite("log_row_softmax", y);
  return make_op(t, std::move(y), "log_row_softmax", [a](Tape& tp, Var out) {
    const Tensor& y = tp.value(out);
    const Tensor& g = tp.grad(out);
    std::size_t m = y.rows(), n = y.cols();
    Tensor gx({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += g.data()[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx.data()[i * n + j] = g.data()[i * n + j] - std::exp(y.data()[i * n + j]) * gsum;
    }
    accumulate(tp, a, gx);
  });
}

namespace {
constexpr double kRmsEps = 1e-12;
}

Var rms_norm(Tape& t, Var a) {
  const Tensor& x = t.value(a);
  require_2d("rms_norm", x);
  std::size_t m = x.rows(), n = x.cols();
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < n; ++j) ms += x.data()[i * n + j] * x.data()[i * n + j];
    ms = ms / static_cast<double>(n) + kRmsEps;
    double inv = 1.0 / std::sqrt(ms);
    for (std::size_t j = 0; j < n; ++j) y.data()[i * n + j] = x.data()[i * n + j] * inv;
  }
  check_finite("rms_norm", y);
  return make_op(t, std::move(y), "rms_norm", [a](Tape& tp, Var out) {
    const Tensor& x = tp.value(a);
    const Tensor& g = tp.grad(out);
    std::size_t m = x.rows(), n = x.cols();
    Tensor gx({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      double ms = 0.0, dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) ms += x.data()[i * n + j] * x.data()[i * n + j];
      ms = ms / static_cast<double>(n) + kRmsEps;
      double inv = 1.0 / std::sqrt(ms);
      for (std::size_t j = 0; j < n; ++j) dot += g.data()[i * n + j] * x.data()[i * n + j];
      double corr = dot * inv * inv * inv / static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j)
        gx.data()[i * n + j] = g.data()[i * n + j] * inv - corr * x.data()[i * n + j];
    }
    accumulate(tp, a, gx);
  });
}

Var rms_norm(Tape& t, Var a, Var scale) {
  Var normed = rms_norm(t, a);
  const Tensor& s = t.value(scale);
  const Tensor& y = t.value(normed);
  if (s.size() != y.cols())
    throw TensorError("rms_norm: scale length " + std::to_string(s.size()) + " != cols " +
                      std::to_string(y.cols()));
  Tensor out(y.shape());
  std::size_t n = y.cols();
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[i * n + j] = y.data()[i * n + j] * s[j];
  check_finite("rms_norm_affine", out);
  return make_op(t, std::move(out), "rms_norm_affine", [normed, scale](Tape& tp, Var o) {
    const Tensor& y = tp.value(normed);
    const Tensor& s = tp.value(scale);
    const Tensor& g = tp.grad(o);
    std::size_t n = y.cols();
    if (tp.wants_grad(normed)) {
      Tensor gy(y.shape());
      for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < n; ++j) gy.data()[i * n + j] = g.data()[i * n + j] * s[j];
      accumulate(tp, normed, gy);
    }
    if (tp.wants_grad(scale)) {
      Tensor gs(s.shape());
      for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < n; ++j) gs[j] += g.data()[i * n + j] * y.data()[i * n + j];
      accumulate(tp, scale, gs);
    }
  });
}

Var l2_row_normalize(Tape& t, Var a, double eps) {
  const Tensor& x = t.value(a);
  require_2d("l2_row_normalize", x);
  std::size_t m = x.rows(), n = x.cols();
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < n; ++j) r += x.data()[i * n + j] * x.data()[i * n + j];
    r = std::sqrt(r);
    double inv = 1.0 / (r + eps);
    for (std::size_t j = 0; j < n; ++j) y.data()[i * n + j] = x.data()[i * n + j] * inv;
  }
  check_finite("l2_row_normalize", y);
  return make_op(t, std::move(y), "l2_row_normalize", [a, eps](Tape& tp, Var out) {
    const Tensor& x = tp.value(a);
    const Tensor& g = tp.grad(out);
    std::size_t m = x.rows(), n = x.cols();
    Tensor gx({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      double r2 = 0.0, dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) r2 += x.data()[i * n + j] * x.data()[i * n + j];
      double r = std::sqrt(r2);
      double s = r + eps;
      for (std::size_t j = 0; j < n; ++j) dot += g.data()[i * n + j] * x.data()[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        double term = g.data()[i * n + j] / s;
        if (r > 0.0) term -= x.data()[i * n + j] * dot / (r * s * s);
        gx.data()[i * n + j] = term;
      }
    }
    accumulate(tp, a, gx);
  });
}

Var concat_cols(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require_2d("concat_cols", A);
  require_2d("concat_cols", B);
  if (A.rows() != B.rows()) shape_fail("concat_cols", A, B);
  std::size_t m = A.rows(), na = A.cols(), nb = B.cols();
  Tensor C({m, na + nb});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < na; ++j) C.data()[i * (na + nb) + j] = A.data()[i * na + j];
    for (std::size_t j = 0; j < nb; ++j) C.data()[i * (na + nb) + na + j] = B.data()[i * nb + j];
  }
  return make_op(t, std::move(C), "concat_cols", [a, b, na, nb](Tape& tp, Var out) {
    const Tensor& g = tp.grad(out);
    std::size_t m = g.rows();
    if (tp.wants_grad(a)) {
      Tensor ga({m, na});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < na; ++j) ga.data()[i * na + j] = g.data()[i * (na + nb) + j];
      accumulate(tp, a, ga);
    }
    if (tp.wants_grad(b)) {
      Tensor gb({m, nb});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nb; ++j)
          gb.data()[i * nb + j] = g.data()[i * (na + nb) + na + j];
      accumulate(tp, b, gb);
    }
  });
}

Var slice_rows(Tape& t, Var a, std::size_t r0, std::size_t r1) {
  const Tensor& A = t.value(a);
  require_2d("slice_rows", A);
  if (r0 >= r1 || r1 > A.rows())
    throw TensorError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                      ") out of bounds for " + A.shape_str());
  std::size_t n = A.cols();
  Tensor Y({r1 - r0, n});
  std::copy(A.data().begin() + r0 * n, A.data().begin() + r1 * n, Y.data().begin());
  return make_op(t, std::move(Y), "slice_rows", [a, r0, r1, n](Tape& tp, Var out) {
    const Tensor& g = tp.grad(out);
    if (!tp.wants_grad(a)) return;
    Tensor ga(tp.value(a).shape());
    std::copy(g.data().begin(), g.data().end(), ga.data().begin() + r0 * n);
    (void)r1;
    accumulate(tp, a, ga);
  });
}

Var slice_cols(Tape& t, Var a, std::size_t c0, std::size_t c1) {
  const Tensor& A = t.value(a);
  require_2d("slice_cols", A);
  if (c0 >= c1 || c1 > A.cols())
    throw TensorError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                      ") out of bounds for " + A.shape_str());
  std::size_t m = A.rows(), n = A.cols(), w = c1 - c0;
  Tensor Y({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) Y.data()[i * w + j] = A.data()[i * n + c0 + j];
  return make_op(t, std::move(Y), "slice_cols", [a, c0, w, n](Tape& tp, Var out) {
    const Tensor& g = tp.grad(out);
    if (!tp.wants_grad(a)) return;
    Tensor ga(tp.value(a).shape());
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < w; ++j) ga.data()[i * n + c0 + j] = g.data()[i * w + j];
    accumulate(tp, a, ga);
  });
}

Var sum_all(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  double s = std::accumulate(A.data().begin(), A.data().end(), 0.0);
  if (!std::isfinite(s)) throw TensorError("sum_all: produced non-finite value");
  return make_op(t, Tensor::scalar(s), "sum_all", [a](Tape& tp, Var out) {
    double g = tp.grad(out)[0];
    Tensor ga = Tensor::full(tp.value(a).shape(), g);
    accumulate(tp, a, ga);
  });
}

Var mean_all(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  double n = static_cast<double>(A.size());
  double s = std::accumulate(A.data().begin(), A.data().end(), 0.0) / n;
  if (!std::isfinite(s)) throw TensorError("mean_all: produced non-finite value");
  return make_op(t, Tensor::scalar(s), "mean_all", [a, n](Tape& tp, Var out) {
    double g = tp.grad(out)[0] / n;
    Tensor ga = Tensor::full(tp.value(a).shape(), g);
    accumulate(tp, a, ga);
  });
}

Var max_all(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  std::size_t arg = 0;
  for (std::size_t i = 1; i < A.size(); ++i)
    if (A[i] > A[arg]) arg = i;
  return make_op(t, Tensor::scalar(A[arg]), "max_all", [a, arg](Tape& tp, Var out) {
    if (!tp.wants_grad(a)) return;
    Tensor ga(tp.value(a).shape());
    ga[arg] = tp.grad(out)[0];
    accumulate(tp, a, ga);
  });
}

Var mean_rows(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  require_2d("mean_rows", A);
  std::size_t m = A.rows(), n = A.cols();
  Tensor y({1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j] += A.data()[i * n + j];
  for (std::size_t j = 0; j < n; ++j) y[j] /= static_cast<double>(m);
  check_finite("mean_rows", y);
  return make_op(t, std::move(y), "mean_rows", [a, m, n](Tape& tp, Var out) {
    const Tensor& g = tp.grad(out);
    Tensor ga({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga.data()[i * n + j] = g[j] / static_cast<double>(m);
    accumulate(tp, a, ga);
  });
}

Var sum_rows(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  require_2d("sum_rows", A);
  std::size_t m = A.rows(), n = A.cols();
  Tensor y({1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j] += A.data()[i * n + j];
  check_finite("sum_rows", y);
  return make_op(t, std::move(y), "sum_rows", [a, m, n](Tape& tp, Var out) {
    const Tensor& g = tp.grad(out);
    Tensor ga({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga.data()[i * n + j] = g[j];
    accumulate(tp, a, ga);
  });
}

Var conv2d(Tape& t, Var x, Var w, std::size_t stride, std::size_t pad) {
  const Tensor& X = t.value(x);
  const Tensor& W = t.value(w);
  if (X.ndim() != 3) throw TensorError("conv2d: input must be {C,H,W}, got " + X.shape_str());
  if (W.ndim() != 4) throw TensorError("conv2d: kernel must be {Co,Ci,k,k}, got " + W.shape_str());
  std::size_t ci = X.shape()[0], h = X.shape()[1], wd = X.shape()[2];
  std::size_t co = W.shape()[0], wci = W.shape()[1], k = W.shape()[2];
  if (wci != ci || W.shape()[3] != k) shape_fail("conv2d", X, W);
  std::size_t ho = (h + 2 * pad - k) / stride + 1;
  std::size_t wo = (wd + 2 * pad - k) / stride + 1;
  Tensor Y({co, ho, wo});
  auto xat = [&](std::size_t c, long i, long j) -> double {
    if (i < 0 || j < 0 || i >= static_cast<long>(h) || j >= static_cast<long>(wd)) return 0.0;
    return X.data()[(c * h + i) * wd + j];
  };
  for (std::size_t oc = 0; oc < co; ++oc)
    for (std::size_t oi = 0; oi < ho; ++oi)
      for (std::size_t oj = 0; oj < wo; ++oj) {
        double s = 0.0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ki = 0; ki < k; ++ki)
            for (std::size_t kj = 0; kj < k; ++kj)
              s += W.data()[((oc * ci + c) * k + ki) * k + kj] *
                   xat(c, static_cast<long>(oi * stride + ki) - static_cast<long>(pad),
                       static_cast<long>(oj * stride + kj) - static_cast<long>(pad));
        Y.data()[(oc * ho + oi) * wo + oj] = s;
      }
  check_finite("conv2d", Y);
  return make_op(t, std::move(Y), "conv2d", [x, w, stride, pad](Tape& tp, Var out) {
    const Tensor& X = tp.value(x);
    const Tensor& W = tp.value(w);
    const Tensor& G = tp.grad(out);
    std::size_t ci = X.shape()[0], h = X.shape()[1], wd = X.shape()[2];
    std::size_t co = W.shape()[0], k = W.shape()[2];
    std::size_t ho = G.shape()[1], wo = G.shape()[2];
    Tensor gX(X.shape());
    Tensor gW(W.shape());
    for (std::size_t oc = 0; oc < co; ++oc)
      for (std::size_t oi = 0; oi < ho; ++oi)
        for (std::size_t oj = 0; oj < wo; ++oj) {
          double g = G.data()[(oc * ho + oi) * wo + oj];
          if (g == 0.0) continue;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                long i = static_cast<long>(oi * stride + ki) - static_cast<long>(pad);
                long j = static_cast<long>(oj * stride + kj) - static_cast<long>(pad);
                if (i < 0 || j < 0 || i >= static_cast<long>(h) || j >= static_cast<long>(wd))
                  continue;
                gW.data()[((oc * ci + c) * k + ki) * k + kj] += g * X.data()[(c * h + i) * wd + j];
                gX.data()[(c * h + i) * wd + j] += g * W.data()[((oc * ci + c) * k + ki) * k + kj];
              }
        }
    accumulate(tp, x, gX);
    accumulate(tp, w, gW);
  });
}

Var chw_to_rows(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  if (X.ndim() != 3)
    throw TensorError("chw_to_rows: input must be {C,H,W}, got " + X.shape_str());
  std::size_t c = X.shape()[0], h = X.shape()[1], w = X.shape()[2];
  Tensor Y({h * w, c});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) Y.at(p, ch) = X.data()[ch * h * w + p];
  return make_op(t, std::move(Y), "chw_to_rows", [x, c, h, w](Tape& tp, Var out) {
    const Tensor& G = tp.grad(out);
    Tensor gX({c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < h * w; ++p) gX.data()[ch * h * w + p] = G.at(p, ch);
    accumulate(tp, x, gX);
  });
}

Var rows_to_chw(Tape& t, Var x, std::size_t h, std::size_t w) {
  const Tensor& X = t.value(x);
  if (X.ndim() != 2 || X.rows() != h * w)
    throw TensorError("rows_to_chw: need {" + std::to_string(h * w) + ", C}, got " +
                      X.shape_str());
  std::size_t c = X.cols();
  Tensor Y({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) Y.data()[ch * h * w + p] = X.at(p, ch);
  return make_op(t, std::move(Y), "rows_to_chw", [x, c, h, w](Tape& tp, Var out) {
    const Tensor& G = tp.grad(out);
    Tensor gX({h * w, c});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < h * w; ++p) gX.at(p, ch) = G.data()[ch * h * w + p];
    accumulate(tp, x, gX);
  });
}

// ---- finite differences -----------------------------------------------------

namespace {

FdReport fd_check_impl(const ScalarExpr& f, const std::vector<Tensor>& point,
                       const std::vector<std::vector<std::size_t>>& coords, double step,
                       double tol) {
  // Analytic gradients.
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(point.size());
    for (const Tensor& p : point) vars.push_back(tape.input(p));
    Var out = f(tape, vars);
    if (tape.value(out).size() != 1)
      throw TensorError("finite_diff_check: expression is not scalar");
    tape.backward(out);
    for (Var v : vars) analytic.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<Tensor>& pt) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& p : pt) vars.push_back(tape.input(p));
    double v = tape.value(f(tape, vars))[0];
    if (!std::isfinite(v)) throw TensorError("finite_diff_check: non-finite function value");
    return v;
  };

  FdReport rep;
  rep.pass = true;
  std::vector<Tensor> pt = point;
  for (std::size_t k = 0; k < point.size(); ++k) {
    for (std::size_t c : coords[k]) {
      double orig = pt[k][c];
      pt[k][c] = orig + step;
      double fp = eval(pt);
      pt[k][c] = orig - step;
      double fm = eval(pt);
      pt[k][c] = orig;
      double fd = (fp - fm) / (2.0 * step);
      double an = analytic[k][c];
      double diff = std::fabs(fd - an);
      double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
      double rel = (diff <= 1e-8) ? 0.0 : diff / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = k;
        rep.worst_coord = c;
      }
      if (rel > tol) rep.pass = false;
    }
  }
  return rep;
}

}  // namespace

FdReport finite_diff_check(const ScalarExpr& f, const std::vector<Tensor>& point, double step,
                           double tol) {
  std::vector<std::vector<std::size_t>> coords(point.size());
  for (std::size_t k = 0; k < point.size(); ++k) {
    coords[k].resize(point[k].size());
    std::iota(coords[k].begin(), coords[k].end(), 0);
  }
  return fd_check_impl(f, point, coords, step, tol);
}

FdReport finite_diff_check_sampled(const ScalarExpr& f, const std::vector<Tensor>& point,
                                   std::size_t max_coords, std::uint64_t seed, double step,
                                   double tol) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> coords(point.size());
  for (std::size_t k = 0; k < point.size(); ++k) {
    std::size_t n = point[k].size();
    if (n <= max_coords) {
      coords[k].resize(n);
      std::iota(coords[k].begin(), coords[k].end(), 0);
    } else {
      std::vector<std::size_t> all(n);
      std::iota(all.begin(), all.end(), 0);
      std::shuffle(all.begin(), all.end(), rng);
      coords[k].assign(all.begin(), all.begin() + max_coords);
      std::sort(coords[k].begin(), coords[k].end());
    }
  }
  return fd_check_impl(f, point, coords, step, tol);
}

}  // namespace hgvt
