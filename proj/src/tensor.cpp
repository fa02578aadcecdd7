#include "clear/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace clear {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

void TensorImpl::accumulate_grad(const std::vector<double>& g) {
  ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(shape));
  }
  if (numel(shape) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(numel(shape)), 0.0);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(numel(shape)), value);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}, false); }

Tensor Tensor::from_vector(std::vector<double> v, bool requires_grad) {
  Shape s{static_cast<int>(v.size())};
  return Tensor(std::move(s), std::move(v), requires_grad);
}

double Tensor::item() const {
  if (!is_scalar()) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) {
    static const std::vector<double> kEmpty;
    return kEmpty;
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || !loss.is_scalar()) {
    throw std::invalid_argument("backward requires a scalar loss, got " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (backward_consumed_) {
    throw std::logic_error("backward called twice without tape reset");
  }
  backward_consumed_ = true;
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::reset() {
  nodes_.clear();
  backward_consumed_ = false;
}

NoGradGuard::NoGradGuard() { ++Tape::active().no_grad_depth_; }
NoGradGuard::~NoGradGuard() { --Tape::active().no_grad_depth_; }

void backward(const Tensor& loss) { Tape::active().backward(loss); }

namespace {

using Impl = std::shared_ptr<TensorImpl>;

bool tracked(const Tensor& t) { return t.requires_grad() && Tape::active().recording(); }

Tensor make_out(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

// true when this node's output received gradient during the current backward
bool live(const Impl& out) { return !out->grad.empty(); }

void check_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(op) + " requires a rank-2 tensor, got " + shape_str(t.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

namespace {

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op) {
  const bool a_scalar = a.is_scalar();
  const bool b_scalar = b.is_scalar();
  if (a.shape() != b.shape() && !a_scalar && !b_scalar) {
    throw std::invalid_argument("shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Shape& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  const int64_t n = numel(out_shape);
  const auto& ad = a.data();
  const auto& bd = b.data();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double x = ad[a_scalar ? 0 : i];
    const double y = bd[b_scalar ? 0 : i];
    switch (op) {
      case BinOp::Add: out[i] = x + y; break;
      case BinOp::Sub: out[i] = x - y; break;
      case BinOp::Mul: out[i] = x * y; break;
      case BinOp::Div: out[i] = x / y; break;
    }
  }
  const bool rg = tracked(a) || tracked(b);
  Tensor result = make_out(out_shape, std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), ai = a.impl(), bi = b.impl();
    Tape::active().record([oi, ai, bi, op, a_scalar, b_scalar]() {
      if (!live(oi)) return;
      const auto& g = oi->grad;
      const int64_t n = static_cast<int64_t>(g.size());
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          const double y = bi->data[b_scalar ? 0 : i];
          double d = 0;
          switch (op) {
            case BinOp::Add: d = g[i]; break;
            case BinOp::Sub: d = g[i]; break;
            case BinOp::Mul: d = g[i] * y; break;
            case BinOp::Div: d = g[i] / y; break;
          }
          ai->grad[a_scalar ? 0 : i] += d;
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          const double x = ai->data[a_scalar ? 0 : i];
          const double y = bi->data[b_scalar ? 0 : i];
          double d = 0;
          switch (op) {
            case BinOp::Add: d = g[i]; break;
            case BinOp::Sub: d = -g[i]; break;
            case BinOp::Mul: d = g[i] * x; break;
            case BinOp::Div: d = -g[i] * x / (y * y); break;
          }
          bi->grad[b_scalar ? 0 : i] += d;
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Div); }

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

namespace {

// dy/dx expressed in terms of input x and output y
Tensor unary_op(const Tensor& x, double (*fwd)(double), double (*bwd)(double, double)) {
  const auto& xd = x.data();
  std::vector<double> out(xd.size());
  for (size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  const bool rg = tracked(x);
  Tensor result = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl();
    Tape::active().record([oi, xi, bwd]() {
      if (!live(oi) || !xi->requires_grad) return;
      xi->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        xi->grad[i] += oi->grad[i] * bwd(xi->data[i], oi->data[i]);
      }
    });
  }
  return result;
}

double sigmoid_scalar(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

double softplus_scalar(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

}  // namespace

Tensor neg(const Tensor& x) {
  return unary_op(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw std::domain_error("log of non-positive value " + std::to_string(v));
  }
  return unary_op(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
  return unary_op(x, [](double v) { return std::tanh(v); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary_op(x, [](double v) { return v > 0 ? v : 0.0; },
                  [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& x) {
  return unary_op(x, [](double v) { return v * sigmoid_scalar(v); },
                  [](double v, double) {
                    const double s = sigmoid_scalar(v);
                    return s * (1.0 + v * (1.0 - s));
                  });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0) throw std::domain_error("sqrt of negative value " + std::to_string(v));
  }
  return unary_op(x, [](double v) { return std::sqrt(v); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor softplus(const Tensor& x) {
  return unary_op(x, softplus_scalar, [](double v, double) { return sigmoid_scalar(v); });
}

// ---------------------------------------------------------------------------
// matmul / transpose / reshape
// ---------------------------------------------------------------------------

namespace {

// C[m×n] += A[m×k]·B[k×n]; ikj order so the inner loop streams rows of B and C
void matmul_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a_row = A + static_cast<int64_t>(i) * k;
    double* c_row = C + static_cast<int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double a = a_row[p];
      if (a == 0.0) continue;
      const double* b_row = B + static_cast<int64_t>(p) * n;
      for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[m×n] += A[k×m]ᵀ·B[k×n]
void matmul_at_b(const double* A, const double* B, double* C, int k, int m, int n) {
  for (int p = 0; p < k; ++p) {
    const double* a_row = A + static_cast<int64_t>(p) * m;
    const double* b_row = B + static_cast<int64_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double a = a_row[i];
      if (a == 0.0) continue;
      double* c_row = C + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[m×k] += A[m×n]·B[k×n]ᵀ
void matmul_a_bt(const double* A, const double* B, double* C, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* a_row = A + static_cast<int64_t>(i) * n;
    double* c_row = C + static_cast<int64_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* b_row = B + static_cast<int64_t>(p) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += a_row[j] * b_row[j];
      c_row[p] += acc;
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const int m = a.shape()[0], k = a.shape()[1];
  const int k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw std::invalid_argument("matmul inner dimensions disagree: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  matmul_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  const bool rg = tracked(a) || tracked(b);
  Tensor result = make_out({m, n}, std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), ai = a.impl(), bi = b.impl();
    Tape::active().record([oi, ai, bi, m, k, n]() {
      if (!live(oi)) return;
      if (ai->requires_grad) {  // dA = dC·Bᵀ
        ai->ensure_grad();
        matmul_a_bt(oi->grad.data(), bi->data.data(), ai->grad.data(), m, n, k);
      }
      if (bi->requires_grad) {  // dB = Aᵀ·dC
        bi->ensure_grad();
        matmul_at_b(ai->data.data(), oi->grad.data(), bi->grad.data(), m, k, n);
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  check_rank2(a, "transpose");
  const int r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(static_cast<size_t>(r) * c);
  const auto& ad = a.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = ad[static_cast<size_t>(i) * c + j];
  const bool rg = tracked(a);
  Tensor result = make_out({c, r}, std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), ai = a.impl();
    Tape::active().record([oi, ai, r, c]() {
      if (!live(oi) || !ai->requires_grad) return;
      ai->ensure_grad();
      for (int i = 0; i < c; ++i)
        for (int j = 0; j < r; ++j)
          ai->grad[static_cast<size_t>(j) * c + i] += oi->grad[static_cast<size_t>(i) * r + j];
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw std::invalid_argument("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                                " changes element count");
  }
  const bool rg = tracked(a);
  Tensor result = make_out(std::move(shape), a.data(), rg);
  if (rg) {
    Impl oi = result.impl(), ai = a.impl();
    Tape::active().record([oi, ai]() {
      if (!live(oi) || !ai->requires_grad) return;
      ai->accumulate_grad(oi->grad);
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const bool rg = tracked(x);
  Tensor result = make_out({1}, {acc}, rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl();
    Tape::active().record([oi, xi]() {
      if (!live(oi) || !xi->requires_grad) return;
      xi->ensure_grad();
      for (auto& g : xi->grad) g += oi->grad[0];
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.size());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const bool rg = tracked(x);
  Tensor result = make_out({1}, {acc / n}, rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl();
    Tape::active().record([oi, xi, n]() {
      if (!live(oi) || !xi->requires_grad) return;
      xi->ensure_grad();
      const double g = oi->grad[0] / n;
      for (auto& gi : xi->grad) gi += g;
    });
  }
  return result;
}

Tensor sum_rows(const Tensor& x) {
  check_rank2(x, "sum_rows");
  const int r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(static_cast<size_t>(r), 0.0);
  const auto& xd = x.data();
  for (int i = 0; i < r; ++i) {
    double acc = 0.0;
    for (int j = 0; j < c; ++j) acc += xd[static_cast<size_t>(i) * c + j];
    out[i] = acc;
  }
  const bool rg = tracked(x);
  Tensor result = make_out({r}, std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl();
    Tape::active().record([oi, xi, r, c]() {
      if (!live(oi) || !xi->requires_grad) return;
      xi->ensure_grad();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) xi->grad[static_cast<size_t>(i) * c + j] += oi->grad[i];
    });
  }
  return result;
}

namespace {

// softmax over a contiguous stretch with stride 1 (rows) handled directly;
// column softmax goes through strided indexing.
void softmax_1d(const double* x, double* y, int n, int stride) {
  double m = x[0];
  for (int i = 1; i < n; ++i) m = std::max(m, x[static_cast<int64_t>(i) * stride]);
  double denom = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = std::exp(x[static_cast<int64_t>(i) * stride] - m);
    y[static_cast<int64_t>(i) * stride] = e;
    denom += e;
  }
  for (int i = 0; i < n; ++i) y[static_cast<int64_t>(i) * stride] /= denom;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank()) {
    throw std::invalid_argument("softmax axis " + std::to_string(axis) + " out of range for " +
                                shape_str(x.shape()));
  }
  if (x.rank() > 2) throw std::invalid_argument("softmax supports rank <= 2");
  std::vector<double> out(x.data().size());
  const auto& xd = x.data();
  int lanes, n, lane_stride, elem_stride;
  if (x.rank() == 1) {
    lanes = 1; n = x.shape()[0]; lane_stride = 0; elem_stride = 1;
  } else if (axis == 1) {
    lanes = x.shape()[0]; n = x.shape()[1]; lane_stride = n; elem_stride = 1;
  } else {
    lanes = x.shape()[1]; n = x.shape()[0]; lane_stride = 1; elem_stride = x.shape()[1];
  }
  for (int l = 0; l < lanes; ++l) {
    softmax_1d(xd.data() + static_cast<int64_t>(l) * lane_stride,
               out.data() + static_cast<int64_t>(l) * lane_stride, n, elem_stride);
  }
  const bool rg = tracked(x);
  Tensor result = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl();
    Tape::active().record([oi, xi, lanes, n, lane_stride, elem_stride]() {
      if (!live(oi) || !xi->requires_grad) return;
      xi->ensure_grad();
      // dx = y ⊙ (g − Σ g⊙y) per lane
      for (int l = 0; l < lanes; ++l) {
        const int64_t base = static_cast<int64_t>(l) * lane_stride;
        double inner = 0.0;
        for (int i = 0; i < n; ++i) {
          const int64_t idx = base + static_cast<int64_t>(i) * elem_stride;
          inner += oi->grad[idx] * oi->data[idx];
        }
        for (int i = 0; i < n; ++i) {
          const int64_t idx = base + static_cast<int64_t>(i) * elem_stride;
          xi->grad[idx] += oi->data[idx] * (oi->grad[idx] - inner);
        }
      }
    });
  }
  return result;
}

Tensor logsumexp(const Tensor& x) {
  if (x.rank() != 1) throw std::invalid_argument("logsumexp requires a rank-1 tensor");
  const auto& xd = x.data();
  double m = xd[0];
  for (double v : xd) m = std::max(m, v);
  double acc = 0.0;
  for (double v : xd) acc += std::exp(v - m);
  const double value = m + std::log(acc);
  const bool rg = tracked(x);
  Tensor result = make_out({1}, {value}, rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl();
    Tape::active().record([oi, xi, value]() {
      if (!live(oi) || !xi->requires_grad) return;
      xi->ensure_grad();
      const double g = oi->grad[0];
      for (size_t i = 0; i < xi->data.size(); ++i) xi->grad[i] += g * std::exp(xi->data[i] - value);
    });
  }
  return result;
}

Tensor at(const Tensor& x, int index) {
  if (x.rank() != 1) throw std::invalid_argument("at requires a rank-1 tensor");
  if (index < 0 || index >= x.shape()[0]) {
    throw std::out_of_range("index " + std::to_string(index) + " out of range for " +
                            shape_str(x.shape()));
  }
  const bool rg = tracked(x);
  Tensor result = make_out({1}, {x.data()[static_cast<size_t>(index)]}, rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl();
    Tape::active().record([oi, xi, index]() {
      if (!live(oi) || !xi->requires_grad) return;
      xi->ensure_grad();
      xi->grad[static_cast<size_t>(index)] += oi->grad[0];
    });
  }
  return result;
}

Tensor row(const Tensor& x, int r) {
  check_rank2(x, "row");
  const int rows = x.shape()[0], cols = x.shape()[1];
  if (r < 0 || r >= rows) {
    throw std::out_of_range("row " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin() + static_cast<int64_t>(r) * cols,
                          x.data().begin() + static_cast<int64_t>(r + 1) * cols);
  const bool rg = tracked(x);
  Tensor result = make_out({cols}, std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl();
    Tape::active().record([oi, xi, r, cols]() {
      if (!live(oi) || !xi->requires_grad) return;
      xi->ensure_grad();
      for (int j = 0; j < cols; ++j) xi->grad[static_cast<int64_t>(r) * cols + j] += oi->grad[j];
    });
  }
  return result;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows on empty list");
  const int cols = rows[0].shape()[0];
  bool rg = false;
  for (const auto& t : rows) {
    if (t.rank() != 1 || t.shape()[0] != cols) {
      throw std::invalid_argument("stack_rows rows must share shape, got " + shape_str(t.shape()) +
                                  " vs [" + std::to_string(cols) + "]");
    }
    rg = rg || tracked(t);
  }
  const int k = static_cast<int>(rows.size());
  std::vector<double> out;
  out.reserve(static_cast<size_t>(k) * cols);
  for (const auto& t : rows) out.insert(out.end(), t.data().begin(), t.data().end());
  Tensor result = make_out({k, cols}, std::move(out), rg);
  if (rg) {
    std::vector<Impl> inputs;
    inputs.reserve(rows.size());
    for (const auto& t : rows) inputs.push_back(t.impl());
    Impl oi = result.impl();
    Tape::active().record([oi, inputs, cols]() {
      if (!live(oi)) return;
      for (size_t r = 0; r < inputs.size(); ++r) {
        if (!inputs[r]->requires_grad) continue;
        inputs[r]->ensure_grad();
        for (int j = 0; j < cols; ++j) {
          inputs[r]->grad[j] += oi->grad[r * static_cast<size_t>(cols) + j];
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// row/column broadcasts
// ---------------------------------------------------------------------------

namespace {

void check_rowvec(const Tensor& x, const Tensor& v, const char* op) {
  check_rank2(x, op);
  if (v.rank() != 1 || v.shape()[0] != x.shape()[1]) {
    throw std::invalid_argument(std::string(op) + ": vector " + shape_str(v.shape()) +
                                " does not match columns of " + shape_str(x.shape()));
  }
}

void check_rowscalar(const Tensor& x, const Tensor& s, const char* op) {
  check_rank2(x, op);
  if (s.rank() != 1 || s.shape()[0] != x.shape()[0]) {
    throw std::invalid_argument(std::string(op) + ": vector " + shape_str(s.shape()) +
                                " does not match rows of " + shape_str(x.shape()));
  }
}

}  // namespace

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  check_rowvec(x, v, "add_rowvec");
  const int r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(x.data());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] += v.data()[j];
  const bool rg = tracked(x) || tracked(v);
  Tensor result = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl(), vi = v.impl();
    Tape::active().record([oi, xi, vi, r, c]() {
      if (!live(oi)) return;
      if (xi->requires_grad) xi->accumulate_grad(oi->grad);
      if (vi->requires_grad) {
        vi->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) vi->grad[j] += oi->grad[static_cast<size_t>(i) * c + j];
      }
    });
  }
  return result;
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  check_rowvec(x, v, "mul_rowvec");
  const int r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(x.data());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] *= v.data()[j];
  const bool rg = tracked(x) || tracked(v);
  Tensor result = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl(), vi = v.impl();
    Tape::active().record([oi, xi, vi, r, c]() {
      if (!live(oi)) return;
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            xi->grad[static_cast<size_t>(i) * c + j] += oi->grad[static_cast<size_t>(i) * c + j] * vi->data[j];
      }
      if (vi->requires_grad) {
        vi->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            vi->grad[j] += oi->grad[static_cast<size_t>(i) * c + j] * xi->data[static_cast<size_t>(i) * c + j];
      }
    });
  }
  return result;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  check_rowscalar(x, s, "scale_rows");
  const int r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(x.data());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] *= s.data()[i];
  const bool rg = tracked(x) || tracked(s);
  Tensor result = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl(), si = s.impl();
    Tape::active().record([oi, xi, si, r, c]() {
      if (!live(oi)) return;
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            xi->grad[static_cast<size_t>(i) * c + j] += oi->grad[static_cast<size_t>(i) * c + j] * si->data[i];
      }
      if (si->requires_grad) {
        si->ensure_grad();
        for (int i = 0; i < r; ++i) {
          double acc = 0.0;
          for (int j = 0; j < c; ++j)
            acc += oi->grad[static_cast<size_t>(i) * c + j] * xi->data[static_cast<size_t>(i) * c + j];
          si->grad[i] += acc;
        }
      }
    });
  }
  return result;
}

Tensor shift_rows(const Tensor& x, const Tensor& s) {
  check_rowscalar(x, s, "shift_rows");
  const int r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(x.data());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] += s.data()[i];
  const bool rg = tracked(x) || tracked(s);
  Tensor result = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl(), si = s.impl();
    Tape::active().record([oi, xi, si, r, c]() {
      if (!live(oi)) return;
      if (xi->requires_grad) xi->accumulate_grad(oi->grad);
      if (si->requires_grad) {
        si->ensure_grad();
        for (int i = 0; i < r; ++i) {
          double acc = 0.0;
          for (int j = 0; j < c; ++j) acc += oi->grad[static_cast<size_t>(i) * c + j];
          si->grad[i] += acc;
        }
      }
    });
  }
  return result;
}

Tensor layer_norm_rows(const Tensor& x, double eps) {
  check_rank2(x, "layer_norm_rows");
  const int r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(x.data().size());
  std::vector<double> inv_std(static_cast<size_t>(r));
  const auto& xd = x.data();
  for (int i = 0; i < r; ++i) {
    const double* xr = xd.data() + static_cast<int64_t>(i) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += xr[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (int j = 0; j < c; ++j) out[static_cast<int64_t>(i) * c + j] = (xr[j] - mu) * is;
  }
  const bool rg = tracked(x);
  Tensor result = make_out(x.shape(), std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl();
    Tape::active().record([oi, xi, inv_std, r, c]() {
      if (!live(oi) || !xi->requires_grad) return;
      xi->ensure_grad();
      // dx = inv_std · (g − mean(g) − y·mean(g⊙y)) per row
      for (int i = 0; i < r; ++i) {
        const int64_t base = static_cast<int64_t>(i) * c;
        double g_mean = 0.0, gy_mean = 0.0;
        for (int j = 0; j < c; ++j) {
          g_mean += oi->grad[base + j];
          gy_mean += oi->grad[base + j] * oi->data[base + j];
        }
        g_mean /= c;
        gy_mean /= c;
        for (int j = 0; j < c; ++j) {
          xi->grad[base + j] +=
              inv_std[i] * (oi->grad[base + j] - g_mean - oi->data[base + j] * gy_mean);
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// conv2d / patches
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  if (x.rank() != 3) throw std::invalid_argument("conv2d input must be [C×H×W], got " + shape_str(x.shape()));
  if (w.rank() != 4) throw std::invalid_argument("conv2d weight must be [O×C×kh×kw], got " + shape_str(w.shape()));
  const int cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const int cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (w.shape()[1] != cin) {
    throw std::invalid_argument("conv2d channel mismatch: input " + shape_str(x.shape()) +
                                " vs weight " + shape_str(w.shape()));
  }
  if (b.rank() != 1 || b.shape()[0] != cout) {
    throw std::invalid_argument("conv2d bias must be [O], got " + shape_str(b.shape()));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv2d requires odd kernel sizes");
  if (stride < 1) throw std::invalid_argument("conv2d stride must be >= 1");
  const int ph = kh / 2, pw = kw / 2;
  const int oh = (h + 2 * ph - kh) / stride + 1;
  const int ow = (wd + 2 * pw - kw) / stride + 1;

  const auto& xd = x.data();
  const auto& wd_ = w.data();
  std::vector<double> out(static_cast<size_t>(cout) * oh * ow, 0.0);
  for (int o = 0; o < cout; ++o) {
    const double bias = b.data()[o];
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = bias;
        for (int c = 0; c < cin; ++c) {
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride + ky - ph;
            if (iy < 0 || iy >= h) continue;
            const double* xrow = xd.data() + (static_cast<int64_t>(c) * h + iy) * wd;
            const double* wrow = wd_.data() + ((static_cast<int64_t>(o) * cin + c) * kh + ky) * kw;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride + kx - pw;
              if (ix < 0 || ix >= wd) continue;
              acc += xrow[ix] * wrow[kx];
            }
          }
        }
        out[(static_cast<int64_t>(o) * oh + oy) * ow + ox] = acc;
      }
    }
  }
  const bool rg = tracked(x) || tracked(w) || tracked(b);
  Tensor result = make_out({cout, oh, ow}, std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl(), wi = w.impl(), bi = b.impl();
    Tape::active().record([oi, xi, wi, bi, cin, h, wd, cout, kh, kw, ph, pw, oh, ow, stride]() {
      if (!live(oi)) return;
      const auto& g = oi->grad;
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int o = 0; o < cout; ++o) {
          double acc = 0.0;
          const double* grow = g.data() + static_cast<int64_t>(o) * oh * ow;
          for (int i = 0; i < oh * ow; ++i) acc += grow[i];
          bi->grad[o] += acc;
        }
      }
      const bool dx = xi->requires_grad, dw = wi->requires_grad;
      if (dx) xi->ensure_grad();
      if (dw) wi->ensure_grad();
      if (!dx && !dw) return;
      for (int o = 0; o < cout; ++o) {
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const double go = g[(static_cast<int64_t>(o) * oh + oy) * ow + ox];
            if (go == 0.0) continue;
            for (int c = 0; c < cin; ++c) {
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride + ky - ph;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride + kx - pw;
                  if (ix < 0 || ix >= wd) continue;
                  const int64_t xin = (static_cast<int64_t>(c) * h + iy) * wd + ix;
                  const int64_t win = ((static_cast<int64_t>(o) * cin + c) * kh + ky) * kw + kx;
                  if (dw) wi->grad[win] += go * xi->data[xin];
                  if (dx) xi->grad[xin] += go * wi->data[win];
                }
              }
            }
          }
        }
      }
    });
  }
  return result;
}

Tensor extract_patches(const Tensor& x, int patch) {
  check_rank2(x, "extract_patches");
  const int h = x.shape()[0], w = x.shape()[1];
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw std::invalid_argument("patch size " + std::to_string(patch) + " must divide " +
                                shape_str(x.shape()));
  }
  const int gy = h / patch, gx = w / patch;
  const int t = gy * gx, pp = patch * patch;
  std::vector<double> out(static_cast<size_t>(t) * pp);
  const auto& xd = x.data();
  for (int ty = 0; ty < gy; ++ty)
    for (int tx = 0; tx < gx; ++tx)
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px) {
          const int64_t src = static_cast<int64_t>(ty * patch + py) * w + tx * patch + px;
          const int64_t dst = static_cast<int64_t>(ty * gx + tx) * pp + py * patch + px;
          out[dst] = xd[src];
        }
  const bool rg = tracked(x);
  Tensor result = make_out({t, pp}, std::move(out), rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl();
    Tape::active().record([oi, xi, gy, gx, patch, w]() {
      if (!live(oi) || !xi->requires_grad) return;
      xi->ensure_grad();
      const int pp = patch * patch;
      for (int ty = 0; ty < gy; ++ty)
        for (int tx = 0; tx < gx; ++tx)
          for (int py = 0; py < patch; ++py)
            for (int px = 0; px < patch; ++px) {
              const int64_t src = static_cast<int64_t>(ty * patch + py) * w + tx * patch + px;
              const int64_t dst = static_cast<int64_t>(ty * gx + tx) * pp + py * patch + px;
              xi->grad[src] += oi->grad[dst];
            }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// similarity
// ---------------------------------------------------------------------------

Tensor dot(const Tensor& x, const Tensor& y) { return sum(mul(x, y)); }

Tensor l2_normalize(const Tensor& x) { return div(x, sqrt(sum(mul(x, x)))); }

Tensor cosine_similarity(const Tensor& x, const Tensor& y) {
  if (x.rank() != 1 || y.rank() != 1 || x.shape() != y.shape()) {
    throw std::invalid_argument("cosine_similarity requires matching rank-1 tensors, got " +
                                shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  const auto& xd = x.data();
  const auto& yd = y.data();
  double xy = 0.0, xx = 0.0, yy = 0.0;
  for (size_t i = 0; i < xd.size(); ++i) {
    xy += xd[i] * yd[i];
    xx += xd[i] * xd[i];
    yy += yd[i] * yd[i];
  }
  if (xx == 0.0 || yy == 0.0) {
    throw std::domain_error("cosine_similarity of a zero vector is undefined");
  }
  const double nx = std::sqrt(xx), ny = std::sqrt(yy);
  double value = xy / (nx * ny);
  value = std::clamp(value, -1.0, 1.0);
  const bool rg = tracked(x) || tracked(y);
  Tensor result = make_out({1}, {value}, rg);
  if (rg) {
    Impl oi = result.impl(), xi = x.impl(), yi = y.impl();
    Tape::active().record([oi, xi, yi, value, nx, ny]() {
      if (!live(oi)) return;
      const double g = oi->grad[0];
      const size_t n = xi->data.size();
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (size_t i = 0; i < n; ++i) {
          xi->grad[i] += g * (yi->data[i] / (nx * ny) - value * xi->data[i] / (nx * nx));
        }
      }
      if (yi->requires_grad) {
        yi->ensure_grad();
        for (size_t i = 0; i < n; ++i) {
          yi->grad[i] += g * (xi->data[i] / (nx * ny) - value * yi->data[i] / (ny * ny));
        }
      }
    });
  }
  return result;
}

}  // namespace clear
