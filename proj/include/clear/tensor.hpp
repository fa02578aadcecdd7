#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace clear {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until a backward pass touches it

  void accumulate_grad(const std::vector<double>& g);
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// Dense row-major f64 tensor. Value-semantic handle onto a shared buffer;
// the tape keeps graph inputs alive via these handles.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor from_vector(std::vector<double> v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }
  bool is_scalar() const { return size() == 1; }

  double item() const;  // scalar tensors only
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  Tensor detach() const;  // fresh buffer, no grad tracking
  Tensor clone() const;   // fresh buffer, same requires_grad

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode tape. Nodes are appended in execution order; backward walks
// them in strict reverse. One tape per thread; reset is explicit per step.
class Tape {
 public:
  static Tape& active();

  bool recording() const { return no_grad_depth_ == 0; }
  void record(std::function<void()> backward_fn);
  void backward(const Tensor& loss);
  void reset();
  size_t node_count() const { return nodes_.size(); }

 private:
  friend struct NoGradGuard;
  std::vector<std::function<void()>> nodes_;
  bool backward_consumed_ = false;
  int no_grad_depth_ = 0;
};

// Disables recording for the guard's lifetime (inference / oracle forwards).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

void backward(const Tensor& loss);

// ---- elementwise (binary ops require equal shapes; scalar broadcasts) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor softplus(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }

// ---- linear algebra & structure ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m×k]·[k×n]
Tensor transpose(const Tensor& a);                // rank-2
Tensor reshape(const Tensor& a, Shape shape);

Tensor sum(const Tensor& x);        // all elements -> [1]
Tensor mean(const Tensor& x);       // all elements -> [1]
Tensor sum_rows(const Tensor& x);   // [R×C] -> [R]
Tensor softmax(const Tensor& x, int axis);
Tensor logsumexp(const Tensor& x);  // rank-1 -> [1], max-shifted
Tensor at(const Tensor& x, int index);      // rank-1 pick -> [1]
Tensor row(const Tensor& x, int r);         // [R×C] -> [C]
Tensor stack_rows(const std::vector<Tensor>& rows);  // K×[C] -> [K×C]

Tensor add_rowvec(const Tensor& x, const Tensor& v);  // [R×C] + [C] per row
Tensor mul_rowvec(const Tensor& x, const Tensor& v);  // [R×C] ⊙ [C] per row
Tensor scale_rows(const Tensor& x, const Tensor& s);  // row r scaled by s[r]
Tensor shift_rows(const Tensor& x, const Tensor& s);  // row r shifted by s[r]

Tensor layer_norm_rows(const Tensor& x, double eps);  // per-row (x-μ)/√(σ²+eps)

// ---- vision primitives ----
// x: [C×H×W], w: [O×C×kh×kw], b: [O]; zero "same" padding, odd kernels.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);
// x: [H×W] -> [T×p²], T = (H/p)·(W/p), patches row-major.
Tensor extract_patches(const Tensor& x, int patch);

// ---- similarity ----
Tensor cosine_similarity(const Tensor& x, const Tensor& y);  // rank-1, -> [1]
Tensor dot(const Tensor& x, const Tensor& y);
Tensor l2_normalize(const Tensor& x);

}  // namespace clear
