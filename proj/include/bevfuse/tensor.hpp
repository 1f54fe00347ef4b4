#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace bevfuse::ad {

class Tensor;

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated on first write
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // reads this->grad, accumulates into parents' grads
  std::function<void(TensorImpl&)> backward_fn;

  std::size_t numel() const { return val.size(); }
  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};

bool grad_enabled();

// Disables graph construction while alive. Nestable.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense double tensor with reverse-mode autodiff. Value-semantic handle over
// shared storage; ops record a graph when grad mode is on and an input
// requires grad. Single-threaded, deterministic evaluation order throughout.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> vals, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t numel() const { return impl_->numel(); }
  double* data() { return impl_->val.data(); }
  const double* data() const { return impl_->val.data(); }
  std::vector<double>& values() { return impl_->val; }
  const std::vector<double>& values() const { return impl_->val; }
  double value() const;  // scalar tensors only

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<double>& grad() const { return impl_->grad; }
  void zero_grad() {
    if (impl_) impl_->grad.assign(impl_->val.size(), 0.0);
  }
  // Runs reverse-mode from a scalar root and frees the recorded graph.
  void backward();
  Tensor detach() const;
  Tensor clone() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---- elementwise / reduction ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
// elementwise Huber: 0.5 x^2 / beta for |x| < beta, else |x| - beta/2
Tensor smooth_l1(const Tensor& a, double beta);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

// ---- shape ----
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor concat_channel(const std::vector<Tensor>& xs);  // along dim 0 of (C,H,W)
Tensor upsample2_nearest(const Tensor& x);             // (C,H,W) -> (C,2H,2W)
// picks channel planes by index (repeats allowed); (C,H,W) -> (len,H,W)
Tensor gather_channels(const Tensor& x, const std::vector<int>& indices);
// (C,H,W) scaled per cell by s of shape (H,W) or (1,H,W), broadcast over C
Tensor mul_spatial(const Tensor& x, const Tensor& s);

// ---- linear algebra / network primitives ----
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // (n,di)*(do,di)^T+(do)
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps = 1e-5);
Tensor softmax_dim0(const Tensor& x);  // softmax over dim 0, per remaining index

// max over each group of `rows_per_group` consecutive rows, first `counts[g]`
// rows only; x is (G*rows_per_group, C), result (G, C)
Tensor masked_rowmax(const Tensor& x, const std::vector<int>& counts, int rows_per_group);

// (P,C) rows placed at flat cell indices into a zeroed (C,ny,nx) map
Tensor scatter_cells(const Tensor& x, const std::vector<int>& cells, int ny, int nx);

// BEV pooling of lifted pseudo-points: out(c, cell) += ctx(c,p) * depth(d,p)
// for every frustum point (d,p) with cells[d*P+p] >= 0
Tensor lift_splat(const Tensor& ctx, const Tensor& depth, const std::vector<int>& cells,
                  int ny, int nx);

// mean cross-entropy over columns of (K,M) logits; target -1 ignores a column
Tensor cross_entropy_cols(const Tensor& logits, const std::vector<int>& targets);

}  // namespace bevfuse::ad
