#include "bevfuse/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cassert>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace bevfuse::ad {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor make_result(std::vector<int> shape) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->val.resize(shape_numel(impl->shape), 0.0);
  return Tensor(std::move(impl));
}

bool any_requires_grad(std::initializer_list<const Tensor*> xs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* x : xs)
    if (x->requires_grad()) return true;
  return false;
}

void attach(Tensor& out, std::initializer_list<const Tensor*> inputs,
            std::function<void(TensorImpl&)> fn) {
  if (!any_requires_grad(inputs)) return;
  out.impl()->requires_grad = true;
  for (const Tensor* x : inputs) out.impl()->parents.push_back(x->impl());
  out.impl()->backward_fn = std::move(fn);
}

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor::Tensor(std::vector<int> shape, bool requires_grad) {
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->val.resize(shape_numel(impl_->shape), 0.0);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.impl()->val.begin(), t.impl()->val.end(), v);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> vals, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  if (vals.size() != t.numel()) throw std::invalid_argument("from(): value count != shape numel");
  t.impl()->val = std::move(vals);
  return t;
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

double Tensor::value() const {
  if (numel() != 1) throw std::logic_error("value() on non-scalar tensor");
  return impl_->val[0];
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->val = impl_->val;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl()->requires_grad = impl_->requires_grad;
  return t;
}

void Tensor::backward() {
  if (numel() != 1) throw std::logic_error("backward() needs a scalar root");
  // postorder DFS, then run backward fns root-first
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorImpl* p = node->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  impl_->ensure_grad();
  impl_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
  // free the graph; leaves keep their grads
  for (TensorImpl* node : order) {
    node->backward_fn = nullptr;
    node->parents.clear();
  }
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
  Tensor out = make_result(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  attach(out, {&a, &b}, [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("sub: shape mismatch");
  Tensor out = make_result(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  attach(out, {&a, &b}, [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] -= self.grad[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = make_result(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  attach(out, {&a, &b}, [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * bi->val[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bi->grad[i] += self.grad[i] * ai->val[i];
    }
  });
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = make_result(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + s;
  attach(out, {&a}, [ai = a.impl()](TensorImpl& self) {
    ai->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
  });
  return out;
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor out = make_result(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * s;
  attach(out, {&a}, [ai = a.impl(), s](TensorImpl& self) {
    ai->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i] * s;
  });
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = make_result({1});
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i];
  out.data()[0] = s;
  attach(out, {&a}, [ai = a.impl()](TensorImpl& self) {
    ai->ensure_grad();
    const double g = self.grad[0];
    for (double& gi : ai->grad) gi += g;
  });
  return out;
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  return mul_scalar(sum(a), inv);
}

Tensor relu(const Tensor& a) {
  Tensor out = make_result(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  attach(out, {&a}, [ai = a.impl()](TensorImpl& self) {
    ai->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (ai->val[i] > 0.0) ai->grad[i] += self.grad[i];
  });
  return out;
}

namespace {
inline double sigmoid_stable(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& a) {
  Tensor out = make_result(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.data()[i] = sigmoid_stable(a.data()[i]);
  attach(out, {&a}, [ai = a.impl(), oi = out.impl()](TensorImpl& self) {
    ai->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = oi->val[i];
      ai->grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
  return out;
}

Tensor log_sigmoid(const Tensor& a) {
  Tensor out = make_result(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i];
    // -softplus(-x), stable both directions
    out.data()[i] = x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
  }
  attach(out, {&a}, [ai = a.impl()](TensorImpl& self) {
    ai->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      ai->grad[i] += self.grad[i] * sigmoid_stable(-ai->val[i]);
  });
  return out;
}

Tensor smooth_l1(const Tensor& a, double beta) {
  if (beta <= 0.0) throw std::invalid_argument("smooth_l1: beta must be positive");
  Tensor out = make_result(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = std::abs(a.data()[i]);
    out.data()[i] = x < beta ? 0.5 * x * x / beta : x - 0.5 * beta;
  }
  attach(out, {&a}, [ai = a.impl(), beta](TensorImpl& self) {
    ai->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = ai->val[i];
      const double d = std::abs(x) < beta ? x / beta : (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
      ai->grad[i] += self.grad[i] * d;
    }
  });
  return out;
}

// --------------------------------------------------------------------- shape

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.numel()) throw std::invalid_argument("reshape: numel mismatch");
  Tensor out = make_result(std::move(shape));
  out.impl()->val = a.impl()->val;
  attach(out, {&a}, [ai = a.impl()](TensorImpl& self) {
    ai->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
  });
  return out;
}

Tensor concat_channel(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channel: empty input");
  const auto& s0 = xs[0].shape();
  if (s0.size() != 3) throw std::invalid_argument("concat_channel: expects (C,H,W)");
  int ctotal = 0;
  for (const Tensor& x : xs) {
    const auto& s = x.shape();
    if (s.size() != 3 || s[1] != s0[1] || s[2] != s0[2])
      throw std::invalid_argument("concat_channel: spatial mismatch");
    ctotal += s[0];
  }
  Tensor out = make_result({ctotal, s0[1], s0[2]});
  const std::size_t plane = static_cast<std::size_t>(s0[1]) * s0[2];
  std::size_t off = 0;
  for (const Tensor& x : xs) {
    std::copy(x.data(), x.data() + x.numel(), out.data() + off);
    off += x.numel();
  }
  // build graph: each input receives its channel block of grad
  bool need = false;
  for (const Tensor& x : xs)
    if (g_grad_enabled && x.requires_grad()) need = true;
  if (need) {
    out.impl()->requires_grad = true;
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(xs.size());
    for (const Tensor& x : xs) {
      impls.push_back(x.impl());
      out.impl()->parents.push_back(x.impl());
    }
    out.impl()->backward_fn = [impls, plane](TensorImpl& self) {
      std::size_t off2 = 0;
      for (const auto& xi : impls) {
        const std::size_t n = xi->val.size();
        if (xi->requires_grad) {
          xi->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) xi->grad[i] += self.grad[off2 + i];
        }
        off2 += n;
      }
      (void)plane;
    };
  }
  return out;
}

Tensor upsample2_nearest(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("upsample2_nearest: expects (C,H,W)");
  const int c = s[0], h = s[1], w = s[2];
  Tensor out = make_result({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double v = x.data()[(static_cast<std::size_t>(ch) * h + i) * w + j];
        const std::size_t base = (static_cast<std::size_t>(ch) * 2 * h + 2 * i) * 2 * w + 2 * j;
        out.data()[base] = v;
        out.data()[base + 1] = v;
        out.data()[base + 2 * w] = v;
        out.data()[base + 2 * w + 1] = v;
      }
  attach(out, {&x}, [xi = x.impl(), c, h, w](TensorImpl& self) {
    xi->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const std::size_t base = (static_cast<std::size_t>(ch) * 2 * h + 2 * i) * 2 * w + 2 * j;
          xi->grad[(static_cast<std::size_t>(ch) * h + i) * w + j] +=
              self.grad[base] + self.grad[base + 1] + self.grad[base + 2 * w] +
              self.grad[base + 2 * w + 1];
        }
  });
  return out;
}

Tensor gather_channels(const Tensor& x, const std::vector<int>& indices) {
  const auto& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("gather_channels: expects (C,H,W)");
  const int c = s[0];
  const std::size_t plane = static_cast<std::size_t>(s[1]) * s[2];
  for (int idx : indices)
    if (idx < 0 || idx >= c) throw std::invalid_argument("gather_channels: index out of range");
  Tensor out = make_result({static_cast<int>(indices.size()), s[1], s[2]});
  for (std::size_t k = 0; k < indices.size(); ++k)
    std::copy(x.data() + indices[k] * plane, x.data() + (indices[k] + 1) * plane,
              out.data() + k * plane);
  attach(out, {&x}, [xi = x.impl(), indices, plane](TensorImpl& self) {
    xi->ensure_grad();
    for (std::size_t k = 0; k < indices.size(); ++k)
      for (std::size_t i = 0; i < plane; ++i)
        xi->grad[indices[k] * plane + i] += self.grad[k * plane + i];
  });
  return out;
}

Tensor mul_spatial(const Tensor& x, const Tensor& s) {
  const auto& xs = x.shape();
  const auto& ss = s.shape();
  if (xs.size() != 3) throw std::invalid_argument("mul_spatial: x expects (C,H,W)");
  const std::size_t plane = static_cast<std::size_t>(xs[1]) * xs[2];
  const bool shape_ok = (ss.size() == 2 && ss[0] == xs[1] && ss[1] == xs[2]) ||
                        (ss.size() == 3 && ss[0] == 1 && ss[1] == xs[1] && ss[2] == xs[2]);
  if (!shape_ok) throw std::invalid_argument("mul_spatial: spatial shape mismatch");
  const int c = xs[0];
  Tensor out = make_result(xs);
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane; ++i)
      out.data()[ch * plane + i] = x.data()[ch * plane + i] * s.data()[i];
  attach(out, {&x, &s}, [xi = x.impl(), si = s.impl(), c, plane](TensorImpl& self) {
    if (xi->requires_grad) {
      xi->ensure_grad();
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i)
          xi->grad[ch * plane + i] += self.grad[ch * plane + i] * si->val[i];
    }
    if (si->requires_grad) {
      si->ensure_grad();
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i)
          si->grad[i] += self.grad[ch * plane + i] * xi->val[ch * plane + i];
    }
  });
  return out;
}

// ---------------------------------------------------------------- primitives

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
    throw std::invalid_argument("linear: shape mismatch");
  const int n = xs[0], din = xs[1], dout = ws[0];
  if (b.numel() != static_cast<std::size_t>(dout))
    throw std::invalid_argument("linear: bias size mismatch");
  Tensor out = make_result({n, dout});
  {
    CMatMap xm(x.data(), n, din);
    CMatMap wm(w.data(), dout, din);
    MatMap om(out.data(), n, dout);
    om.noalias() = xm * wm.transpose();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < dout; ++j) out.data()[static_cast<std::size_t>(i) * dout + j] += b.data()[j];
  }
  attach(out, {&x, &w, &b},
         [xi = x.impl(), wi = w.impl(), bi = b.impl(), n, din, dout](TensorImpl& self) {
           CMatMap gm(self.grad.data(), n, dout);
           if (xi->requires_grad) {
             xi->ensure_grad();
             CMatMap wm(wi->val.data(), dout, din);
             MatMap xg(xi->grad.data(), n, din);
             xg.noalias() += gm * wm;
           }
           if (wi->requires_grad) {
             wi->ensure_grad();
             CMatMap xm(xi->val.data(), n, din);
             MatMap wg(wi->grad.data(), dout, din);
             wg.noalias() += gm.transpose() * xm;
           }
           if (bi->requires_grad) {
             bi->ensure_grad();
             for (int i = 0; i < n; ++i)
               for (int j = 0; j < dout; ++j) bi->grad[j] += self.grad[static_cast<std::size_t>(i) * dout + j];
           }
         });
  return out;
}

namespace {

// im2col: x (Ci,H,W) -> cols (Ci*k*k, Ho*Wo)
void im2col(const double* x, int ci, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* cols) {
  const std::size_t ncols = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < ci; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        double* row = cols + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * ncols;
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride + ki - pad;
          const bool rowok = ii >= 0 && ii < h;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride + kj - pad;
            row[static_cast<std::size_t>(oi) * wo + oj] =
                (rowok && jj >= 0 && jj < w) ? x[(static_cast<std::size_t>(c) * h + ii) * w + jj]
                                             : 0.0;
          }
        }
      }
}

void col2im_acc(const double* cols, int ci, int h, int w, int k, int stride, int pad, int ho,
                int wo, double* xgrad) {
  const std::size_t ncols = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < ci; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const double* row = cols + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * ncols;
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) continue;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride + kj - pad;
            if (jj < 0 || jj >= w) continue;
            xgrad[(static_cast<std::size_t>(c) * h + ii) * w + jj] +=
                row[static_cast<std::size_t>(oi) * wo + oj];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0] || ws[2] != ws[3])
    throw std::invalid_argument("conv2d: shape mismatch");
  const int ci = xs[0], h = xs[1], w_in = xs[2];
  const int co = ws[0], k = ws[2];
  if (b.numel() != static_cast<std::size_t>(co)) throw std::invalid_argument("conv2d: bias size");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w_in + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: non-positive output size");
  const std::size_t ncols = static_cast<std::size_t>(ho) * wo;
  const int krows = ci * k * k;
  Tensor out = make_result({co, ho, wo});

  const bool onebyone = (k == 1 && stride == 1 && pad == 0);
  std::shared_ptr<std::vector<double>> cols;
  const double* colp;
  if (onebyone) {
    colp = x.data();  // (Ci, H*W) view
  } else {
    cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(krows) * ncols);
    im2col(x.data(), ci, h, w_in, k, stride, pad, ho, wo, cols->data());
    colp = cols->data();
  }
  {
    CMatMap wm(w.data(), co, krows);
    CMatMap cm(colp, krows, static_cast<int>(ncols));
    MatMap om(out.data(), co, static_cast<int>(ncols));
    om.noalias() = wm * cm;
    for (int c = 0; c < co; ++c) {
      const double bias = b.data()[c];
      double* row = out.data() + static_cast<std::size_t>(c) * ncols;
      for (std::size_t i = 0; i < ncols; ++i) row[i] += bias;
    }
  }
  attach(out, {&x, &w, &b},
         [xi = x.impl(), wi = w.impl(), bi = b.impl(), cols, onebyone, ci, h, w_in, k, stride, pad,
          ho, wo, co, krows, ncols](TensorImpl& self) {
           CMatMap gm(self.grad.data(), co, static_cast<int>(ncols));
           const double* colp2 = onebyone ? xi->val.data() : cols->data();
           if (wi->requires_grad) {
             wi->ensure_grad();
             CMatMap cm(colp2, krows, static_cast<int>(ncols));
             MatMap wg(wi->grad.data(), co, krows);
             wg.noalias() += gm * cm.transpose();
           }
           if (bi->requires_grad) {
             bi->ensure_grad();
             for (int c = 0; c < co; ++c) {
               double s = 0.0;
               const double* row = self.grad.data() + static_cast<std::size_t>(c) * ncols;
               for (std::size_t i = 0; i < ncols; ++i) s += row[i];
               bi->grad[c] += s;
             }
           }
           if (xi->requires_grad) {
             xi->ensure_grad();
             CMatMap wm(wi->val.data(), co, krows);
             if (onebyone) {
               MatMap xg(xi->grad.data(), krows, static_cast<int>(ncols));
               xg.noalias() += wm.transpose() * gm;
             } else {
               std::vector<double> dcols(static_cast<std::size_t>(krows) * ncols);
               MatMap dcm(dcols.data(), krows, static_cast<int>(ncols));
               dcm.noalias() = wm.transpose() * gm;
               col2im_acc(dcols.data(), ci, h, w_in, k, stride, pad, ho, wo, xi->grad.data());
             }
           }
         });
  return out;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps) {
  const auto& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("group_norm: expects (C,H,W)");
  const int c = s[0], h = s[1], w = s[2];
  if (groups < 1 || c % groups != 0) throw std::invalid_argument("group_norm: bad group count");
  if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c))
    throw std::invalid_argument("group_norm: affine size mismatch");
  const int cg = c / groups;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t m = static_cast<std::size_t>(cg) * plane;
  Tensor out = make_result(s);
  auto mu = std::make_shared<std::vector<double>>(groups);
  auto istd = std::make_shared<std::vector<double>>(groups);
  for (int g = 0; g < groups; ++g) {
    const double* xg = x.data() + static_cast<std::size_t>(g) * m;
    double s1 = 0.0;
    for (std::size_t i = 0; i < m; ++i) s1 += xg[i];
    const double mean_g = s1 / static_cast<double>(m);
    double s2 = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = xg[i] - mean_g;
      s2 += d * d;
    }
    const double inv = 1.0 / std::sqrt(s2 / static_cast<double>(m) + eps);
    (*mu)[g] = mean_g;
    (*istd)[g] = inv;
    double* og = out.data() + static_cast<std::size_t>(g) * m;
    for (int cc = 0; cc < cg; ++cc) {
      const double ga = gamma.data()[g * cg + cc];
      const double be = beta.data()[g * cg + cc];
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = static_cast<std::size_t>(cc) * plane + i;
        og[idx] = ga * (xg[idx] - mean_g) * inv + be;
      }
    }
  }
  attach(out, {&x, &gamma, &beta},
         [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), mu, istd, groups, cg, plane,
          m](TensorImpl& self) {
           for (int g = 0; g < groups; ++g) {
             const double* xg = xi->val.data() + static_cast<std::size_t>(g) * m;
             const double* dg = self.grad.data() + static_cast<std::size_t>(g) * m;
             const double mean_g = (*mu)[g];
             const double inv = (*istd)[g];
             // per-channel affine grads
             if (gi->requires_grad || bi->requires_grad) {
               gi->ensure_grad();
               bi->ensure_grad();
               for (int cc = 0; cc < cg; ++cc) {
                 double sg = 0.0, sb = 0.0;
                 for (std::size_t i = 0; i < plane; ++i) {
                   const std::size_t idx = static_cast<std::size_t>(cc) * plane + i;
                   sg += dg[idx] * (xg[idx] - mean_g) * inv;
                   sb += dg[idx];
                 }
                 gi->grad[g * cg + cc] += sg;
                 bi->grad[g * cg + cc] += sb;
               }
             }
             if (xi->requires_grad) {
               xi->ensure_grad();
               // dxhat = dy * gamma; reduce for mean/var terms
               double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
               for (int cc = 0; cc < cg; ++cc) {
                 const double ga = gi->val[g * cg + cc];
                 for (std::size_t i = 0; i < plane; ++i) {
                   const std::size_t idx = static_cast<std::size_t>(cc) * plane + i;
                   const double dxh = dg[idx] * ga;
                   sum_dxhat += dxh;
                   sum_dxhat_xhat += dxh * (xg[idx] - mean_g) * inv;
                 }
               }
               const double inv_m = 1.0 / static_cast<double>(m);
               double* xgr = xi->grad.data() + static_cast<std::size_t>(g) * m;
               for (int cc = 0; cc < cg; ++cc) {
                 const double ga = gi->val[g * cg + cc];
                 for (std::size_t i = 0; i < plane; ++i) {
                   const std::size_t idx = static_cast<std::size_t>(cc) * plane + i;
                   const double xhat = (xg[idx] - mean_g) * inv;
                   const double dxh = dg[idx] * ga;
                   xgr[idx] += inv * (dxh - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
                 }
               }
             }
           }
         });
  return out;
}

Tensor softmax_dim0(const Tensor& x) {
  const auto& s = x.shape();
  if (s.empty()) throw std::invalid_argument("softmax_dim0: empty shape");
  const int k = s[0];
  std::size_t cols = 1;
  for (std::size_t i = 1; i < s.size(); ++i) cols *= static_cast<std::size_t>(s[i]);
  Tensor out = make_result(s);
  for (std::size_t j = 0; j < cols; ++j) {
    double mx = -1e300;
    for (int i = 0; i < k; ++i) mx = std::max(mx, x.data()[i * cols + j]);
    double denom = 0.0;
    for (int i = 0; i < k; ++i) denom += std::exp(x.data()[i * cols + j] - mx);
    for (int i = 0; i < k; ++i) out.data()[i * cols + j] = std::exp(x.data()[i * cols + j] - mx) / denom;
  }
  attach(out, {&x}, [xi = x.impl(), oi = out.impl(), k, cols](TensorImpl& self) {
    xi->ensure_grad();
    for (std::size_t j = 0; j < cols; ++j) {
      double dot = 0.0;
      for (int i = 0; i < k; ++i) dot += self.grad[i * cols + j] * oi->val[i * cols + j];
      for (int i = 0; i < k; ++i) {
        const double p = oi->val[i * cols + j];
        xi->grad[i * cols + j] += p * (self.grad[i * cols + j] - dot);
      }
    }
  });
  return out;
}

Tensor masked_rowmax(const Tensor& x, const std::vector<int>& counts, int rows_per_group) {
  const auto& s = x.shape();
  if (s.size() != 2) throw std::invalid_argument("masked_rowmax: expects 2D");
  const int total_rows = s[0], c = s[1];
  if (rows_per_group <= 0 || total_rows % rows_per_group != 0)
    throw std::invalid_argument("masked_rowmax: bad rows_per_group");
  const int g = total_rows / rows_per_group;
  if (static_cast<int>(counts.size()) != g)
    throw std::invalid_argument("masked_rowmax: counts size mismatch");
  Tensor out = make_result({g, c});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(g) * c);
  for (int gi = 0; gi < g; ++gi) {
    const int n = counts[gi];
    if (n < 1 || n > rows_per_group) throw std::invalid_argument("masked_rowmax: bad count");
    for (int j = 0; j < c; ++j) {
      double best = x.data()[(static_cast<std::size_t>(gi) * rows_per_group) * c + j];
      int bi = 0;
      for (int r = 1; r < n; ++r) {
        const double v = x.data()[(static_cast<std::size_t>(gi) * rows_per_group + r) * c + j];
        if (v > best) {
          best = v;
          bi = r;
        }
      }
      out.data()[static_cast<std::size_t>(gi) * c + j] = best;
      (*argmax)[static_cast<std::size_t>(gi) * c + j] = bi;
    }
  }
  attach(out, {&x}, [xi = x.impl(), argmax, g, c, rows_per_group](TensorImpl& self) {
    xi->ensure_grad();
    for (int gi = 0; gi < g; ++gi)
      for (int j = 0; j < c; ++j) {
        const int r = (*argmax)[static_cast<std::size_t>(gi) * c + j];
        xi->grad[(static_cast<std::size_t>(gi) * rows_per_group + r) * c + j] +=
            self.grad[static_cast<std::size_t>(gi) * c + j];
      }
  });
  return out;
}

Tensor scatter_cells(const Tensor& x, const std::vector<int>& cells, int ny, int nx) {
  const auto& s = x.shape();
  if (s.size() != 2) throw std::invalid_argument("scatter_cells: expects (P,C)");
  const int p = s[0], c = s[1];
  if (static_cast<int>(cells.size()) != p)
    throw std::invalid_argument("scatter_cells: cell count mismatch");
  const std::size_t plane = static_cast<std::size_t>(ny) * nx;
  std::vector<char> used(plane, 0);
  for (int i = 0; i < p; ++i) {
    if (cells[i] < 0 || cells[i] >= static_cast<int>(plane))
      throw std::invalid_argument("scatter_cells: cell index out of range");
    if (used[cells[i]]) throw std::invalid_argument("scatter_cells: duplicate cell index");
    used[cells[i]] = 1;
  }
  Tensor out = make_result({c, ny, nx});
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < c; ++j)
      out.data()[static_cast<std::size_t>(j) * plane + cells[i]] =
          x.data()[static_cast<std::size_t>(i) * c + j];
  attach(out, {&x}, [xi = x.impl(), cells, p, c, plane](TensorImpl& self) {
    xi->ensure_grad();
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < c; ++j)
        xi->grad[static_cast<std::size_t>(i) * c + j] +=
            self.grad[static_cast<std::size_t>(j) * plane + cells[i]];
  });
  return out;
}

Tensor lift_splat(const Tensor& ctx, const Tensor& depth, const std::vector<int>& cells, int ny,
                  int nx) {
  const auto& cs = ctx.shape();
  const auto& ds = depth.shape();
  if (cs.size() != 3 || ds.size() != 3 || cs[1] != ds[1] || cs[2] != ds[2])
    throw std::invalid_argument("lift_splat: shape mismatch");
  const int cc = cs[0], d = ds[0];
  const std::size_t npix = static_cast<std::size_t>(cs[1]) * cs[2];
  if (cells.size() != static_cast<std::size_t>(d) * npix)
    throw std::invalid_argument("lift_splat: cell count mismatch");
  const std::size_t plane = static_cast<std::size_t>(ny) * nx;
  Tensor out = make_result({cc, ny, nx});
  for (int di = 0; di < d; ++di)
    for (std::size_t p = 0; p < npix; ++p) {
      const int cell = cells[di * npix + p];
      if (cell < 0) continue;
      const double dv = depth.data()[di * npix + p];
      for (int ch = 0; ch < cc; ++ch)
        out.data()[static_cast<std::size_t>(ch) * plane + cell] += ctx.data()[ch * npix + p] * dv;
    }
  attach(out, {&ctx, &depth},
         [ci = ctx.impl(), di_ = depth.impl(), cells, cc, d, npix, plane](TensorImpl& self) {
           if (ci->requires_grad) ci->ensure_grad();
           if (di_->requires_grad) di_->ensure_grad();
           for (int di = 0; di < d; ++di)
             for (std::size_t p = 0; p < npix; ++p) {
               const int cell = cells[di * npix + p];
               if (cell < 0) continue;
               const double dv = di_->val[di * npix + p];
               double ddepth = 0.0;
               for (int ch = 0; ch < cc; ++ch) {
                 const double g = self.grad[static_cast<std::size_t>(ch) * plane + cell];
                 if (ci->requires_grad) ci->grad[ch * npix + p] += g * dv;
                 ddepth += g * ci->val[ch * npix + p];
               }
               if (di_->requires_grad) di_->grad[di * npix + p] += ddepth;
             }
         });
  return out;
}

Tensor cross_entropy_cols(const Tensor& logits, const std::vector<int>& targets) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw std::invalid_argument("cross_entropy_cols: expects (K,M)");
  const int k = s[0], m = s[1];
  if (static_cast<int>(targets.size()) != m)
    throw std::invalid_argument("cross_entropy_cols: target count mismatch");
  int active = 0;
  double loss = 0.0;
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  for (int j = 0; j < m; ++j) {
    double mx = -1e300;
    for (int i = 0; i < k; ++i) mx = std::max(mx, logits.data()[static_cast<std::size_t>(i) * m + j]);
    double denom = 0.0;
    for (int i = 0; i < k; ++i) denom += std::exp(logits.data()[static_cast<std::size_t>(i) * m + j] - mx);
    const double logz = mx + std::log(denom);
    for (int i = 0; i < k; ++i)
      (*probs)[static_cast<std::size_t>(i) * m + j] =
          std::exp(logits.data()[static_cast<std::size_t>(i) * m + j] - logz);
    const int t = targets[j];
    if (t < 0) continue;
    if (t >= k) throw std::invalid_argument("cross_entropy_cols: target out of range");
    loss += logz - logits.data()[static_cast<std::size_t>(t) * m + j];
    ++active;
  }
  Tensor out = make_result({1});
  out.data()[0] = active > 0 ? loss / active : 0.0;
  attach(out, {&logits}, [li = logits.impl(), probs, targets, k, m, active](TensorImpl& self) {
    if (active == 0) return;
    li->ensure_grad();
    const double g = self.grad[0] / active;
    for (int j = 0; j < m; ++j) {
      const int t = targets[j];
      if (t < 0) continue;
      for (int i = 0; i < k; ++i) {
        const double p = (*probs)[static_cast<std::size_t>(i) * m + j];
        li->grad[static_cast<std::size_t>(i) * m + j] += g * (p - (i == t ? 1.0 : 0.0));
      }
    }
  });
  return out;
}

}  // namespace bevfuse::ad
