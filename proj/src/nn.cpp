#include "bevfuse/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace bevfuse::nn {

int norm_groups_for(int channels, int limit) {
  for (int g = std::min(limit, channels); g >= 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

void init_kaiming(ad::Tensor& w, int fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : w.values()) v = rng.normal(0.0, std);
}

void init_constant(ad::Tensor& t, double v) {
  for (double& x : t.values()) x = v;
}

Linear::Linear(int in, int out, Rng& rng) : in_features(in), out_features(out) {
  w = ad::Tensor({out, in}, true);
  b = ad::Tensor({out}, true);
  init_kaiming(w, in, rng);
}

void Linear::collect_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".w", w);
  reg.add(prefix + ".b", b);
}

Conv2d::Conv2d(int cin, int cout, int k, int stride_, int pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  w = ad::Tensor({cout, cin, k, k}, true);
  b = ad::Tensor({cout}, true);
  init_kaiming(w, cin * k * k, rng);
}

void Conv2d::collect_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".w", w);
  reg.add(prefix + ".b", b);
}

GroupNorm::GroupNorm(int channels) : groups(norm_groups_for(channels)) {
  gamma = ad::Tensor({channels}, true);
  beta = ad::Tensor({channels}, true);
  init_constant(gamma, 1.0);
}

void GroupNorm::collect_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".gamma", gamma);
  reg.add(prefix + ".beta", beta);
}

ConvBlock::ConvBlock(int cin, int cout, int k, int stride, Rng& rng)
    : conv(cin, cout, k, stride, k / 2, rng), norm(cout) {}

ad::Tensor ConvBlock::forward(const ad::Tensor& x) const {
  return ad::relu(norm.forward(conv.forward(x)));
}

void ConvBlock::collect_params(ParamRegistry& reg, const std::string& prefix) {
  conv.collect_params(reg, prefix + ".conv");
  norm.collect_params(reg, prefix + ".norm");
}

ResidualBranch::ResidualBranch(int cin, int cout, Rng& rng)
    : norm1(cin),
      norm2(std::max(1, cin / 2)),
      reduce(cin, std::max(1, cin / 2), 1, 1, 0, rng),
      expand(std::max(1, cin / 2), cout, 3, 1, 1, rng) {
  // zeroed last conv: the branch starts silent, so residual stages begin as
  // the identity (or the plain projection) and training perturbs from there
  init_constant(expand.w, 0.0);
  init_constant(expand.b, 0.0);
}

ad::Tensor ResidualBranch::forward(const ad::Tensor& x) const {
  ad::Tensor h = reduce.forward(ad::relu(norm1.forward(x)));
  return expand.forward(ad::relu(norm2.forward(h)));
}

void ResidualBranch::collect_params(ParamRegistry& reg, const std::string& prefix) {
  norm1.collect_params(reg, prefix + ".norm1");
  reduce.collect_params(reg, prefix + ".reduce");
  norm2.collect_params(reg, prefix + ".norm2");
  expand.collect_params(reg, prefix + ".expand");
}

BevBackbone::BevBackbone(const BevBackboneConfig& c, Rng& rng) : cfg(c) {
  if (cfg.out_channels % 2 != 0)
    throw std::invalid_argument("BevBackbone out_channels must be even");
  stage1.emplace_back(cfg.in_channels, cfg.stage1_channels, 3, 2, rng);
  for (int i = 1; i < cfg.convs_per_stage; ++i)
    stage1.emplace_back(cfg.stage1_channels, cfg.stage1_channels, 3, 1, rng);
  stage2.emplace_back(cfg.stage1_channels, cfg.stage2_channels, 3, 2, rng);
  for (int i = 1; i < cfg.convs_per_stage; ++i)
    stage2.emplace_back(cfg.stage2_channels, cfg.stage2_channels, 3, 1, rng);
  const int half = cfg.out_channels / 2;
  lateral = ConvBlock(cfg.stage1_channels, half, 3, 1, rng);
  top = ConvBlock(cfg.stage2_channels, half, 3, 1, rng);
}

ad::Tensor BevBackbone::forward(const ad::Tensor& x) const {
  ad::Tensor h = x;
  for (const auto& blk : stage1) h = blk.forward(h);
  ad::Tensor s1 = h;
  for (const auto& blk : stage2) h = blk.forward(h);
  ad::Tensor up = ad::upsample2_nearest(h);
  return ad::concat_channel({lateral.forward(s1), top.forward(up)});
}

void BevBackbone::collect_params(ParamRegistry& reg, const std::string& prefix) {
  for (std::size_t i = 0; i < stage1.size(); ++i)
    stage1[i].collect_params(reg, prefix + ".s1." + std::to_string(i));
  for (std::size_t i = 0; i < stage2.size(); ++i)
    stage2[i].collect_params(reg, prefix + ".s2." + std::to_string(i));
  lateral.collect_params(reg, prefix + ".lateral");
  top.collect_params(reg, prefix + ".top");
}

Adam::Adam(ParamRegistry* params, double lr_, double beta1, double beta2, double eps)
    : lr(lr_), params_(params), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.resize(params_->items.size());
  v_.resize(params_->items.size());
  for (std::size_t i = 0; i < params_->items.size(); ++i) {
    m_[i].assign(params_->items[i].second.numel(), 0.0);
    v_[i].assign(params_->items[i].second.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_->items.size(); ++i) {
    ad::Tensor& p = params_->items[i].second;
    if (!p.has_grad()) continue;
    const auto& g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    double* val = p.data();
    for (std::size_t j = 0; j < g.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      val[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

std::vector<double> Adam::export_state() const {
  std::vector<double> flat;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    flat.insert(flat.end(), m_[i].begin(), m_[i].end());
    flat.insert(flat.end(), v_[i].begin(), v_[i].end());
  }
  return flat;
}

void Adam::import_state(const std::vector<double>& flat, long step_count) {
  std::size_t off = 0;
  for (std::size_t i = 0; i < m_.size(); ++i) {
    const std::size_t n = m_[i].size();
    if (off + 2 * n > flat.size()) throw std::invalid_argument("Adam state size mismatch");
    std::copy(flat.begin() + off, flat.begin() + off + n, m_[i].begin());
    off += n;
    std::copy(flat.begin() + off, flat.begin() + off + n, v_[i].begin());
    off += n;
  }
  if (off != flat.size()) throw std::invalid_argument("Adam state size mismatch");
  t_ = step_count;
}

}  // namespace bevfuse::nn
