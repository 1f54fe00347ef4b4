#pragma once

#include <map>
#include <string>
#include <vector>

#include "bevfuse/rng.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse::nn {

// Ordered bag of named parameters. Order of registration defines the
// serialization and optimizer-update order, so it is part of determinism.
struct ParamRegistry {
  std::vector<std::pair<std::string, ad::Tensor>> items;

  void add(const std::string& name, const ad::Tensor& t) { items.emplace_back(name, t); }
  ad::Tensor* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }
  void zero_grad() {
    for (auto& [name, t] : items) t.zero_grad();
  }
};

class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_params(ParamRegistry& reg, const std::string& prefix) = 0;
};

// Largest divisor of c that is <= limit; used to pick group-norm groups.
int norm_groups_for(int channels, int limit = 8);

void init_kaiming(ad::Tensor& w, int fan_in, Rng& rng);
void init_constant(ad::Tensor& t, double v);

class Linear : public Module {
 public:
  Linear() = default;
  Linear(int in, int out, Rng& rng);
  ad::Tensor forward(const ad::Tensor& x) const { return ad::linear(x, w, b); }
  void collect_params(ParamRegistry& reg, const std::string& prefix) override;
  ad::Tensor w, b;
  int in_features = 0, out_features = 0;
};

class Conv2d : public Module {
 public:
  Conv2d() = default;
  Conv2d(int cin, int cout, int k, int stride, int pad, Rng& rng);
  ad::Tensor forward(const ad::Tensor& x) const { return ad::conv2d(x, w, b, stride, pad); }
  void collect_params(ParamRegistry& reg, const std::string& prefix) override;
  ad::Tensor w, b;
  int stride = 1, pad = 0;
};

class GroupNorm : public Module {
 public:
  GroupNorm() = default;
  explicit GroupNorm(int channels);
  ad::Tensor forward(const ad::Tensor& x) const {
    return ad::group_norm(x, gamma, beta, groups);
  }
  void collect_params(ParamRegistry& reg, const std::string& prefix) override;
  ad::Tensor gamma, beta;
  int groups = 1;
};

// conv -> group norm -> relu
class ConvBlock : public Module {
 public:
  ConvBlock() = default;
  ConvBlock(int cin, int cout, int k, int stride, Rng& rng);
  ad::Tensor forward(const ad::Tensor& x) const;
  void collect_params(ParamRegistry& reg, const std::string& prefix) override;
  Conv2d conv;
  GroupNorm norm;
};

// Pre-activation residual branch: GN-ReLU-1x1(C->C/2)-GN-ReLU-3x3(C/2->Cout).
// Zeroing the final conv makes the branch output exactly zero.
class ResidualBranch : public Module {
 public:
  ResidualBranch() = default;
  ResidualBranch(int cin, int cout, Rng& rng);
  ad::Tensor forward(const ad::Tensor& x) const;
  void collect_params(ParamRegistry& reg, const std::string& prefix) override;
  GroupNorm norm1, norm2;
  Conv2d reduce, expand;
};

struct BevBackboneConfig {
  int in_channels = 64;
  int stage1_channels = 64;
  int stage2_channels = 128;
  int convs_per_stage = 2;
  int out_channels = 128;
};

// Two strided conv stages plus an upsample-concat neck. Output is
// (out_channels, H/2, W/2) for even inputs.
class BevBackbone : public Module {
 public:
  BevBackbone() = default;
  BevBackbone(const BevBackboneConfig& cfg, Rng& rng);
  ad::Tensor forward(const ad::Tensor& x) const;
  void collect_params(ParamRegistry& reg, const std::string& prefix) override;

  BevBackboneConfig cfg;
  std::vector<ConvBlock> stage1, stage2;
  ConvBlock lateral, top;
};

// Adam with bias correction; state is serializable for resumable training.
class Adam {
 public:
  Adam(ParamRegistry* params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step();
  void zero_grad() { params_->zero_grad(); }
  long step_count() const { return t_; }

  // flat state access for checkpointing
  std::vector<double> export_state() const;
  void import_state(const std::vector<double>& flat, long step_count);

  double lr;

 private:
  ParamRegistry* params_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace bevfuse::nn
