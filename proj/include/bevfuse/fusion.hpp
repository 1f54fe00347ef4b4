#pragma once

#include <vector>

#include "bevfuse/nn.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse::fusion {

struct UFFConfig {
  std::vector<int> modality_channels;  // input width per modality, camera first
  int unified_channels = 128;
  int fused_channels = 128;

  int num_modalities() const { return static_cast<int>(modality_channels.size()); }
  void validate() const;
};

// Channel unification, one shared residual encoder applied to every modality,
// per-cell softmax modality weighting with channel concatenation, and a
// width-projecting fused residual encoder.
class UFF : public nn::Module {
 public:
  UFF() = default;
  UFF(const UFFConfig& cfg, Rng& rng);

  // per-modality 1x1 projection to unified_channels
  ad::Tensor channel_unify(const ad::Tensor& feat, int modality_id) const;
  // out = feat + F(feat); F's parameters are shared across modalities
  ad::Tensor shared_encode(const ad::Tensor& feat) const;
  // per-cell softmax weights over the modality logits; each modality's
  // features scaled by its weight, then concatenated: (M*C_u, ny, nx)
  ad::Tensor softmax_concat_fuse(const std::vector<ad::Tensor>& feats) const;
  // width-projecting residual: out = P(feat) + G(feat)
  ad::Tensor fused_encode(const ad::Tensor& feat) const;

  // unify -> shared encode -> softmax fuse -> fused encode
  ad::Tensor forward(const std::vector<ad::Tensor>& feats) const;

  // per-cell modality weights (M, ny, nx); rows sum to 1
  ad::Tensor modality_weights(const std::vector<ad::Tensor>& unified) const;

  void collect_params(nn::ParamRegistry& reg, const std::string& prefix) override;

  UFFConfig cfg;
  std::vector<nn::Conv2d> unify;
  nn::ResidualBranch shared_branch;
  std::vector<nn::Conv2d> gate;
  nn::Conv2d fuse_proj;
  nn::ResidualBranch fuse_branch;
};

}  // namespace bevfuse::fusion
