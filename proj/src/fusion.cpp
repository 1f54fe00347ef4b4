#include "bevfuse/fusion.hpp"

#include "bevfuse/common.hpp"

namespace bevfuse::fusion {

void UFFConfig::validate() const {
  if (num_modalities() < 2) throw ConfigError("fusion needs at least two modalities");
  for (int c : modality_channels)
    if (c < 1) throw ConfigError("modality channel width must be >= 1");
  if (unified_channels < 1 || fused_channels < 1)
    throw ConfigError("fusion channel widths must be >= 1");
}

UFF::UFF(const UFFConfig& c, Rng& rng) : cfg(c) {
  cfg.validate();
  for (int cm : cfg.modality_channels) {
    unify.emplace_back(cm, cfg.unified_channels, 1, 1, 0, rng);
    gate.emplace_back(cfg.unified_channels, 1, 1, 1, 0, rng);
  }
  shared_branch = nn::ResidualBranch(cfg.unified_channels, cfg.unified_channels, rng);
  const int cat = cfg.num_modalities() * cfg.unified_channels;
  fuse_proj = nn::Conv2d(cat, cfg.fused_channels, 1, 1, 0, rng);
  fuse_branch = nn::ResidualBranch(cat, cfg.fused_channels, rng);
}

ad::Tensor UFF::channel_unify(const ad::Tensor& feat, int modality_id) const {
  if (modality_id < 0 || modality_id >= cfg.num_modalities())
    throw ConfigError("unknown modality id");
  if (feat.dim(0) != cfg.modality_channels[modality_id])
    throw ConfigError("modality feature width mismatch");
  return unify[modality_id].forward(feat);
}

ad::Tensor UFF::shared_encode(const ad::Tensor& feat) const {
  if (feat.dim(0) != cfg.unified_channels)
    throw ConfigError("shared encoder input width mismatch");
  return ad::add(feat, shared_branch.forward(feat));
}

ad::Tensor UFF::modality_weights(const std::vector<ad::Tensor>& unified) const {
  std::vector<ad::Tensor> logits;
  logits.reserve(unified.size());
  for (std::size_t m = 0; m < unified.size(); ++m)
    logits.push_back(gate[m].forward(unified[m]));
  return ad::softmax_dim0(ad::concat_channel(logits));
}

ad::Tensor UFF::softmax_concat_fuse(const std::vector<ad::Tensor>& feats) const {
  const int M = cfg.num_modalities();
  if (static_cast<int>(feats.size()) != M) throw ConfigError("modality count mismatch");
  for (const auto& f : feats)
    if (f.dim(0) != cfg.unified_channels) throw ConfigError("fusion input width mismatch");
  ad::Tensor weights = modality_weights(feats);
  std::vector<ad::Tensor> scaled;
  scaled.reserve(feats.size());
  for (int m = 0; m < M; ++m)
    scaled.push_back(ad::mul_spatial(feats[m], ad::gather_channels(weights, {m})));
  return ad::concat_channel(scaled);
}

ad::Tensor UFF::fused_encode(const ad::Tensor& feat) const {
  if (feat.dim(0) != cfg.num_modalities() * cfg.unified_channels)
    throw ConfigError("fused encoder input width mismatch");
  return ad::add(fuse_proj.forward(feat), fuse_branch.forward(feat));
}

ad::Tensor UFF::forward(const std::vector<ad::Tensor>& feats) const {
  const int M = cfg.num_modalities();
  if (static_cast<int>(feats.size()) != M) throw ConfigError("modality count mismatch");
  std::vector<ad::Tensor> encoded;
  encoded.reserve(feats.size());
  for (int m = 0; m < M; ++m) encoded.push_back(shared_encode(channel_unify(feats[m], m)));
  return fused_encode(softmax_concat_fuse(encoded));
}

void UFF::collect_params(nn::ParamRegistry& reg, const std::string& prefix) {
  for (std::size_t m = 0; m < unify.size(); ++m)
    unify[m].collect_params(reg, prefix + ".unify." + std::to_string(m));
  shared_branch.collect_params(reg, prefix + ".shared");
  for (std::size_t m = 0; m < gate.size(); ++m)
    gate[m].collect_params(reg, prefix + ".gate." + std::to_string(m));
  fuse_proj.collect_params(reg, prefix + ".fuse_proj");
  fuse_branch.collect_params(reg, prefix + ".fuse_branch");
}

}  // namespace bevfuse::fusion
