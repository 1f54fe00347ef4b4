#include "bevfuse/camera.hpp"

#include <cmath>

#include "bevfuse/common.hpp"

namespace bevfuse::camera {

void ImageEncoderConfig::validate() const {
  if (widths.empty() || widths.size() != strides.size())
    throw ConfigError("image encoder widths/strides mismatch");
  for (int w : widths)
    if (w < 1) throw ConfigError("image encoder width must be >= 1");
  for (int s : strides)
    if (s != 1 && s != 2) throw ConfigError("image encoder strides must be 1 or 2");
}

ImageEncoder::ImageEncoder(const ImageEncoderConfig& c, Rng& rng) : cfg(c) {
  cfg.validate();
  int cin = 3;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    blocks.emplace_back(cin, cfg.widths[i], 3, cfg.strides[i], rng);
    blocks.emplace_back(cfg.widths[i], cfg.widths[i], 3, 1, rng);
    cin = cfg.widths[i];
  }
}

ad::Tensor ImageEncoder::forward(const ad::Tensor& image) const {
  const auto& s = image.shape();
  if (s.size() != 3 || s[0] != 3) throw ConfigError("image encoder expects a (3,H,W) input");
  const int stride = cfg.total_stride();
  if (s[1] % stride != 0 || s[2] % stride != 0)
    throw ConfigError("image size not divisible by encoder stride");
  ad::Tensor x = image;
  for (const auto& blk : blocks) x = blk.forward(x);
  return x;
}

void ImageEncoder::collect_params(nn::ParamRegistry& reg, const std::string& prefix) {
  for (std::size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect_params(reg, prefix + ".b" + std::to_string(i));
}

RadarDepthMap build_radar_depth_map(const radar::RadarPointCloud& cloud,
                                    const geometry::CameraModel& cam, int feat_h, int feat_w,
                                    int stride) {
  if (cam.height != feat_h * stride || cam.width != feat_w * stride)
    throw ConfigError("feature size inconsistent with camera size and stride");
  const int N = cloud.schema.num_extras();
  RadarDepthMap map;
  map.h = feat_h;
  map.w = feat_w;
  map.channels = ad::Tensor(std::vector<int>{N + 1, feat_h, feat_w}, false);
  map.mask.assign(static_cast<std::size_t>(feat_h) * feat_w, 0);

  auto proj = geometry::project_to_image(cloud.xyz, cam);
  const std::size_t plane = static_cast<std::size_t>(feat_h) * feat_w;
  for (int i = 0; i < cloud.num_points(); ++i) {
    if (!proj[i].visible) continue;
    const int px = static_cast<int>(proj[i].u) / stride;
    const int py = static_cast<int>(proj[i].v) / stride;
    const std::size_t at = static_cast<std::size_t>(py) * feat_w + px;
    const double prev = map.channels.data()[at];
    if (map.mask[at] && prev <= proj[i].depth) continue;
    map.mask[at] = 1;
    map.channels.data()[at] = proj[i].depth;
    for (int c = 0; c < N; ++c) map.channels.data()[(c + 1) * plane + at] = cloud.extra(i, c);
  }
  return map;
}

RadarDepthTransform::RadarDepthTransform(const radar::RadarSchema& sch,
                                         const geometry::DepthBinSpec& bins, Rng& rng)
    : schema(sch), depth_norm(bins.d_max) {
  schema.validate();
  const int in = schema.num_extras() + 1;
  conv = nn::Conv2d(in, kDepthFeatureChannels, 1, 1, 0, rng);
}

ad::Tensor RadarDepthTransform::forward(const RadarDepthMap& map) const {
  const int N = schema.num_extras();
  if (map.channels.dim(0) != N + 1)
    throw ConfigError("radar depth map width does not match schema");
  const std::size_t plane = static_cast<std::size_t>(map.h) * map.w;

  ad::Tensor shift(std::vector<int>{N + 1, map.h, map.w}, false);
  ad::Tensor scale(std::vector<int>{N + 1, map.h, map.w}, false);
  for (std::size_t i = 0; i < plane; ++i) {
    shift.data()[i] = 0.0;
    scale.data()[i] = 1.0 / depth_norm;
  }
  for (int c = 0; c < N; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      // keep no-data pixels exactly zero instead of shifting them off-origin
      const bool hit = map.mask[i] != 0;
      shift.data()[(c + 1) * plane + i] = hit ? schema.shift[c] : 0.0;
      scale.data()[(c + 1) * plane + i] = hit ? schema.scale[c] : 0.0;
    }
  }
  ad::Tensor normalized = ad::mul(ad::sub(map.channels, shift), scale);
  return ad::relu(conv.forward(normalized));
}

void RadarDepthTransform::collect_params(nn::ParamRegistry& reg, const std::string& prefix) {
  conv.collect_params(reg, prefix + ".conv");
}

DepthContextHead::DepthContextHead(int image_channels, int radar_channels, int context_channels,
                                   int bins, int hidden, Rng& rng)
    : num_bins(bins) {
  depth_trunk = nn::ConvBlock(image_channels + radar_channels, hidden, 3, 1, rng);
  depth_out = nn::Conv2d(hidden, num_bins, 1, 1, 0, rng);
  context_block = nn::ConvBlock(image_channels, context_channels, 3, 1, rng);
}

ad::Tensor DepthContextHead::depth_logits(const ad::Tensor& img_feat,
                                          const ad::Tensor& radar_feat) const {
  if (img_feat.dim(1) != radar_feat.dim(1) || img_feat.dim(2) != radar_feat.dim(2))
    throw ConfigError("image and radar feature maps have different spatial sizes");
  ad::Tensor x = ad::concat_channel({img_feat, radar_feat});
  return depth_out.forward(depth_trunk.forward(x));
}

std::pair<ad::Tensor, ad::Tensor> DepthContextHead::forward(const ad::Tensor& img_feat,
                                                            const ad::Tensor& radar_feat) const {
  ad::Tensor depth = ad::softmax_dim0(depth_logits(img_feat, radar_feat));
  ad::Tensor context = context_block.forward(img_feat);
  return {depth, context};
}

void DepthContextHead::collect_params(nn::ParamRegistry& reg, const std::string& prefix) {
  depth_trunk.collect_params(reg, prefix + ".depth_trunk");
  depth_out.collect_params(reg, prefix + ".depth_out");
  context_block.collect_params(reg, prefix + ".context");
}

ad::Tensor depth_supervision_loss(const ad::Tensor& depth_logits, const RadarDepthMap& map,
                                  const geometry::DepthBinSpec& bins) {
  const int h = map.h, w = map.w;
  if (depth_logits.dim(1) != h || depth_logits.dim(2) != w)
    throw ConfigError("depth logits do not match radar map size");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<int> targets(plane, -1);
  for (std::size_t i = 0; i < plane; ++i)
    if (map.mask[i]) targets[i] = bins.bin_index(map.channels.data()[i]);
  ad::Tensor flat = ad::reshape(depth_logits, {depth_logits.dim(0), static_cast<int>(plane)});
  return ad::cross_entropy_cols(flat, targets);
}

}  // namespace bevfuse::camera
