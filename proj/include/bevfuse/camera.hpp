#pragma once

#include <cstdint>
#include <vector>

#include "bevfuse/geometry.hpp"
#include "bevfuse/nn.hpp"
#include "bevfuse/radar.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse::camera {

struct ImageEncoderConfig {
  std::vector<int> widths = {32, 64, 128, 128};
  std::vector<int> strides = {2, 2, 2, 1};

  int total_stride() const {
    int s = 1;
    for (int st : strides) s *= st;
    return s;
  }
  void validate() const;
};

// Strided convolutional image backbone; output is (widths.back(), H/stride,
// W/stride) for inputs divisible by the total stride.
class ImageEncoder : public nn::Module {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ImageEncoderConfig& cfg, Rng& rng);
  ad::Tensor forward(const ad::Tensor& image) const;
  void collect_params(nn::ParamRegistry& reg, const std::string& prefix) override;

  ImageEncoderConfig cfg;
  std::vector<nn::ConvBlock> blocks;
};

// Projected radar channels at feature resolution. Channel 0 holds the metric
// depth of the nearest radar point landing on each feature pixel (0 where
// none); channels 1..N hold that point's raw extras. Values are raw sensor
// units; normalization happens inside RadarDepthTransform.
struct RadarDepthMap {
  ad::Tensor channels;  // (N+1, h, w)
  std::vector<std::uint8_t> mask;
  int h = 0, w = 0;

  int num_extras() const { return channels.dim(0) - 1; }
};

RadarDepthMap build_radar_depth_map(const radar::RadarPointCloud& cloud,
                                    const geometry::CameraModel& cam, int feat_h, int feat_w,
                                    int stride);

// Pointwise learned widening of the projected radar channels from N+1 to
// exactly depth_feature_channels (64). Normalizes the raw channels first:
// depth / d_max, extras by the schema affine.
class RadarDepthTransform : public nn::Module {
 public:
  static constexpr int kDepthFeatureChannels = 64;

  RadarDepthTransform() = default;
  RadarDepthTransform(const radar::RadarSchema& schema, const geometry::DepthBinSpec& bins,
                      Rng& rng);
  ad::Tensor forward(const RadarDepthMap& map) const;
  void collect_params(nn::ParamRegistry& reg, const std::string& prefix) override;

  radar::RadarSchema schema;
  double depth_norm = 1.0;
  nn::Conv2d conv;
};

// Two heads over the image features: a per-pixel categorical depth
// distribution (conditioned on the radar depth features) and a context
// feature map (image-only).
class DepthContextHead : public nn::Module {
 public:
  DepthContextHead() = default;
  DepthContextHead(int image_channels, int radar_channels, int context_channels, int num_bins,
                   int hidden, Rng& rng);
  // returns {depth_dist (num_bins,h,w) softmaxed, context (C_ctx,h,w)}
  std::pair<ad::Tensor, ad::Tensor> forward(const ad::Tensor& img_feat,
                                            const ad::Tensor& radar_feat) const;
  ad::Tensor depth_logits(const ad::Tensor& img_feat, const ad::Tensor& radar_feat) const;
  void collect_params(nn::ParamRegistry& reg, const std::string& prefix) override;

  nn::ConvBlock depth_trunk;
  nn::Conv2d depth_out;
  nn::ConvBlock context_block;
  int num_bins = 0;
};

// Cross-entropy between predicted depth bins and the radar depth bin, over
// pixels with a radar hit whose depth falls inside the bin range.
ad::Tensor depth_supervision_loss(const ad::Tensor& depth_logits, const RadarDepthMap& map,
                                  const geometry::DepthBinSpec& bins);

}  // namespace bevfuse::camera
