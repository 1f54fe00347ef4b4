#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bevfuse/camera.hpp"
#include "bevfuse/detect.hpp"
#include "bevfuse/evaluation.hpp"
#include "bevfuse/fusion.hpp"
#include "bevfuse/geometry.hpp"
#include "bevfuse/radar.hpp"
#include "bevfuse/synth.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse::model {

// Channel widths between stages are derived inside the Model constructor
// (pfn -> radar backbone, context/radar -> fusion, fused -> bev -> head), so
// the config only carries the free knobs.
struct ModelConfig {
  geometry::CameraModel camera;
  geometry::BEVGridSpec grid;  // pillar grid; lifting and the head run on the half-resolution grid
  geometry::DepthBinSpec depth_bins;
  radar::RadarSchema schema;
  std::vector<detect::ClassSpec> classes;

  camera::ImageEncoderConfig image_encoder;
  int context_channels = 32;
  int depth_hidden = 48;

  int pillar_max_points = 20;
  int pillar_max_pillars = 1024;
  int pfn_channels = 32;
  nn::BevBackboneConfig radar_bev;

  int unified_channels = 64;
  int fused_channels = 64;
  nn::BevBackboneConfig bev_encoder;
  int head_hidden = 64;

  detect::LossWeights loss_weights;
  detect::FocalSpec focal;
  detect::DecodeConfig decode;

  // zeroes the projected radar depth channels, reducing the camera stream to
  // an image-only lift
  bool ablate_rdl = false;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ForwardResult {
  detect::HeadOutput head;
  ad::Tensor depth_logits;          // (num_bins, fh, fw)
  camera::RadarDepthMap depth_map;  // supervision targets for the depth head
  ad::Tensor cam_bev, radar_bev;    // pre-fusion modality features
};

class Model : public nn::Module {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config);

  ForwardResult forward(const ad::Tensor& image, const radar::RadarPointCloud& cloud,
                        std::uint64_t frame_key) const;
  detect::Losses losses(const ForwardResult& fwd, const std::vector<boxes::Box3D>& gt,
                        const detect::AnchorAssignment& assignment) const;
  std::vector<boxes::Box3D> detections(const ForwardResult& fwd) const;

  static std::uint64_t frame_key(const std::string& frame_id) { return fnv1a_str(frame_id); }

  void collect_params(nn::ParamRegistry& reg, const std::string& prefix) override;

  ModelConfig cfg;
  geometry::BEVGridSpec head_grid;
  detect::AnchorGrid anchors;
  int feat_h = 0, feat_w = 0;

  camera::ImageEncoder image_encoder;
  camera::RadarDepthTransform depth_transform;
  camera::DepthContextHead depth_context;
  radar::PillarFeatureNet pfn;
  radar::RadarBevEncoder radar_encoder;
  fusion::UFF uff;
  detect::BevEncoder bev_encoder;
  detect::DetectionHead head;

  // collected once at construction; registration order is the serialization
  // and update order
  nn::ParamRegistry params;

 private:
  std::vector<int> lift_cells_;  // frustum sample -> head-grid cell, cached
};

struct Sample {
  std::string id;
  ad::Tensor image;  // (3,H,W) in [0,1]
  radar::RadarPointCloud cloud;
  std::vector<boxes::Box3D> gt;
  std::uint64_t key = 0;
};

Sample make_sample(const synth::Frame& frame);

std::vector<boxes::Box3D> detect_sample(const Model& m, const Sample& s);

// Frame-at-a-time training: forward, backward, one Adam update per sample.
// Anchor assignments depend only on the ground truth, so they are computed
// once per frame and reused across epochs.
class Trainer {
 public:
  Trainer(Model* model, double lr);

  detect::Losses step(const Sample& s);
  // One optimizer update on the average loss over `batch` consecutive samples
  // of the shuffled stream. `total_steps` counts optimizer updates; `start`
  // picks up mid-stream after a checkpoint. The shuffle sequence and the
  // learning-rate schedule depend only on the model seed and the step index,
  // so a resumed run replays an uninterrupted one exactly.
  void fit(const std::vector<Sample>& samples, long total_steps,
           const std::function<void(long, const detect::Losses&)>& on_step = {}, long start = 0);

  Model* model;
  nn::Adam opt;
  int batch = 1;
  bool cosine_lr = false;
  long warmup_steps = 0;
  double base_lr;

 private:
  const detect::AnchorAssignment& assignment_for(const Sample& s);
  std::map<std::uint64_t, detect::AnchorAssignment> assignments_;
};

evaluation::MapResult evaluate_model(const Model& m, const std::vector<Sample>& samples,
                                     bool use_3d_iou);

}  // namespace bevfuse::model
