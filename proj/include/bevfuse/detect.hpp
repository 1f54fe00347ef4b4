#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bevfuse/boxes.hpp"
#include "bevfuse/geometry.hpp"
#include "bevfuse/nn.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse::detect {

struct ClassSpec {
  std::string name;
  double anchor_l = 0, anchor_w = 0, anchor_h = 0;
  double anchor_z = 0;  // anchor center height
  double match_thr = 0.5, unmatch_thr = 0.35;
  double iou_eval_thr = 0.5;  // used by the evaluator
};

// Dense anchor layout over the head grid: two yaws (0, pi/2) per class per
// cell. Flat anchor index a = j * (ny*nx) + iy*nx + ix with
// j = class_id * 2 + yaw_idx, matching the channel-major layout of the head's
// conv outputs.
struct AnchorGrid {
  geometry::BEVGridSpec grid;
  std::vector<ClassSpec> classes;
  static constexpr int kNumYaws = 2;

  int num_classes() const { return static_cast<int>(classes.size()); }
  int anchors_per_cell() const { return num_classes() * kNumYaws; }
  int num_anchors() const { return grid.ny() * grid.nx() * anchors_per_cell(); }
  boxes::Box3D anchor_box(int class_id, int yaw_idx, int iy, int ix) const;
  boxes::Box3D anchor_at(int flat_index) const;
  void validate() const;
};

// Diagonal-normalized box residuals relative to an anchor:
// (dx, dy, dz, dl, dw, dh, dyaw) with dx, dy over the anchor BEV diagonal,
// dz over the anchor height, log-ratio dims, and a wrapped yaw difference.
std::array<double, 7> encode_box(const boxes::Box3D& gt, const boxes::Box3D& anchor);
boxes::Box3D decode_box(const std::array<double, 7>& delta, const boxes::Box3D& anchor);

struct AnchorAssignment {
  std::vector<std::int8_t> label;  // 1 matched, 0 negative, -1 ignored
  std::vector<int> gt_index;      // valid where label == 1
  int num_matched = 0;
};

// IoU-threshold matching with per-ground-truth best-anchor forcing.
AnchorAssignment assign_anchors(const AnchorGrid& anchors,
                                const std::vector<boxes::Box3D>& gt);

struct HeadOutput {
  ad::Tensor cls;  // (J, ny, nx) one objectness logit per class/yaw anchor
  ad::Tensor reg;  // (7J, ny, nx), channel j*7+k
  ad::Tensor dir;  // (2J, ny, nx), channel j*2+d
};

struct DetectionHeadConfig {
  int in_channels = 128;
  int hidden = 128;
};

class DetectionHead : public nn::Module {
 public:
  DetectionHead() = default;
  DetectionHead(const DetectionHeadConfig& cfg, int anchors_per_cell, Rng& rng);
  HeadOutput forward(const ad::Tensor& bev_feat) const;
  void collect_params(nn::ParamRegistry& reg, const std::string& prefix) override;

  nn::ConvBlock trunk;
  nn::Conv2d cls_out, reg_out, dir_out;
};

// BEV-stage feature extraction at unchanged resolution: a strided two-stage
// backbone whose half-resolution output is upsampled back and refined.
class BevEncoder : public nn::Module {
 public:
  BevEncoder() = default;
  BevEncoder(const nn::BevBackboneConfig& cfg, Rng& rng);
  ad::Tensor forward(const ad::Tensor& fused) const;
  void collect_params(nn::ParamRegistry& reg, const std::string& prefix) override;

  nn::BevBackbone backbone;
  nn::ConvBlock refine;
};

struct LossWeights {
  double cls = 1.0;
  double reg = 2.0;
  double dir = 0.2;
  double depth_aux = 0.05;
};

// focal focusing exponent is fixed at 2
struct FocalSpec {
  double alpha = 0.25;
  double smooth_l1_beta = 1.0 / 9.0;
};

struct Losses {
  ad::Tensor cls, reg, dir, depth_aux, total;
};

// Focal classification over matched/negative anchors, smooth-L1 regression
// and direction cross-entropy over matched anchors only. depth_aux is an
// optional externally computed term folded into the weighted total.
Losses compute_losses(const HeadOutput& out, const std::vector<boxes::Box3D>& gt,
                      const AnchorGrid& anchors, const AnchorAssignment& assignment,
                      const LossWeights& weights, const FocalSpec& focal,
                      std::optional<ad::Tensor> depth_aux = std::nullopt);

struct DecodeConfig {
  double score_thr = 0.1;
  int pre_nms = 512;
  double nms_iou = 0.3;
  int max_dets = 100;
};

// Sigmoid scores, thresholding, box decoding, then greedy rotated-BEV NMS.
// Survivors are sorted by descending score.
std::vector<boxes::Box3D> decode_and_nms(const HeadOutput& out, const AnchorGrid& anchors,
                                         const DecodeConfig& cfg);

}  // namespace bevfuse::detect
