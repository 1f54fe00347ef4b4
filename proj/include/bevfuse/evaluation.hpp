#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bevfuse/boxes.hpp"
#include "bevfuse/geometry.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse::evaluation {

struct NoiseSpec {
  double rho = 0.0;
  double sigma = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

// Pre-clamp additive noise samples rho * N(0, sigma^2), in draw order.
std::vector<double> noise_field(std::size_t count, const NoiseSpec& spec);

// out = clamp(image + rho * N(0, sigma^2), 0, 1), i.i.d. per element under
// the seed. rho == 0 returns a bit-identical copy without consuming the RNG.
ad::Tensor inject_noise(const ad::Tensor& image, const NoiseSpec& spec);

struct EvalFrame {
  std::vector<boxes::Box3D> dets;
  std::vector<boxes::Box3D> gts;
  std::string frame_id;
};

struct EvalConfig {
  std::map<int, double> iou_thresholds;  // per class id
  int interp_points = 40;

  void validate() const;
};

// Interpolated average precision for one class over pooled frames: greedy
// per-frame matching in descending score order, each ground truth matched at
// most once, precision interpolated at `interp_points` recall positions.
double average_precision(const std::vector<EvalFrame>& frames, double iou_thr, int class_id,
                         int interp_points = 40, bool use_3d_iou = false);

struct MapResult {
  double map = 0.0;
  std::map<int, double> per_class;
  std::vector<int> skipped_classes;  // no ground truth of this class anywhere
};

MapResult evaluate_map(const std::vector<EvalFrame>& frames, const EvalConfig& cfg,
                       bool use_3d_iou = false);

// Camera-frame driving corridor: keeps boxes whose center maps to
// |x_cam| <= lateral_max and z_cam <= forward_max.
struct RoiSpec {
  double lateral_max = 4.0;
  double forward_max = 25.0;
};

std::vector<boxes::Box3D> roi_filter(const std::vector<boxes::Box3D>& boxes_ego,
                                     const RoiSpec& roi, const geometry::CameraModel& cam);

struct FTConfig {
  std::vector<double> rho_list{0.0, 0.5, 0.7, 0.9};
  int runs = 10;
  double sigma = 0.1;
  std::uint64_t base_seed = 0;

  void validate() const;
};

struct FTCell {
  double rho = 0.0;
  double mean_map = 0.0;
  double std_map = 0.0;  // sample std over runs (0 when runs == 1)
  std::map<int, double> mean_class_ap;
};

struct FTReport {
  FTConfig cfg;
  std::vector<FTCell> cells;
};

// Noise-injection robustness sweep. For each (rho index i, run r, frame f)
// the noise seed is derive(base_seed, "ft", {i, r, f}), so results are
// independent of evaluation order. `model` maps (frame index, image) to
// detections; ground truths and clean images are fixed inputs.
FTReport failure_test(const std::vector<ad::Tensor>& images,
                      const std::vector<std::vector<boxes::Box3D>>& gts,
                      const std::function<std::vector<boxes::Box3D>(int, const ad::Tensor&)>& model,
                      const EvalConfig& eval_cfg, const FTConfig& ft);

// `config_hex` (when nonempty) is embedded as a "# config ..." comment line
// in CSVs and a "config" field in JSON.
void write_ft_csv(const std::string& path, const FTReport& report,
                  const std::vector<std::string>& class_names, const std::string& config_hex = "");
void write_ft_json(const std::string& path, const FTReport& report,
                   const std::vector<std::string>& class_names, const std::string& config_hex = "");

// Per-frame detection records, one per line: "class score x y z l w h yaw",
// full double precision, '#' comment lines ignored.
void write_detections(const std::string& path, const std::vector<boxes::Box3D>& dets);
std::vector<boxes::Box3D> read_detections(const std::string& path);

struct SweepRow {
  double scale = 1.0;
  int img_h = 0, img_w = 0;
  bool rdl = false;
  double map_3d = 0.0, delta_3d_pct = 0.0;
  double map_bev = 0.0, delta_bev_pct = 0.0;
};

// Runs train_eval(h, w, rdl_on) -> (mAP_3d, mAP_bev) for every scale with
// RDL off then on; image sizes are the full size scaled and snapped down to a
// stride multiple. Delta columns are percent change against the same-scale
// RDL-off row, which itself reads exactly 0.0.
std::vector<SweepRow> sweep_resolution(
    const std::vector<double>& scales, int full_h, int full_w, int stride,
    const std::function<std::pair<double, double>(int, int, bool)>& train_eval);

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows,
                     const std::string& config_hex = "");

}  // namespace bevfuse::evaluation
