#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "bevfuse/tensor.hpp"

namespace bevfuse::geometry {

// Pinhole camera: intrinsics in pixels, extrinsics mapping ego -> camera
// (camera convention: x right, y down, z forward).
struct CameraModel {
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  Eigen::Matrix4d extrinsics = Eigen::Matrix4d::Identity();
  int height = 0;
  int width = 0;

  void validate() const;  // throws ConfigError on contract violations
  Eigen::Vector3d to_camera(const Eigen::Vector3d& p_ego) const;
  Eigen::Vector3d to_ego(const Eigen::Vector3d& p_cam) const;
};

// Metric BEV discretization. Cell (iy, ix) covers
// [y_min + iy*dy, ...) x [x_min + ix*dx, ...); lower edges inclusive.
struct BEVGridSpec {
  double x_min = 0, x_max = 0;
  double y_min = 0, y_max = 0;
  double z_min = 0, z_max = 0;
  double dx = 0, dy = 0;

  int nx() const { return static_cast<int>(std::llround((x_max - x_min) / dx)); }
  int ny() const { return static_cast<int>(std::llround((y_max - y_min) / dy)); }
  void validate() const;

  // Grid with doubled cell size; spatial extent is unchanged.
  BEVGridSpec coarser(int factor) const;
};

struct DepthBinSpec {
  double d_min = 0;
  double d_max = 0;
  int num_bins = 0;

  void validate() const;
  double bin_width() const { return (d_max - d_min) / num_bins; }
  double bin_center(int k) const { return d_min + (k + 0.5) * bin_width(); }
  // floor binning over [d_min, d_max); -1 if outside
  int bin_index(double depth) const {
    if (depth < d_min || depth >= d_max) return -1;
    int k = static_cast<int>((depth - d_min) / bin_width());
    return k >= num_bins ? num_bins - 1 : k;
  }
};

struct ProjectedPoint {
  double u = 0, v = 0, depth = 0;
  bool visible = false;
};

// Projects ego-frame points through the camera. Throws on non-finite input.
std::vector<ProjectedPoint> project_to_image(const std::vector<Eigen::Vector3d>& points,
                                             const CameraModel& camera);

// Ego-frame 3D point per (bin, row, col) of a feature grid. `offset` is the
// sub-pixel sample position within a feature cell: 0.5 samples pixel centers,
// 0 samples the top-left corner (which makes stride-doubling keep rays).
std::vector<Eigen::Vector3d> build_frustum(int feat_h, int feat_w, const DepthBinSpec& bins,
                                           const CameraModel& camera, int stride,
                                           double offset = 0.5);

std::optional<std::pair<int, int>> bev_cell_index(double x, double y, const BEVGridSpec& grid);

// Flat row-major cell index (iy*nx+ix) or -1 for each point; z filtering applies.
std::vector<int> bev_cell_of_points(const std::vector<Eigen::Vector3d>& points,
                                    const BEVGridSpec& grid);

// Sum-pools per-point feature rows (P,C) into a (C,ny,nx) map. In deterministic
// mode each cell's per-channel contributions are accumulated in ascending value
// order, which makes the result independent of input point order.
ad::Tensor splat_to_bev(const ad::Tensor& features, const std::vector<Eigen::Vector3d>& coords,
                        const BEVGridSpec& grid, bool deterministic = true);

}  // namespace bevfuse::geometry
