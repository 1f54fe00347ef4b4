#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "bevfuse/geometry.hpp"
#include "bevfuse/nn.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse::radar {

// Per-point extra channels carried by a radar sensor, with the affine
// normalization applied before features enter any network:
// normalized = (raw - shift) * scale.
struct RadarSchema {
  std::string name;
  std::vector<std::string> extra_channels;
  std::vector<double> shift;
  std::vector<double> scale;

  int num_extras() const { return static_cast<int>(extra_channels.size()); }
  void validate() const;

  // [RCS dBsm, V_r m/s, V_r' m/s, t s]
  static RadarSchema vod();
  // [R m, RCS dBsm, alpha rad, beta rad]
  static RadarSchema tj4d();
  static RadarSchema by_name(const std::string& name);
};

struct RadarPointCloud {
  std::vector<Eigen::Vector3d> xyz;
  std::vector<double> extras;  // row-major (num_points, N), schema order
  RadarSchema schema;

  int num_points() const { return static_cast<int>(xyz.size()); }
  double extra(int point, int channel) const {
    return extras[static_cast<std::size_t>(point) * schema.num_extras() + channel];
  }
  void validate() const;
};

// Decorated pillar tensor. Rows are grouped per pillar: row p*max_points+i is
// point i of pillar p; rows past point_counts[p] are zero padding. Decoration
// width D = 3 (xyz) + N (normalized extras) + 3 (offset to pillar mean)
// + 2 (xy offset to cell center).
struct PillarBatch {
  ad::Tensor features;                     // (num_pillars * max_points, D)
  std::vector<std::pair<int, int>> coords;  // (iy, ix) per pillar
  std::vector<int> point_counts;
  int max_points = 0;
  int decoration_width = 0;

  int num_pillars() const { return static_cast<int>(coords.size()); }
};

// Groups in-range points into vertical columns. Pillars over the cap are
// dropped keeping the highest point counts (ties: row-major coordinate order);
// points over max_points are subsampled under a seed derived from `seed` and
// the pillar's cell. Output pillars are in row-major coordinate order.
PillarBatch pillarize(const RadarPointCloud& cloud, const geometry::BEVGridSpec& grid,
                      int max_points, int max_pillars, std::uint64_t seed);

// Shared per-point linear+ReLU, then max over each pillar's valid points.
class PillarFeatureNet : public nn::Module {
 public:
  PillarFeatureNet() = default;
  PillarFeatureNet(int in_width, int out_channels, Rng& rng);
  // (num_pillars, out_channels)
  ad::Tensor forward(const PillarBatch& batch) const;
  void collect_params(nn::ParamRegistry& reg, const std::string& prefix) override;

  nn::Linear lin;
};

// Places per-pillar feature rows at their cells of a zeroed (C, ny, nx) map.
ad::Tensor scatter_pillars(const ad::Tensor& features,
                           const std::vector<std::pair<int, int>>& coords,
                           const geometry::BEVGridSpec& grid);

// Radar BEV feature extraction over the pillar pseudo-image; output spatial
// size is input / 2.
using RadarBevEncoder = nn::BevBackbone;

}  // namespace bevfuse::radar
