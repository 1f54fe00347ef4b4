#include "bevfuse/radar.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "bevfuse/common.hpp"

namespace bevfuse::radar {

void RadarSchema::validate() const {
  if (extra_channels.empty()) throw ConfigError("radar schema needs at least one extra channel");
  for (std::size_t i = 0; i < extra_channels.size(); ++i)
    for (std::size_t j = i + 1; j < extra_channels.size(); ++j)
      if (extra_channels[i] == extra_channels[j])
        throw ConfigError("duplicate radar channel name: " + extra_channels[i]);
  if (shift.size() != extra_channels.size() || scale.size() != extra_channels.size())
    throw ConfigError("radar schema normalization width mismatch");
}

RadarSchema RadarSchema::vod() {
  RadarSchema s;
  s.name = "vod";
  s.extra_channels = {"rcs", "v_r", "v_r_comp", "time"};
  // RCS spans roughly [-30, 20] dBsm; velocities a few m/s; time near zero
  s.shift = {-5.0, 0.0, 0.0, 0.0};
  s.scale = {1.0 / 25.0, 1.0 / 8.0, 1.0 / 8.0, 1.0};
  return s;
}

RadarSchema RadarSchema::tj4d() {
  RadarSchema s;
  s.name = "tj4d";
  s.extra_channels = {"range", "rcs", "azimuth", "elevation"};
  s.shift = {35.0, -5.0, 0.0, 0.0};
  s.scale = {1.0 / 35.0, 1.0 / 25.0, 1.0 / 1.6, 1.0 / 1.6};
  return s;
}

RadarSchema RadarSchema::by_name(const std::string& name) {
  if (name == "vod") return vod();
  if (name == "tj4d") return tj4d();
  throw ConfigError("unknown radar schema: " + name);
}

void RadarPointCloud::validate() const {
  schema.validate();
  const std::size_t n = xyz.size();
  if (extras.size() != n * schema.num_extras())
    throw ConfigError("radar cloud extras width mismatch");
  for (const auto& p : xyz)
    if (!p.allFinite()) throw ConfigError("non-finite radar point");
  for (double e : extras)
    if (!std::isfinite(e)) throw ConfigError("non-finite radar extra channel");
}

PillarBatch pillarize(const RadarPointCloud& cloud, const geometry::BEVGridSpec& grid,
                      int max_points, int max_pillars, std::uint64_t seed) {
  if (max_points < 1 || max_pillars < 1) throw ConfigError("pillar caps must be >= 1");
  grid.validate();
  cloud.validate();

  const int N = cloud.schema.num_extras();
  const int D = 8 + N;
  auto cells = geometry::bev_cell_of_points(cloud.xyz, grid);

  // group point indices by cell, preserving input order
  std::map<int, std::vector<int>> groups;
  for (int i = 0; i < cloud.num_points(); ++i)
    if (cells[i] >= 0) groups[cells[i]].push_back(i);

  // cap on pillar count: keep the fullest, ties to lower row-major cell
  std::vector<int> kept_cells;
  kept_cells.reserve(groups.size());
  for (const auto& [cell, idx] : groups) kept_cells.push_back(cell);
  if (static_cast<int>(kept_cells.size()) > max_pillars) {
    std::sort(kept_cells.begin(), kept_cells.end(), [&](int a, int b) {
      const std::size_t na = groups[a].size(), nb = groups[b].size();
      if (na != nb) return na > nb;
      return a < b;
    });
    kept_cells.resize(max_pillars);
    std::sort(kept_cells.begin(), kept_cells.end());
  }

  PillarBatch batch;
  batch.max_points = max_points;
  batch.decoration_width = D;
  const int P = static_cast<int>(kept_cells.size());
  batch.features = ad::Tensor(std::vector<int>{P * max_points, D}, false);
  batch.coords.reserve(P);
  batch.point_counts.reserve(P);

  const int nx = grid.nx();
  for (int p = 0; p < P; ++p) {
    const int cell = kept_cells[p];
    std::vector<int>& idx = groups[cell];
    if (static_cast<int>(idx.size()) > max_points) {
      Rng rng(derive_seed(seed, "pillar_subsample", {static_cast<std::uint64_t>(cell)}));
      // partial Fisher-Yates, then restore input order among the kept
      for (int i = 0; i < max_points; ++i) {
        const std::size_t j = i + rng.uniform_index(idx.size() - i);
        std::swap(idx[i], idx[j]);
      }
      idx.resize(max_points);
      std::sort(idx.begin(), idx.end());
    }
    const int count = static_cast<int>(idx.size());
    const int iy = cell / nx, ix = cell % nx;
    batch.coords.emplace_back(iy, ix);
    batch.point_counts.push_back(count);

    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (int i : idx) mean += cloud.xyz[i];
    mean /= count;
    const double cx = grid.x_min + (ix + 0.5) * grid.dx;
    const double cy = grid.y_min + (iy + 0.5) * grid.dy;

    for (int i = 0; i < count; ++i) {
      const Eigen::Vector3d& pt = cloud.xyz[idx[i]];
      double* row = batch.features.data() +
                    (static_cast<std::size_t>(p) * max_points + i) * D;
      row[0] = pt.x();
      row[1] = pt.y();
      row[2] = pt.z();
      for (int c = 0; c < N; ++c)
        row[3 + c] = (cloud.extra(idx[i], c) - cloud.schema.shift[c]) * cloud.schema.scale[c];
      row[3 + N] = pt.x() - mean.x();
      row[4 + N] = pt.y() - mean.y();
      row[5 + N] = pt.z() - mean.z();
      row[6 + N] = pt.x() - cx;
      row[7 + N] = pt.y() - cy;
    }
  }
  return batch;
}

PillarFeatureNet::PillarFeatureNet(int in_width, int out_channels, Rng& rng)
    : lin(in_width, out_channels, rng) {}

ad::Tensor PillarFeatureNet::forward(const PillarBatch& batch) const {
  if (batch.num_pillars() == 0)
    return ad::Tensor(std::vector<int>{0, lin.out_features}, false);
  if (batch.decoration_width != lin.in_features)
    throw ConfigError("pillar decoration width does not match feature net input");
  ad::Tensor per_point = ad::relu(lin.forward(batch.features));
  return ad::masked_rowmax(per_point, batch.point_counts, batch.max_points);
}

void PillarFeatureNet::collect_params(nn::ParamRegistry& reg, const std::string& prefix) {
  lin.collect_params(reg, prefix + ".lin");
}

ad::Tensor scatter_pillars(const ad::Tensor& features,
                           const std::vector<std::pair<int, int>>& coords,
                           const geometry::BEVGridSpec& grid) {
  const int ny = grid.ny(), nx = grid.nx();
  std::vector<int> cells(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto [iy, ix] = coords[i];
    if (iy < 0 || iy >= ny || ix < 0 || ix >= nx)
      throw ConfigError("pillar coordinate outside grid");
    cells[i] = iy * nx + ix;
  }
  return ad::scatter_cells(features, cells, ny, nx);
}

}  // namespace bevfuse::radar
