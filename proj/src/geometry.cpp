#include "bevfuse/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "bevfuse/common.hpp"

namespace bevfuse::geometry {

void CameraModel::validate() const {
  if (height <= 0 || width <= 0) throw ConfigError("camera: image size must be positive");
  if (std::abs(intrinsics(2, 2) - 1.0) > 1e-12) throw ConfigError("camera: K[2][2] must be 1");
  if (intrinsics(0, 0) <= 0.0 || intrinsics(1, 1) <= 0.0)
    throw ConfigError("camera: focal lengths must be positive");
  const Eigen::Matrix3d r = extrinsics.block<3, 3>(0, 0);
  if ((r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6)
    throw ConfigError("camera: extrinsics rotation is not orthonormal");
  if ((extrinsics.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12)
    throw ConfigError("camera: extrinsics last row must be [0,0,0,1]");
}

Eigen::Vector3d CameraModel::to_camera(const Eigen::Vector3d& p) const {
  return extrinsics.block<3, 3>(0, 0) * p + extrinsics.block<3, 1>(0, 3);
}

Eigen::Vector3d CameraModel::to_ego(const Eigen::Vector3d& p) const {
  const Eigen::Matrix3d r = extrinsics.block<3, 3>(0, 0);
  return r.transpose() * (p - extrinsics.block<3, 1>(0, 3));
}

void BEVGridSpec::validate() const {
  if (!(x_max > x_min && y_max > y_min && z_max > z_min))
    throw ConfigError("grid: max must exceed min on every axis");
  if (dx <= 0 || dy <= 0) throw ConfigError("grid: cell size must be positive");
  const double rx = (x_max - x_min) / dx;
  const double ry = (y_max - y_min) / dy;
  if (std::abs(rx - std::llround(rx)) > 1e-9 || std::abs(ry - std::llround(ry)) > 1e-9)
    throw ConfigError("grid: extent must be an integer multiple of cell size");
}

BEVGridSpec BEVGridSpec::coarser(int factor) const {
  BEVGridSpec g = *this;
  g.dx *= factor;
  g.dy *= factor;
  g.validate();
  return g;
}

void DepthBinSpec::validate() const {
  if (!(d_min > 0.0 && d_max > d_min)) throw ConfigError("depth bins: need 0 < d_min < d_max");
  if (num_bins < 2) throw ConfigError("depth bins: need at least 2 bins");
}

std::vector<ProjectedPoint> project_to_image(const std::vector<Eigen::Vector3d>& points,
                                             const CameraModel& camera) {
  camera.validate();
  std::vector<ProjectedPoint> out(points.size());
  const Eigen::Matrix3d r = camera.extrinsics.block<3, 3>(0, 0);
  const Eigen::Vector3d t = camera.extrinsics.block<3, 1>(0, 3);
  const Eigen::Matrix3d k = camera.intrinsics;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!points[i].allFinite())
      throw std::invalid_argument("project_to_image: non-finite point coordinates");
    const Eigen::Vector3d pc = r * points[i] + t;
    ProjectedPoint& pp = out[i];
    pp.depth = pc.z();
    if (pc.z() <= 0.0) continue;  // behind (or on) the camera plane
    const Eigen::Vector3d uvw = k * pc;
    pp.u = uvw.x() / uvw.z();
    pp.v = uvw.y() / uvw.z();
    pp.visible = pp.u >= 0.0 && pp.u < camera.width && pp.v >= 0.0 && pp.v < camera.height;
  }
  return out;
}

std::vector<Eigen::Vector3d> build_frustum(int feat_h, int feat_w, const DepthBinSpec& bins,
                                           const CameraModel& camera, int stride, double offset) {
  camera.validate();
  bins.validate();
  if (feat_h <= 0 || feat_w <= 0 || stride <= 0)
    throw ConfigError("build_frustum: sizes and stride must be positive");
  if (stride * feat_h > camera.height || stride * feat_w > camera.width)
    throw ConfigError("build_frustum: feature grid exceeds image");
  const Eigen::Matrix3d kinv = camera.intrinsics.inverse();
  std::vector<Eigen::Vector3d> pts;
  pts.reserve(static_cast<std::size_t>(bins.num_bins) * feat_h * feat_w);
  for (int b = 0; b < bins.num_bins; ++b) {
    const double d = bins.bin_center(b);
    for (int r = 0; r < feat_h; ++r) {
      const double v = (r + offset) * stride;
      for (int c = 0; c < feat_w; ++c) {
        const double u = (c + offset) * stride;
        const Eigen::Vector3d pc = kinv * Eigen::Vector3d(u * d, v * d, d);
        pts.push_back(camera.to_ego(pc));
      }
    }
  }
  return pts;
}

std::optional<std::pair<int, int>> bev_cell_index(double x, double y, const BEVGridSpec& grid) {
  if (x < grid.x_min || x >= grid.x_max || y < grid.y_min || y >= grid.y_max) return std::nullopt;
  int ix = static_cast<int>(std::floor((x - grid.x_min) / grid.dx));
  int iy = static_cast<int>(std::floor((y - grid.y_min) / grid.dy));
  // guard against floating rounding at the top edge
  ix = std::min(ix, grid.nx() - 1);
  iy = std::min(iy, grid.ny() - 1);
  return std::make_pair(iy, ix);
}

std::vector<int> bev_cell_of_points(const std::vector<Eigen::Vector3d>& points,
                                    const BEVGridSpec& grid) {
  std::vector<int> cells(points.size(), -1);
  const int nx = grid.nx();
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (p.z() < grid.z_min || p.z() >= grid.z_max) continue;
    if (auto c = bev_cell_index(p.x(), p.y(), grid)) cells[i] = c->first * nx + c->second;
  }
  return cells;
}

namespace {

// total order on doubles: numeric order with -0.0 before +0.0
inline bool total_less(double a, double b) {
  if (a < b) return true;
  if (a > b) return false;
  return std::signbit(a) && !std::signbit(b);
}

}  // namespace

ad::Tensor splat_to_bev(const ad::Tensor& features, const std::vector<Eigen::Vector3d>& coords,
                        const BEVGridSpec& grid, bool deterministic) {
  grid.validate();
  const auto& s = features.shape();
  if (s.size() != 2) throw std::invalid_argument("splat_to_bev: features must be (P,C)");
  if (static_cast<std::size_t>(s[0]) != coords.size())
    throw std::invalid_argument("splat_to_bev: feature/coord count mismatch");
  const int p = s[0], c = s[1];
  if (c < 1) throw std::invalid_argument("splat_to_bev: need at least one channel");
  const int ny = grid.ny(), nx = grid.nx();
  const std::vector<int> cells = bev_cell_of_points(coords, grid);
  const std::size_t plane = static_cast<std::size_t>(ny) * nx;

  ad::Tensor out(std::vector<int>{c, ny, nx});
  if (!deterministic) {
    for (int i = 0; i < p; ++i) {
      if (cells[i] < 0) continue;
      for (int j = 0; j < c; ++j)
        out.data()[static_cast<std::size_t>(j) * plane + cells[i]] +=
            features.data()[static_cast<std::size_t>(i) * c + j];
    }
  } else {
    // group points by cell, then accumulate each channel's multiset in
    // ascending value order
    std::vector<std::pair<int, int>> order;  // (cell, point)
    order.reserve(coords.size());
    for (int i = 0; i < p; ++i)
      if (cells[i] >= 0) order.emplace_back(cells[i], i);
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<double> vals;
    std::size_t i = 0;
    while (i < order.size()) {
      std::size_t j = i;
      while (j < order.size() && order[j].first == order[i].first) ++j;
      const int cell = order[i].first;
      for (int ch = 0; ch < c; ++ch) {
        vals.clear();
        for (std::size_t t = i; t < j; ++t)
          vals.push_back(features.data()[static_cast<std::size_t>(order[t].second) * c + ch]);
        std::sort(vals.begin(), vals.end(), total_less);
        double acc = 0.0;
        for (double v : vals) acc += v;
        out.data()[static_cast<std::size_t>(ch) * plane + cell] = acc;
      }
      i = j;
    }
  }

  if (ad::grad_enabled() && features.requires_grad()) {
    out.impl()->requires_grad = true;
    out.impl()->parents.push_back(features.impl());
    out.impl()->backward_fn = [fi = features.impl(), cells, p, c, plane](ad::TensorImpl& self) {
      fi->ensure_grad();
      for (int i = 0; i < p; ++i) {
        if (cells[i] < 0) continue;
        for (int j = 0; j < c; ++j)
          fi->grad[static_cast<std::size_t>(i) * c + j] +=
              self.grad[static_cast<std::size_t>(j) * plane + cells[i]];
      }
    };
  }
  return out;
}

}  // namespace bevfuse::geometry
