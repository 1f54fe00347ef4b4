#include "bevfuse/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <tuple>

namespace bevfuse::boxes {

void Box3D::validate() const {
  for (double v : {x, y, z, l, w, h, yaw})
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite box field");
  if (l <= 0 || w <= 0 || h <= 0) throw std::invalid_argument("box dims must be positive");
  if (yaw <= -M_PI - 1e-12 || yaw > M_PI + 1e-12)
    throw std::invalid_argument("box yaw outside (-pi, pi]");
}

double wrap_to_pi(double angle) {
  double a = std::fmod(angle, 2.0 * M_PI);
  if (a <= -M_PI) a += 2.0 * M_PI;
  if (a > M_PI) a -= 2.0 * M_PI;
  return a;
}

std::array<Eigen::Vector2d, 4> bev_corners(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.l, hw = 0.5 * b.w;
  std::array<Eigen::Vector2d, 4> out;
  const double lx[4] = {hl, -hl, -hl, hl};
  const double ly[4] = {hw, hw, -hw, -hw};
  for (int i = 0; i < 4; ++i)
    out[i] = Eigen::Vector2d(b.x + c * lx[i] - s * ly[i], b.y + s * lx[i] + c * ly[i]);
  return out;
}

namespace {

double polygon_area(const std::vector<Eigen::Vector2d>& p) {
  double a = 0.0;
  const std::size_t n = p.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % n];
    a += u.x() * v.y() - v.x() * u.y();
  }
  return 0.5 * a;
}

// Sutherland-Hodgman: clips a convex CCW subject polygon by a convex CCW clip
// polygon.
std::vector<Eigen::Vector2d> clip_convex(const std::vector<Eigen::Vector2d>& subject,
                                         const std::array<Eigen::Vector2d, 4>& clip) {
  std::vector<Eigen::Vector2d> poly = subject;
  for (int e = 0; e < 4 && !poly.empty(); ++e) {
    const Eigen::Vector2d& a = clip[e];
    const Eigen::Vector2d& b = clip[(e + 1) % 4];
    const Eigen::Vector2d edge = b - a;
    std::vector<Eigen::Vector2d> next;
    next.reserve(poly.size() + 2);
    const std::size_t n = poly.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::Vector2d& p = poly[i];
      const Eigen::Vector2d& q = poly[(i + 1) % n];
      const double side_p = edge.x() * (p.y() - a.y()) - edge.y() * (p.x() - a.x());
      const double side_q = edge.x() * (q.y() - a.y()) - edge.y() * (q.x() - a.x());
      const bool in_p = side_p >= 0.0, in_q = side_q >= 0.0;
      if (in_p) next.push_back(p);
      if (in_p != in_q) {
        const double t = side_p / (side_p - side_q);
        next.push_back(p + t * (q - p));
      }
    }
    poly = std::move(next);
  }
  return poly;
}

double bev_intersection(const Box3D& a, const Box3D& b) {
  const double ra = 0.5 * std::hypot(a.l, a.w), rb = 0.5 * std::hypot(b.l, b.w);
  if (std::abs(a.x - b.x) > ra + rb || std::abs(a.y - b.y) > ra + rb) return 0.0;
  auto ca = bev_corners(a);
  auto cb = bev_corners(b);
  std::vector<Eigen::Vector2d> subject(ca.begin(), ca.end());
  auto inter = clip_convex(subject, cb);
  if (inter.size() < 3) return 0.0;
  return std::max(0.0, polygon_area(inter));
}

std::tuple<double, double, double, double, double, double, double> box_key(const Box3D& b) {
  return {b.x, b.y, b.z, b.l, b.w, b.h, b.yaw};
}

}  // namespace

double rotated_iou_bev(const Box3D& a, const Box3D& b) {
  // canonical argument order so the computation is bitwise symmetric
  if (box_key(b) < box_key(a)) return rotated_iou_bev(b, a);
  const double area_a = a.l * a.w;
  const double area_b = b.l * b.w;
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  const double inter = bev_intersection(a, b);
  const double uni = area_a + area_b - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double rotated_iou_3d(const Box3D& a, const Box3D& b) {
  if (box_key(b) < box_key(a)) return rotated_iou_3d(b, a);
  const double vol_a = a.l * a.w * a.h;
  const double vol_b = b.l * b.w * b.h;
  if (vol_a <= 0.0 || vol_b <= 0.0) return 0.0;
  const double dz =
      std::min(a.z + 0.5 * a.h, b.z + 0.5 * b.h) - std::max(a.z - 0.5 * a.h, b.z - 0.5 * b.h);
  if (dz <= 0.0) return 0.0;
  const double inter = bev_intersection(a, b) * dz;
  const double uni = vol_a + vol_b - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

std::vector<int> nms_bev(const std::vector<Box3D>& boxes, double iou_thr) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    if (boxes[i].score != boxes[j].score) return boxes[i].score > boxes[j].score;
    return i < j;
  });
  std::vector<int> kept;
  for (int i : order) {
    bool ok = true;
    for (int k : kept) {
      if (rotated_iou_bev(boxes[i], boxes[k]) >= iou_thr) {
        ok = false;
        break;
      }
    }
    if (ok) kept.push_back(i);
  }
  return kept;
}

}  // namespace bevfuse::boxes
