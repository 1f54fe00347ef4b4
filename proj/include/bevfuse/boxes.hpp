#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

namespace bevfuse::boxes {

struct Box3D {
  double x = 0, y = 0, z = 0;  // center, meters
  double l = 0, w = 0, h = 0;  // dims, meters
  double yaw = 0;              // radians, (-pi, pi]
  int class_id = 0;
  double score = 0;  // predictions only

  void validate() const;
};

double wrap_to_pi(double angle);

// BEV footprint corners in counterclockwise order
std::array<Eigen::Vector2d, 4> bev_corners(const Box3D& b);

// Exact convex-polygon intersection over union of the BEV rectangles.
// Symmetric bitwise: iou(a,b) == iou(b,a).
double rotated_iou_bev(const Box3D& a, const Box3D& b);

// BEV intersection extruded by the z-overlap, over the volume union.
double rotated_iou_3d(const Box3D& a, const Box3D& b);

// Greedy NMS by descending score (ties: lower index first). Returns kept
// indices in pick order; survivors have pairwise IoU < iou_thr.
std::vector<int> nms_bev(const std::vector<Box3D>& boxes, double iou_thr);

}  // namespace bevfuse::boxes
