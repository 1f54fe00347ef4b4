#include "bevfuse/detect.hpp"

#include <algorithm>
#include <cmath>

#include "bevfuse/common.hpp"

namespace bevfuse::detect {

void AnchorGrid::validate() const {
  grid.validate();
  if (classes.empty()) throw ConfigError("anchor grid needs at least one class");
  for (const auto& c : classes) {
    if (c.anchor_l <= 0 || c.anchor_w <= 0 || c.anchor_h <= 0)
      throw ConfigError("anchor dims must be positive: " + c.name);
    if (!(0.0 <= c.unmatch_thr && c.unmatch_thr < c.match_thr && c.match_thr <= 1.0))
      throw ConfigError("anchor thresholds must satisfy 0 <= unmatch < match <= 1: " + c.name);
  }
}

boxes::Box3D AnchorGrid::anchor_box(int class_id, int yaw_idx, int iy, int ix) const {
  const ClassSpec& c = classes[class_id];
  boxes::Box3D b;
  b.x = grid.x_min + (ix + 0.5) * grid.dx;
  b.y = grid.y_min + (iy + 0.5) * grid.dy;
  b.z = c.anchor_z;
  b.l = c.anchor_l;
  b.w = c.anchor_w;
  b.h = c.anchor_h;
  b.yaw = yaw_idx == 0 ? 0.0 : M_PI / 2.0;
  b.class_id = class_id;
  return b;
}

boxes::Box3D AnchorGrid::anchor_at(int flat_index) const {
  const int cells = grid.ny() * grid.nx();
  const int j = flat_index / cells;
  const int cell = flat_index % cells;
  return anchor_box(j / kNumYaws, j % kNumYaws, cell / grid.nx(), cell % grid.nx());
}

std::array<double, 7> encode_box(const boxes::Box3D& gt, const boxes::Box3D& anchor) {
  const double diag = std::sqrt(anchor.l * anchor.l + anchor.w * anchor.w);
  return {(gt.x - anchor.x) / diag,       (gt.y - anchor.y) / diag,
          (gt.z - anchor.z) / anchor.h,   std::log(gt.l / anchor.l),
          std::log(gt.w / anchor.w),      std::log(gt.h / anchor.h),
          boxes::wrap_to_pi(gt.yaw - anchor.yaw)};
}

boxes::Box3D decode_box(const std::array<double, 7>& d, const boxes::Box3D& anchor) {
  const double diag = std::sqrt(anchor.l * anchor.l + anchor.w * anchor.w);
  boxes::Box3D b;
  b.x = anchor.x + d[0] * diag;
  b.y = anchor.y + d[1] * diag;
  b.z = anchor.z + d[2] * anchor.h;
  b.l = anchor.l * std::exp(d[3]);
  b.w = anchor.w * std::exp(d[4]);
  b.h = anchor.h * std::exp(d[5]);
  b.yaw = boxes::wrap_to_pi(anchor.yaw + d[6]);
  b.class_id = anchor.class_id;
  return b;
}

AnchorAssignment assign_anchors(const AnchorGrid& anchors, const std::vector<boxes::Box3D>& gt) {
  anchors.validate();
  const int A = anchors.num_anchors();
  AnchorAssignment out;
  out.label.assign(A, 0);
  out.gt_index.assign(A, -1);

  std::vector<double> best_iou(A, 0.0);
  std::vector<int> best_gt(A, -1);
  std::vector<double> gt_best_iou(gt.size(), -1.0);
  std::vector<int> gt_best_anchor(gt.size(), -1);

  const int cells = anchors.grid.ny() * anchors.grid.nx();
  for (std::size_t g = 0; g < gt.size(); ++g) {
    const int c = gt[g].class_id;
    if (c < 0 || c >= anchors.num_classes()) throw ConfigError("ground-truth class out of range");
    for (int yawi = 0; yawi < AnchorGrid::kNumYaws; ++yawi) {
      const int j = c * AnchorGrid::kNumYaws + yawi;
      for (int cell = 0; cell < cells; ++cell) {
        const int a = j * cells + cell;
        const double iou = boxes::rotated_iou_bev(anchors.anchor_at(a), gt[g]);
        if (iou > best_iou[a] || (iou == best_iou[a] && best_gt[a] == -1)) {
          best_iou[a] = iou;
          best_gt[a] = static_cast<int>(g);
        }
        if (iou > gt_best_iou[g]) {
          gt_best_iou[g] = iou;
          gt_best_anchor[g] = a;
        }
      }
    }
  }

  for (int a = 0; a < A; ++a) {
    if (best_gt[a] < 0) continue;
    const ClassSpec& c = anchors.classes[gt[best_gt[a]].class_id];
    if (best_iou[a] >= c.match_thr) {
      out.label[a] = 1;
      out.gt_index[a] = best_gt[a];
    } else if (best_iou[a] >= c.unmatch_thr) {
      out.label[a] = -1;
    }
  }
  // every ground truth keeps its best anchor even below the match threshold
  for (std::size_t g = 0; g < gt.size(); ++g) {
    const int a = gt_best_anchor[g];
    if (a < 0) continue;
    if (out.label[a] != 1) {
      out.label[a] = 1;
      out.gt_index[a] = static_cast<int>(g);
    }
  }
  for (int a = 0; a < A; ++a)
    if (out.label[a] == 1) ++out.num_matched;
  return out;
}

DetectionHead::DetectionHead(const DetectionHeadConfig& cfg, int anchors_per_cell, Rng& rng) {
  trunk = nn::ConvBlock(cfg.in_channels, cfg.hidden, 3, 1, rng);
  cls_out = nn::Conv2d(cfg.hidden, anchors_per_cell, 1, 1, 0, rng);
  reg_out = nn::Conv2d(cfg.hidden, 7 * anchors_per_cell, 1, 1, 0, rng);
  dir_out = nn::Conv2d(cfg.hidden, 2 * anchors_per_cell, 1, 1, 0, rng);
  // bias the objectness prior toward background so early training is stable
  nn::init_constant(cls_out.b, -std::log((1.0 - 0.01) / 0.01));
}

HeadOutput DetectionHead::forward(const ad::Tensor& bev_feat) const {
  ad::Tensor h = trunk.forward(bev_feat);
  return {cls_out.forward(h), reg_out.forward(h), dir_out.forward(h)};
}

void DetectionHead::collect_params(nn::ParamRegistry& reg, const std::string& prefix) {
  trunk.collect_params(reg, prefix + ".trunk");
  cls_out.collect_params(reg, prefix + ".cls");
  reg_out.collect_params(reg, prefix + ".reg");
  dir_out.collect_params(reg, prefix + ".dir");
}

BevEncoder::BevEncoder(const nn::BevBackboneConfig& cfg, Rng& rng) : backbone(cfg, rng) {
  refine = nn::ConvBlock(cfg.out_channels, cfg.out_channels, 3, 1, rng);
}

ad::Tensor BevEncoder::forward(const ad::Tensor& fused) const {
  return refine.forward(ad::upsample2_nearest(backbone.forward(fused)));
}

void BevEncoder::collect_params(nn::ParamRegistry& reg, const std::string& prefix) {
  backbone.collect_params(reg, prefix + ".backbone");
  refine.collect_params(reg, prefix + ".refine");
}

Losses compute_losses(const HeadOutput& out, const std::vector<boxes::Box3D>& gt,
                      const AnchorGrid& anchors, const AnchorAssignment& assignment,
                      const LossWeights& weights, const FocalSpec& focal,
                      std::optional<ad::Tensor> depth_aux) {
  const int J = anchors.anchors_per_cell();
  const int ny = anchors.grid.ny(), nx = anchors.grid.nx();
  const int cells = ny * nx;
  const int A = anchors.num_anchors();
  if (out.cls.dim(0) != J || out.cls.dim(1) != ny || out.cls.dim(2) != nx)
    throw ConfigError("head output does not match anchor layout");
  if (static_cast<int>(assignment.label.size()) != A)
    throw ConfigError("assignment does not match anchor count");

  ad::Tensor pos_mask(std::vector<int>{J, ny, nx}, false);
  ad::Tensor neg_mask(std::vector<int>{J, ny, nx}, false);
  ad::Tensor reg_target(std::vector<int>{7 * J, ny, nx}, false);
  ad::Tensor reg_mask(std::vector<int>{7 * J, ny, nx}, false);
  ad::Tensor dir_target(std::vector<int>{J, ny, nx}, false);

  for (int a = 0; a < A; ++a) {
    const int j = a / cells, cell = a % cells;
    if (assignment.label[a] == 1) {
      pos_mask.data()[a] = 1.0;
      const boxes::Box3D anchor = anchors.anchor_at(a);
      const auto delta = encode_box(gt[assignment.gt_index[a]], anchor);
      for (int k = 0; k < 7; ++k) {
        reg_target.data()[(static_cast<std::size_t>(j) * 7 + k) * cells + cell] = delta[k];
        reg_mask.data()[(static_cast<std::size_t>(j) * 7 + k) * cells + cell] = 1.0;
      }
      const double rot = boxes::wrap_to_pi(gt[assignment.gt_index[a]].yaw - anchor.yaw);
      dir_target.data()[a] = rot >= 0.0 ? 1.0 : 0.0;
    } else if (assignment.label[a] == 0) {
      neg_mask.data()[a] = 1.0;
    }
  }
  const double norm = 1.0 / std::max(1, assignment.num_matched);

  // focal objectness; composed from sigmoid and log-sigmoid primitives
  ad::Tensor p = ad::sigmoid(out.cls);
  ad::Tensor one_minus_p = ad::add_scalar(ad::mul_scalar(p, -1.0), 1.0);
  ad::Tensor pos_term =
      ad::mul(ad::mul(pos_mask, ad::mul(one_minus_p, one_minus_p)),
              ad::mul_scalar(ad::log_sigmoid(out.cls), -focal.alpha));
  ad::Tensor neg_term =
      ad::mul(ad::mul(neg_mask, ad::mul(p, p)),
              ad::mul_scalar(ad::log_sigmoid(ad::mul_scalar(out.cls, -1.0)),
                             -(1.0 - focal.alpha)));
  ad::Tensor cls_loss = ad::mul_scalar(ad::sum(ad::add(pos_term, neg_term)), norm);

  ad::Tensor reg_loss = ad::mul_scalar(
      ad::sum(ad::mul(reg_mask, ad::smooth_l1(ad::sub(out.reg, reg_target),
                                              focal.smooth_l1_beta))),
      norm);

  std::vector<int> even(J), odd(J);
  for (int j = 0; j < J; ++j) {
    even[j] = 2 * j;
    odd[j] = 2 * j + 1;
  }
  ad::Tensor d = ad::sub(ad::gather_channels(out.dir, odd), ad::gather_channels(out.dir, even));
  ad::Tensor t1 = ad::mul(pos_mask, dir_target);
  ad::Tensor t0 = ad::sub(pos_mask, t1);
  ad::Tensor dir_loss = ad::mul_scalar(
      ad::sum(ad::add(ad::mul(t1, ad::mul_scalar(ad::log_sigmoid(d), -1.0)),
                      ad::mul(t0, ad::mul_scalar(
                                      ad::log_sigmoid(ad::mul_scalar(d, -1.0)), -1.0)))),
      norm);

  Losses losses;
  losses.cls = cls_loss;
  losses.reg = reg_loss;
  losses.dir = dir_loss;
  losses.depth_aux = depth_aux ? *depth_aux : ad::Tensor::scalar(0.0);
  losses.total = ad::add(
      ad::add(ad::mul_scalar(cls_loss, weights.cls), ad::mul_scalar(reg_loss, weights.reg)),
      ad::add(ad::mul_scalar(dir_loss, weights.dir),
              ad::mul_scalar(losses.depth_aux, weights.depth_aux)));
  return losses;
}

std::vector<boxes::Box3D> decode_and_nms(const HeadOutput& out, const AnchorGrid& anchors,
                                         const DecodeConfig& cfg) {
  if (cfg.score_thr < 0.0 || cfg.score_thr > 1.0)
    throw ConfigError("score threshold must be in [0,1]");
  const int J = anchors.anchors_per_cell();
  const int cells = anchors.grid.ny() * anchors.grid.nx();
  const int A = J * cells;

  std::vector<std::pair<double, int>> scored;  // (score, anchor)
  for (int a = 0; a < A; ++a) {
    const double s = 1.0 / (1.0 + std::exp(-out.cls.data()[a]));
    if (s >= cfg.score_thr) scored.emplace_back(s, a);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return x.second < y.second;
  });
  if (static_cast<int>(scored.size()) > cfg.pre_nms) scored.resize(cfg.pre_nms);

  std::vector<boxes::Box3D> candidates;
  candidates.reserve(scored.size());
  for (const auto& [s, a] : scored) {
    const int j = a / cells, cell = a % cells;
    std::array<double, 7> delta;
    for (int k = 0; k < 7; ++k)
      delta[k] = out.reg.data()[(static_cast<std::size_t>(j) * 7 + k) * cells + cell];
    boxes::Box3D b = decode_box(delta, anchors.anchor_at(a));
    b.score = s;
    candidates.push_back(b);
  }

  auto kept = boxes::nms_bev(candidates, cfg.nms_iou);
  if (static_cast<int>(kept.size()) > cfg.max_dets) kept.resize(cfg.max_dets);
  std::vector<boxes::Box3D> result;
  result.reserve(kept.size());
  for (int i : kept) result.push_back(candidates[i]);
  return result;
}

}  // namespace bevfuse::detect
