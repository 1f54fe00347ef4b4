#pragma once

#include <cstdint>

#include "bevfuse/model.hpp"
#include "bevfuse/synth.hpp"

// Small end-to-end model and matching scene for fast pipeline tests:
// 48x64 image (feature grid 6x8), 16x16 pillar grid, 8x8 head grid.
namespace testing {

inline bevfuse::geometry::CameraModel tiny_camera() {
  bevfuse::geometry::CameraModel cam;
  cam.height = 48;
  cam.width = 64;
  cam.intrinsics << 55.0, 0.0, 32.0, 0.0, 55.0, 24.0, 0.0, 0.0, 1.0;
  cam.extrinsics << 0.0, -1.0, 0.0, 0.0,
                    0.0,  0.0, -1.0, 1.4,
                    1.0,  0.0, 0.0, 0.0,
                    0.0,  0.0, 0.0, 1.0;
  return cam;
}

inline bevfuse::geometry::BEVGridSpec tiny_grid() {
  bevfuse::geometry::BEVGridSpec g;
  g.x_min = 0.0;
  g.x_max = 16.0;
  g.y_min = -8.0;
  g.y_max = 8.0;
  g.z_min = -0.5;
  g.z_max = 3.5;
  g.dx = 1.0;
  g.dy = 1.0;
  return g;
}

inline bevfuse::model::ModelConfig tiny_config(std::uint64_t seed, bool ablate = false) {
  using namespace bevfuse;
  model::ModelConfig c;
  c.camera = tiny_camera();
  c.grid = tiny_grid();
  c.depth_bins = {1.0, 16.6, 12};
  c.schema = radar::RadarSchema::vod();

  detect::ClassSpec car;
  car.name = "car";
  car.anchor_l = 3.9;
  car.anchor_w = 1.6;
  car.anchor_h = 1.56;
  car.anchor_z = 0.8;
  car.match_thr = 0.4;
  car.unmatch_thr = 0.25;
  car.iou_eval_thr = 0.25;
  detect::ClassSpec ped = car;
  ped.name = "pedestrian";
  ped.anchor_l = 0.8;
  ped.anchor_w = 0.7;
  ped.anchor_h = 1.7;
  ped.anchor_z = 0.9;
  ped.match_thr = 0.25;
  ped.unmatch_thr = 0.15;
  c.classes = {car, ped};

  c.image_encoder.widths = {4, 6, 8, 8};
  c.image_encoder.strides = {2, 2, 2, 1};
  c.context_channels = 6;
  c.depth_hidden = 8;

  c.pillar_max_points = 12;
  c.pillar_max_pillars = 128;
  c.pfn_channels = 8;
  c.radar_bev.stage1_channels = 8;
  c.radar_bev.stage2_channels = 12;
  c.radar_bev.convs_per_stage = 1;
  c.radar_bev.out_channels = 10;

  c.unified_channels = 8;
  c.fused_channels = 12;
  c.bev_encoder.stage1_channels = 12;
  c.bev_encoder.stage2_channels = 16;
  c.bev_encoder.convs_per_stage = 1;
  c.bev_encoder.out_channels = 14;
  c.head_hidden = 12;

  c.ablate_rdl = ablate;
  c.seed = seed;
  return c;
}

inline bevfuse::synth::SceneConfig tiny_scene(std::uint64_t seed) {
  using namespace bevfuse;
  auto cfg = synth::default_scene(tiny_camera(), tiny_grid(), radar::RadarSchema::vod(), seed);
  cfg.classes.resize(2);  // car + pedestrian, matching the head
  cfg.max_objects = 3;
  return cfg;
}

}  // namespace testing
