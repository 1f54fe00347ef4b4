#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bevfuse/boxes.hpp"
#include "bevfuse/geometry.hpp"
#include "bevfuse/radar.hpp"
#include "bevfuse/tensor.hpp"

namespace bevfuse::synth {

struct ClassGen {
  std::string name;
  double l_mean = 4.0, l_std = 0.3;
  double w_mean = 1.8, w_std = 0.1;
  double h_mean = 1.6, h_std = 0.1;
  double z_center = 0.8;
  double rcs_mean = 5.0, rcs_std = 3.0;
  double speed_max = 5.0;
  std::array<double, 3> color{0.8, 0.2, 0.2};
};

struct SceneConfig {
  std::vector<ClassGen> classes;
  int min_objects = 1, max_objects = 5;
  int min_points_per_object = 8, max_points_per_object = 24;
  double clutter_fraction = 0.1;
  double clutter_rcs_mean = -10.0, clutter_rcs_std = 2.0;
  int max_place_retries = 40;
  geometry::CameraModel camera;
  geometry::BEVGridSpec grid;
  radar::RadarSchema schema;
  std::uint64_t seed = 0;

  void validate() const;
};

// Per-object generation facts that the cloud alone cannot reveal: the planar
// velocity behind the Doppler channels and how many radar points the object
// contributed (its points precede all clutter, in ground-truth order).
struct ObjectMeta {
  double vx = 0.0, vy = 0.0;
  int num_radar_points = 0;
};

struct Frame {
  std::string id;
  int img_h = 0, img_w = 0;
  std::vector<std::uint8_t> image;  // CHW, RGB
  radar::RadarPointCloud cloud;
  std::vector<boxes::Box3D> gt;
  std::vector<ObjectMeta> meta;  // parallel to gt
  int requested_objects = 0;
};

struct Dataset {
  SceneConfig cfg;
  std::vector<Frame> frames;
};

// (3,H,W) doubles in [0,1]; exact multiples of 1/255
ad::Tensor image_tensor(const Frame& f);

// Scene draws are independent of camera resolution, so the same seed renders
// the same scene at any image size.
Frame generate_frame(const SceneConfig& cfg, std::uint64_t frame_seed, const std::string& id);

Dataset generate_dataset(const SceneConfig& cfg, int num_frames);

// manifest.json + frames/<id>.{img,rad,gt}; little-endian binary records
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);

// default scene/class setup; image size and grid from the caller's config
SceneConfig default_scene(const geometry::CameraModel& camera, const geometry::BEVGridSpec& grid,
                          const radar::RadarSchema& schema, std::uint64_t seed);

}  // namespace bevfuse::synth
