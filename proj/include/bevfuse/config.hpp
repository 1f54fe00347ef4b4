#pragma once

#include <cstdint>
#include <string>

#include "bevfuse/evaluation.hpp"
#include "bevfuse/model.hpp"
#include "bevfuse/synth.hpp"

namespace bevfuse::config {

struct DataSpec {
  int train_frames = 50;
  int eval_frames = 20;
  std::uint64_t seed = 7;
  int min_objects = 1, max_objects = 5;
  int min_points_per_object = 8, max_points_per_object = 24;
  double clutter_fraction = 0.1;

  void validate() const;
};

struct TrainSpec {
  int steps = 2000;
  int batch = 1;
  double lr = 1e-3;
  std::string lr_schedule = "constant";  // constant | cosine
  int warmup_steps = 0;

  void validate() const;
};

struct ExperimentConfig {
  std::string preset = "toy";
  model::ModelConfig model;
  DataSpec data;
  TrainSpec train;
  evaluation::FTConfig ft;
  evaluation::RoiSpec roi;

  void validate() const;

  // Scene generator matching the model's camera, grid, schema and classes.
  // The synthetic scene defines up to three object classes.
  synth::SceneConfig scene() const;
};

// named starting points: toy | vod | tj4d
ExperimentConfig preset(const std::string& name);

// JSON file round trip; unknown fields are rejected with their path
ExperimentConfig load(const std::string& path);
void save(const ExperimentConfig& cfg, const std::string& path);

// Stable hash over the architecture- and data-defining fields. Training
// length, learning rate, FT and RoI settings do not affect it, so resuming
// and evaluating under changed run settings stays compatible.
std::uint64_t compatibility_hash(const ExperimentConfig& cfg);
std::string hash_hex(std::uint64_t h);

}  // namespace bevfuse::config
