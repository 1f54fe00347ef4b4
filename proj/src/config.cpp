#include "bevfuse/config.hpp"

#include <fstream>
#include <initializer_list>
#include <nlohmann/json.hpp>
#include <sstream>

#include "bevfuse/common.hpp"
#include "bevfuse/rng.hpp"

namespace bevfuse::config {

using nlohmann::json;

void DataSpec::validate() const {
  if (train_frames < 1) throw ConfigError("data.train_frames must be positive");
  if (eval_frames < 0) throw ConfigError("data.eval_frames must be non-negative");
  if (min_objects < 0 || max_objects < min_objects) throw ConfigError("bad data.objects range");
  if (min_points_per_object < 1 || max_points_per_object < min_points_per_object)
    throw ConfigError("bad data.points_per_object range");
  if (clutter_fraction < 0) throw ConfigError("data.clutter_fraction must be non-negative");
}

void TrainSpec::validate() const {
  if (steps < 0) throw ConfigError("train.steps must be non-negative");
  if (batch < 1) throw ConfigError("train.batch must be at least 1");
  if (lr <= 0) throw ConfigError("train.lr must be positive");
  if (lr_schedule != "constant" && lr_schedule != "cosine")
    throw ConfigError("train.lr_schedule must be constant or cosine");
  if (warmup_steps < 0) throw ConfigError("train.warmup_steps must be non-negative");
}

void ExperimentConfig::validate() const {
  model.validate();
  data.validate();
  train.validate();
  ft.validate();
  if (model.classes.size() > 3)
    throw ConfigError("the synthetic scene defines at most 3 object classes");
}

synth::SceneConfig ExperimentConfig::scene() const {
  auto s = synth::default_scene(model.camera, model.grid, model.schema, data.seed);
  if (model.classes.size() > s.classes.size())
    throw ConfigError("the synthetic scene defines at most 3 object classes");
  s.classes.resize(model.classes.size());
  s.min_objects = data.min_objects;
  s.max_objects = data.max_objects;
  s.min_points_per_object = data.min_points_per_object;
  s.max_points_per_object = data.max_points_per_object;
  s.clutter_fraction = data.clutter_fraction;
  return s;
}

// ------------------------------------------------------------------- json

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) throw ConfigError("unknown config field: " + where + "." + key);
  }
}

json camera_to_json(const geometry::CameraModel& cam) {
  json j;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) j["intrinsics"].push_back(cam.intrinsics(i, k));
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 4; ++k) j["extrinsics"].push_back(cam.extrinsics(i, k));
  j["height"] = cam.height;
  j["width"] = cam.width;
  return j;
}

geometry::CameraModel camera_from_json(const json& j, const std::string& where) {
  check_keys(j, {"intrinsics", "extrinsics", "height", "width"}, where);
  geometry::CameraModel cam;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) cam.intrinsics(i, k) = j.at("intrinsics").at(3 * i + k);
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 4; ++k) cam.extrinsics(i, k) = j.at("extrinsics").at(4 * i + k);
  cam.height = j.at("height");
  cam.width = j.at("width");
  return cam;
}

json grid_to_json(const geometry::BEVGridSpec& g) {
  return json{{"x", {g.x_min, g.x_max}}, {"y", {g.y_min, g.y_max}},
              {"z", {g.z_min, g.z_max}}, {"dx", g.dx},
              {"dy", g.dy}};
}

geometry::BEVGridSpec grid_from_json(const json& j, const std::string& where) {
  check_keys(j, {"x", "y", "z", "dx", "dy"}, where);
  geometry::BEVGridSpec g;
  g.x_min = j.at("x").at(0);
  g.x_max = j.at("x").at(1);
  g.y_min = j.at("y").at(0);
  g.y_max = j.at("y").at(1);
  g.z_min = j.at("z").at(0);
  g.z_max = j.at("z").at(1);
  g.dx = j.at("dx");
  g.dy = j.at("dy");
  return g;
}

json backbone_to_json(const nn::BevBackboneConfig& b) {
  return json{{"stage1", b.stage1_channels},
              {"stage2", b.stage2_channels},
              {"convs_per_stage", b.convs_per_stage},
              {"out", b.out_channels}};
}

nn::BevBackboneConfig backbone_from_json(const json& j, const std::string& where) {
  check_keys(j, {"stage1", "stage2", "convs_per_stage", "out"}, where);
  nn::BevBackboneConfig b;
  b.stage1_channels = j.at("stage1");
  b.stage2_channels = j.at("stage2");
  b.convs_per_stage = j.at("convs_per_stage");
  b.out_channels = j.at("out");
  return b;
}

json model_to_json(const model::ModelConfig& m) {
  json j;
  j["seed"] = m.seed;
  j["ablate_rdl"] = m.ablate_rdl;
  j["camera"] = camera_to_json(m.camera);
  j["grid"] = grid_to_json(m.grid);
  j["depth_bins"] = {{"min", m.depth_bins.d_min},
                     {"max", m.depth_bins.d_max},
                     {"bins", m.depth_bins.num_bins}};
  j["schema"] = m.schema.name;
  for (const auto& c : m.classes)
    j["classes"].push_back(json{{"name", c.name},
                                {"l", c.anchor_l},
                                {"w", c.anchor_w},
                                {"h", c.anchor_h},
                                {"z", c.anchor_z},
                                {"match_thr", c.match_thr},
                                {"unmatch_thr", c.unmatch_thr},
                                {"iou_eval_thr", c.iou_eval_thr}});
  j["image_encoder"] = {{"widths", m.image_encoder.widths}, {"strides", m.image_encoder.strides}};
  j["context_channels"] = m.context_channels;
  j["depth_hidden"] = m.depth_hidden;
  j["pillar"] = {{"max_points", m.pillar_max_points}, {"max_pillars", m.pillar_max_pillars}};
  j["pfn_channels"] = m.pfn_channels;
  j["radar_bev"] = backbone_to_json(m.radar_bev);
  j["unified_channels"] = m.unified_channels;
  j["fused_channels"] = m.fused_channels;
  j["bev_encoder"] = backbone_to_json(m.bev_encoder);
  j["head_hidden"] = m.head_hidden;
  j["loss_weights"] = {{"cls", m.loss_weights.cls},
                       {"reg", m.loss_weights.reg},
                       {"dir", m.loss_weights.dir},
                       {"depth_aux", m.loss_weights.depth_aux}};
  j["focal"] = {{"alpha", m.focal.alpha}, {"smooth_l1_beta", m.focal.smooth_l1_beta}};
  j["decode"] = {{"score_thr", m.decode.score_thr},
                 {"pre_nms", m.decode.pre_nms},
                 {"nms_iou", m.decode.nms_iou},
                 {"max_dets", m.decode.max_dets}};
  return j;
}

model::ModelConfig model_from_json(const json& j) {
  check_keys(j,
             {"seed", "ablate_rdl", "camera", "grid", "depth_bins", "schema", "classes",
              "image_encoder", "context_channels", "depth_hidden", "pillar", "pfn_channels",
              "radar_bev", "unified_channels", "fused_channels", "bev_encoder", "head_hidden",
              "loss_weights", "focal", "decode"},
             "model");
  model::ModelConfig m;
  m.seed = j.at("seed");
  m.ablate_rdl = j.at("ablate_rdl");
  m.camera = camera_from_json(j.at("camera"), "model.camera");
  m.grid = grid_from_json(j.at("grid"), "model.grid");
  const json& b = j.at("depth_bins");
  check_keys(b, {"min", "max", "bins"}, "model.depth_bins");
  m.depth_bins.d_min = b.at("min");
  m.depth_bins.d_max = b.at("max");
  m.depth_bins.num_bins = b.at("bins");
  m.schema = radar::RadarSchema::by_name(j.at("schema"));
  m.classes.clear();
  for (const auto& cj : j.at("classes")) {
    check_keys(cj, {"name", "l", "w", "h", "z", "match_thr", "unmatch_thr", "iou_eval_thr"},
               "model.classes[]");
    detect::ClassSpec c;
    c.name = cj.at("name");
    c.anchor_l = cj.at("l");
    c.anchor_w = cj.at("w");
    c.anchor_h = cj.at("h");
    c.anchor_z = cj.at("z");
    c.match_thr = cj.at("match_thr");
    c.unmatch_thr = cj.at("unmatch_thr");
    c.iou_eval_thr = cj.at("iou_eval_thr");
    m.classes.push_back(c);
  }
  const json& ie = j.at("image_encoder");
  check_keys(ie, {"widths", "strides"}, "model.image_encoder");
  m.image_encoder.widths = ie.at("widths").get<std::vector<int>>();
  m.image_encoder.strides = ie.at("strides").get<std::vector<int>>();
  m.context_channels = j.at("context_channels");
  m.depth_hidden = j.at("depth_hidden");
  const json& p = j.at("pillar");
  check_keys(p, {"max_points", "max_pillars"}, "model.pillar");
  m.pillar_max_points = p.at("max_points");
  m.pillar_max_pillars = p.at("max_pillars");
  m.pfn_channels = j.at("pfn_channels");
  m.radar_bev = backbone_from_json(j.at("radar_bev"), "model.radar_bev");
  m.unified_channels = j.at("unified_channels");
  m.fused_channels = j.at("fused_channels");
  m.bev_encoder = backbone_from_json(j.at("bev_encoder"), "model.bev_encoder");
  m.head_hidden = j.at("head_hidden");
  const json& lw = j.at("loss_weights");
  check_keys(lw, {"cls", "reg", "dir", "depth_aux"}, "model.loss_weights");
  m.loss_weights.cls = lw.at("cls");
  m.loss_weights.reg = lw.at("reg");
  m.loss_weights.dir = lw.at("dir");
  m.loss_weights.depth_aux = lw.at("depth_aux");
  const json& f = j.at("focal");
  check_keys(f, {"alpha", "smooth_l1_beta"}, "model.focal");
  m.focal.alpha = f.at("alpha");
  m.focal.smooth_l1_beta = f.at("smooth_l1_beta");
  const json& d = j.at("decode");
  check_keys(d, {"score_thr", "pre_nms", "nms_iou", "max_dets"}, "model.decode");
  m.decode.score_thr = d.at("score_thr");
  m.decode.pre_nms = d.at("pre_nms");
  m.decode.nms_iou = d.at("nms_iou");
  m.decode.max_dets = d.at("max_dets");
  return m;
}

json data_to_json(const DataSpec& d) {
  return json{{"train_frames", d.train_frames},
              {"eval_frames", d.eval_frames},
              {"seed", d.seed},
              {"objects", {d.min_objects, d.max_objects}},
              {"points_per_object", {d.min_points_per_object, d.max_points_per_object}},
              {"clutter_fraction", d.clutter_fraction}};
}

DataSpec data_from_json(const json& j) {
  check_keys(j, {"train_frames", "eval_frames", "seed", "objects", "points_per_object",
                 "clutter_fraction"},
             "data");
  DataSpec d;
  d.train_frames = j.at("train_frames");
  d.eval_frames = j.at("eval_frames");
  d.seed = j.at("seed");
  d.min_objects = j.at("objects").at(0);
  d.max_objects = j.at("objects").at(1);
  d.min_points_per_object = j.at("points_per_object").at(0);
  d.max_points_per_object = j.at("points_per_object").at(1);
  d.clutter_fraction = j.at("clutter_fraction");
  return d;
}

json full_to_json(const ExperimentConfig& cfg) {
  json j;
  j["preset"] = cfg.preset;
  j["model"] = model_to_json(cfg.model);
  j["data"] = data_to_json(cfg.data);
  j["train"] = {{"steps", cfg.train.steps},
                {"batch", cfg.train.batch},
                {"lr", cfg.train.lr},
                {"lr_schedule", cfg.train.lr_schedule},
                {"warmup_steps", cfg.train.warmup_steps}};
  j["ft"] = {{"rho", cfg.ft.rho_list},
             {"runs", cfg.ft.runs},
             {"sigma", cfg.ft.sigma},
             {"seed", cfg.ft.base_seed}};
  j["roi"] = {{"lateral_max", cfg.roi.lateral_max}, {"forward_max", cfg.roi.forward_max}};
  return j;
}

ExperimentConfig full_from_json(const json& j) {
  check_keys(j, {"preset", "model", "data", "train", "ft", "roi"}, "config");
  ExperimentConfig cfg;
  cfg.preset = j.at("preset");
  cfg.model = model_from_json(j.at("model"));
  cfg.data = data_from_json(j.at("data"));
  const json& t = j.at("train");
  check_keys(t, {"steps", "batch", "lr", "lr_schedule", "warmup_steps"}, "train");
  cfg.train.steps = t.at("steps");
  cfg.train.batch = t.at("batch");
  cfg.train.lr = t.at("lr");
  cfg.train.lr_schedule = t.at("lr_schedule");
  cfg.train.warmup_steps = t.at("warmup_steps");
  const json& ft = j.at("ft");
  check_keys(ft, {"rho", "runs", "sigma", "seed"}, "ft");
  cfg.ft.rho_list = ft.at("rho").get<std::vector<double>>();
  cfg.ft.runs = ft.at("runs");
  cfg.ft.sigma = ft.at("sigma");
  cfg.ft.base_seed = ft.at("seed");
  const json& roi = j.at("roi");
  check_keys(roi, {"lateral_max", "forward_max"}, "roi");
  cfg.roi.lateral_max = roi.at("lateral_max");
  cfg.roi.forward_max = roi.at("forward_max");
  return cfg;
}

}  // namespace

ExperimentConfig load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("-", path, "cannot open config file");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse failure: ") + e.what());
  }
  try {
    ExperimentConfig cfg = full_from_json(j);
    cfg.validate();
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field error: ") + e.what());
  }
}

void save(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("-", path, "cannot open config file for writing");
  out << full_to_json(cfg).dump(2) << "\n";
}

std::uint64_t compatibility_hash(const ExperimentConfig& cfg) {
  json j;
  j["model"] = model_to_json(cfg.model);
  j["data"] = data_to_json(cfg.data);
  const std::string dump = j.dump();
  return fnv1a(dump.data(), dump.size());
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ------------------------------------------------------------------- presets

namespace {

geometry::CameraModel toy_camera(int height, int width, double focal) {
  geometry::CameraModel cam;
  cam.height = height;
  cam.width = width;
  cam.intrinsics << focal, 0.0, width / 2.0, 0.0, focal, height / 2.0, 0.0, 0.0, 1.0;
  // camera at (0, 0, 1.4) looking along ego +x; ego x forward, y left, z up
  cam.extrinsics << 0.0, -1.0, 0.0, 0.0,
                    0.0,  0.0, -1.0, 1.4,
                    1.0,  0.0, 0.0, 0.0,
                    0.0,  0.0, 0.0, 1.0;
  return cam;
}

detect::ClassSpec class_spec(const std::string& name, double l, double w, double h, double z,
                             double match, double unmatch, double eval_thr) {
  detect::ClassSpec c;
  c.name = name;
  c.anchor_l = l;
  c.anchor_w = w;
  c.anchor_h = h;
  c.anchor_z = z;
  c.match_thr = match;
  c.unmatch_thr = unmatch;
  c.iou_eval_thr = eval_thr;
  return c;
}

ExperimentConfig toy_preset() {
  ExperimentConfig cfg;
  cfg.preset = "toy";

  auto& m = cfg.model;
  m.camera = toy_camera(96, 128, 110.0);
  m.grid.x_min = 0.0;
  m.grid.x_max = 20.0;
  m.grid.y_min = -10.0;
  m.grid.y_max = 10.0;
  m.grid.z_min = -0.5;
  m.grid.z_max = 3.5;
  m.grid.dx = 0.5;
  m.grid.dy = 0.5;
  m.depth_bins = {1.0, 20.2, 24};
  m.schema = radar::RadarSchema::vod();
  // anchor dims follow the generator's class means
  m.classes = {class_spec("car", 4.2, 1.8, 1.6, 0.8, 0.45, 0.30, 0.25),
               class_spec("pedestrian", 0.8, 0.7, 1.75, 0.9, 0.30, 0.18, 0.25),
               class_spec("cyclist", 1.8, 0.7, 1.7, 0.85, 0.35, 0.20, 0.25)};

  m.image_encoder.widths = {12, 24, 32, 32};
  m.image_encoder.strides = {2, 2, 2, 1};
  m.context_channels = 24;
  m.depth_hidden = 32;

  m.pillar_max_points = 20;
  m.pillar_max_pillars = 1024;
  m.pfn_channels = 24;
  m.radar_bev.stage1_channels = 24;
  m.radar_bev.stage2_channels = 32;
  m.radar_bev.convs_per_stage = 2;
  m.radar_bev.out_channels = 32;

  m.unified_channels = 32;
  m.fused_channels = 48;
  m.bev_encoder.stage1_channels = 48;
  m.bev_encoder.stage2_channels = 64;
  m.bev_encoder.convs_per_stage = 2;
  m.bev_encoder.out_channels = 48;
  m.head_hidden = 48;

  m.decode.score_thr = 0.1;
  m.decode.pre_nms = 512;
  m.decode.nms_iou = 0.3;
  m.decode.max_dets = 50;
  m.seed = 0;

  cfg.data.train_frames = 50;
  cfg.data.eval_frames = 20;
  cfg.data.seed = 7;

  cfg.train.steps = 2000;
  cfg.train.batch = 4;
  cfg.train.lr = 2e-3;
  cfg.train.lr_schedule = "cosine";
  cfg.train.warmup_steps = 100;

  cfg.ft.rho_list = {0.0, 0.5, 0.7, 0.9};
  cfg.ft.runs = 10;
  cfg.ft.sigma = 0.1;
  cfg.ft.base_seed = 99;
  return cfg;
}

}  // namespace

ExperimentConfig preset(const std::string& name) {
  if (name == "toy") return toy_preset();
  if (name == "vod") {
    // VoD-typical anchor dims; otherwise the toy scale
    ExperimentConfig cfg = toy_preset();
    cfg.preset = "vod";
    cfg.model.classes = {class_spec("car", 3.9, 1.6, 1.56, 0.8, 0.45, 0.30, 0.25),
                         class_spec("pedestrian", 0.8, 0.6, 1.77, 0.9, 0.30, 0.18, 0.25),
                         class_spec("cyclist", 1.76, 0.6, 1.73, 0.85, 0.35, 0.20, 0.25)};
    return cfg;
  }
  if (name == "tj4d") {
    ExperimentConfig cfg = toy_preset();
    cfg.preset = "tj4d";
    cfg.model.schema = radar::RadarSchema::tj4d();
    return cfg;
  }
  throw ConfigError("unknown preset: " + name);
}

}  // namespace bevfuse::config
