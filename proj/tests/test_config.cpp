#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "bevfuse/checkpoint.hpp"
#include "bevfuse/common.hpp"
#include "bevfuse/config.hpp"
#include "tiny_model.hpp"

using namespace bevfuse;
namespace fs = std::filesystem;
using nlohmann::json;
using testing::tiny_config;
using testing::tiny_scene;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

config::ExperimentConfig tiny_experiment(std::uint64_t seed) {
  config::ExperimentConfig cfg;
  cfg.model = tiny_config(seed);
  cfg.data.train_frames = 2;
  cfg.data.eval_frames = 1;
  cfg.train.steps = 5;
  return cfg;
}

std::vector<model::Sample> tiny_samples(int n, std::uint64_t scene_seed) {
  auto scene = tiny_scene(scene_seed);
  std::vector<model::Sample> out;
  for (int i = 0; i < n; ++i)
    out.push_back(model::make_sample(
        synth::generate_frame(scene, static_cast<std::uint64_t>(i), "f" + std::to_string(i))));
  return out;
}

// writes j, loads it, returns the ConfigError message ("" when it loads fine)
std::string load_error(const json& j) {
  const std::string path = "/tmp/bevfuse_test_cfg_err.json";
  std::ofstream(path) << j.dump();
  try {
    config::load(path);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("named presets validate and build") {
  for (const char* name : {"toy", "vod", "tj4d"}) {
    auto cfg = config::preset(name);
    CHECK(cfg.preset == name);
    CHECK_NOTHROW(cfg.validate());
    model::Model m(cfg.model);
    CHECK(m.head_grid.nx() == 20);
    CHECK(m.head_grid.ny() == 20);
  }
  auto toy = config::preset("toy");
  CHECK(toy.model.grid.nx() == 40);
  CHECK(toy.model.classes.size() == 3);
  auto vod = config::preset("vod");
  CHECK(vod.model.classes[0].anchor_l == 3.9);
  auto tj = config::preset("tj4d");
  CHECK(tj.model.schema.name == "tj4d");

  const auto h_toy = config::compatibility_hash(toy);
  CHECK(h_toy != config::compatibility_hash(vod));
  CHECK(h_toy != config::compatibility_hash(tj));
  CHECK(config::compatibility_hash(vod) != config::compatibility_hash(tj));

  CHECK_THROWS_AS(config::preset("kitti"), ConfigError);
}

TEST_CASE("validation rejects broken settings") {
  auto cfg = config::preset("toy");
  SUBCASE("negative step budget") { cfg.train.steps = -1; }
  SUBCASE("zero learning rate") { cfg.train.lr = 0.0; }
  SUBCASE("inverted object range") {
    cfg.data.min_objects = 4;
    cfg.data.max_objects = 2;
  }
  SUBCASE("empty train split") { cfg.data.train_frames = 0; }
  SUBCASE("no classes") { cfg.model.classes.clear(); }
  SUBCASE("too many classes for the scene") { cfg.model.classes.resize(4); }
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("config files round trip exactly") {
  auto cfg = config::preset("tj4d");
  cfg.train.steps = 123;
  cfg.train.lr = 5e-4;
  cfg.ft.rho_list = {0.0, 0.25, 0.9};
  cfg.ft.runs = 3;
  cfg.ft.sigma = 0.2;
  cfg.model.ablate_rdl = true;
  cfg.model.seed = 17;
  cfg.data.max_objects = 4;
  cfg.roi.forward_max = 18.0;

  const std::string a = "/tmp/bevfuse_test_cfg_a.json";
  const std::string b = "/tmp/bevfuse_test_cfg_b.json";
  config::save(cfg, a);
  auto back = config::load(a);
  config::save(back, b);
  CHECK(slurp(a) == slurp(b));
  CHECK(config::compatibility_hash(back) == config::compatibility_hash(cfg));

  CHECK(back.preset == "tj4d");
  CHECK(back.train.steps == 123);
  CHECK(back.train.lr == 5e-4);
  CHECK(back.ft.rho_list == std::vector<double>{0.0, 0.25, 0.9});
  CHECK(back.ft.runs == 3);
  CHECK(back.ft.sigma == 0.2);
  CHECK(back.model.ablate_rdl);
  CHECK(back.model.seed == 17);
  CHECK(back.model.schema.name == "tj4d");
  CHECK(back.model.schema.shift == cfg.model.schema.shift);
  CHECK(back.model.camera.intrinsics == cfg.model.camera.intrinsics);
  CHECK(back.model.camera.extrinsics == cfg.model.camera.extrinsics);
  CHECK(back.model.grid.dx == cfg.model.grid.dx);
  CHECK(back.model.depth_bins.num_bins == cfg.model.depth_bins.num_bins);
  CHECK(back.model.classes.size() == 3);
  CHECK(back.model.classes[1].unmatch_thr == cfg.model.classes[1].unmatch_thr);
  CHECK(back.model.image_encoder.widths == cfg.model.image_encoder.widths);
  CHECK(back.model.loss_weights.depth_aux == cfg.model.loss_weights.depth_aux);
  CHECK(back.model.focal.smooth_l1_beta == cfg.model.focal.smooth_l1_beta);
  CHECK(back.model.decode.pre_nms == cfg.model.decode.pre_nms);
  CHECK(back.data.max_objects == 4);
  CHECK(back.roi.forward_max == 18.0);
  fs::remove(a);
  fs::remove(b);
}

TEST_CASE("unknown or missing config fields are rejected with their path") {
  const std::string path = "/tmp/bevfuse_test_cfg_src.json";
  config::save(config::preset("toy"), path);
  json base = json::parse(slurp(path));
  fs::remove(path);

  json j = base;
  j["modle"] = 1;
  CHECK(load_error(j).find("config.modle") != std::string::npos);

  j = base;
  j["model"]["gamma"] = 2.0;
  CHECK(load_error(j).find("model.gamma") != std::string::npos);

  j = base;
  j["model"]["decode"]["topk"] = 5;
  CHECK(load_error(j).find("model.decode.topk") != std::string::npos);

  j = base;
  j["ft"]["reps"] = 2;
  CHECK(load_error(j).find("ft.reps") != std::string::npos);

  j = base;
  j["train"].erase("lr");
  CHECK(load_error(j).find("lr") != std::string::npos);

  // not even json
  const std::string bad = "/tmp/bevfuse_test_cfg_bad.json";
  std::ofstream(bad) << "steps: 12\n";
  CHECK_THROWS_AS(config::load(bad), ConfigError);
  fs::remove(bad);

  CHECK_THROWS_AS(config::load("/tmp/bevfuse_no_such_config.json"), DataError);
}

TEST_CASE("compatibility hash tracks architecture and data only") {
  const auto base = config::preset("toy");
  const auto h = config::compatibility_hash(base);
  CHECK(config::hash_hex(h).size() == 16);

  // run settings are free to change
  auto run = base;
  run.preset = "renamed";
  run.train.steps = 9999;
  run.train.lr = 1e-2;
  run.ft.rho_list = {0.3};
  run.ft.runs = 1;
  run.ft.sigma = 0.5;
  run.ft.base_seed = 1;
  run.roi.lateral_max = 2.0;
  CHECK(config::compatibility_hash(run) == h);

  // anything defining the architecture or the dataset is not
  auto m = base;
  m.model.seed = 1;
  CHECK(config::compatibility_hash(m) != h);
  m = base;
  m.model.fused_channels = 32;
  CHECK(config::compatibility_hash(m) != h);
  m = base;
  m.model.ablate_rdl = true;
  CHECK(config::compatibility_hash(m) != h);
  m = base;
  m.model.classes[0].match_thr = 0.5;
  CHECK(config::compatibility_hash(m) != h);
  auto d = base;
  d.data.seed = 8;
  CHECK(config::compatibility_hash(d) != h);
  d = base;
  d.data.train_frames = 51;
  CHECK(config::compatibility_hash(d) != h);
}

TEST_CASE("the scene generator follows the data spec") {
  auto cfg = config::preset("toy");
  cfg.data.min_objects = 2;
  cfg.data.max_objects = 4;
  cfg.data.min_points_per_object = 10;
  cfg.data.max_points_per_object = 12;
  cfg.data.clutter_fraction = 0.25;
  cfg.data.seed = 42;
  auto s = cfg.scene();
  CHECK(s.classes.size() == 3);
  CHECK(s.min_objects == 2);
  CHECK(s.max_objects == 4);
  CHECK(s.min_points_per_object == 10);
  CHECK(s.max_points_per_object == 12);
  CHECK(s.clutter_fraction == 0.25);
  CHECK(s.seed == 42);
  CHECK(s.schema.name == cfg.model.schema.name);

  cfg.model.classes.resize(2);
  CHECK(cfg.scene().classes.size() == 2);
  cfg.model.classes.resize(4);
  CHECK_THROWS_AS(cfg.scene(), ConfigError);
}

TEST_CASE("checkpoints restore parameters and optimizer state") {
  auto samples = tiny_samples(2, 60);
  auto exp = tiny_experiment(11);
  const auto hash = config::compatibility_hash(exp);
  const std::string path = "/tmp/bevfuse_test_ckpt.bin";

  // uninterrupted reference run
  model::Model m0(exp.model);
  model::Trainer t0(&m0, exp.train.lr);
  std::vector<double> full;
  t0.fit(samples, 5, [&](long, const detect::Losses& L) { full.push_back(L.total.value()); });

  // interrupted at step 3
  model::Model m1(exp.model);
  model::Trainer t1(&m1, exp.train.lr);
  t1.fit(samples, 3);
  checkpoint::save(path, m1, &t1.opt, 3, hash);

  auto meta = checkpoint::read_meta(path);
  CHECK(meta.step == 3);
  CHECK(meta.config_hash == hash);

  // a fresh model under the same config starts at init, not at step 3
  model::Model m2(exp.model);
  model::Trainer t2(&m2, exp.train.lr);
  bool diverged = false;
  for (std::size_t i = 0; i < m1.params.items.size(); ++i)
    if (m2.params.items[i].second.values() != m1.params.items[i].second.values()) diverged = true;
  CHECK(diverged);
  auto loaded = checkpoint::load(path, m2, &t2.opt, hash);
  CHECK(loaded.step == 3);
  CHECK(loaded.config_hash == hash);
  REQUIRE(m2.params.items.size() == m1.params.items.size());
  for (std::size_t i = 0; i < m1.params.items.size(); ++i)
    CHECK(m2.params.items[i].second.values() == m1.params.items[i].second.values());
  CHECK(t2.opt.step_count() == t1.opt.step_count());

  // resuming replays the tail of the uninterrupted run bit for bit
  std::vector<double> tail;
  t2.fit(samples, 5, [&](long, const detect::Losses& L) { tail.push_back(L.total.value()); }, 3);
  REQUIRE(tail.size() == 2);
  CHECK(tail[0] == full[3]);
  CHECK(tail[1] == full[4]);
  for (std::size_t i = 0; i < m0.params.items.size(); ++i)
    CHECK(m2.params.items[i].second.values() == m0.params.items[i].second.values());

  fs::remove(path);
}

TEST_CASE("checkpoint refusals") {
  auto exp = tiny_experiment(12);
  const auto hash = config::compatibility_hash(exp);
  const std::string path = "/tmp/bevfuse_test_ckpt_bad.bin";

  model::Model m(exp.model);
  checkpoint::save(path, m, nullptr, 0, hash);

  // config hash mismatch
  model::Model fresh(exp.model);
  CHECK_THROWS_AS(checkpoint::load(path, fresh, nullptr, hash + 1), IncompatError);

  // parameter layout mismatch under a matching hash
  auto widened = exp.model;
  widened.pfn_channels = 16;
  model::Model wrong(widened);
  CHECK_THROWS_AS(checkpoint::load(path, wrong, nullptr, hash), IncompatError);

  // a checkpoint that stored no optimizer state cannot seed one
  model::Trainer t(&fresh, 1e-3);
  CHECK_THROWS_AS(checkpoint::load(path, fresh, &t.opt, hash), IncompatError);

  // truncation
  const auto bytes = slurp(path);
  std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(checkpoint::load(path, fresh, nullptr, hash), DataError);

  // not a checkpoint at all
  std::ofstream(path, std::ios::binary) << "definitely not";
  CHECK_THROWS_AS(checkpoint::read_meta(path), DataError);
  CHECK_THROWS_AS(checkpoint::load(path, fresh, nullptr, hash), DataError);

  CHECK_THROWS_AS(checkpoint::read_meta("/tmp/bevfuse_no_such_ckpt.bin"), DataError);
  fs::remove(path);
}
