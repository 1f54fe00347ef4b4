// Command-line driver: dataset synthesis, training, evaluation, the noise
// failure-test sweep and the image-resolution study. Every run is
// reproducible from (config file, seed); artifacts embed the config hash.
//
// Exit codes: 0 success, 2 usage/config error, 3 data error, 4 incompatible
// checkpoint or dataset.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "bevfuse/checkpoint.hpp"
#include "bevfuse/common.hpp"
#include "bevfuse/config.hpp"
#include "bevfuse/evaluation.hpp"
#include "bevfuse/model.hpp"
#include "bevfuse/synth.hpp"

namespace fs = std::filesystem;
using namespace bevfuse;

namespace {

struct Opts {
  std::string config_path;
  std::string preset = "toy";
  std::string out;
  std::string dataset;
  std::string ckpt;
  std::string split = "eval";
  std::string roi = "none";
  std::string schema;
  bool ablate = false;
  bool resume = false;
  bool heatmaps = false;
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 0;
  std::uint64_t ft_seed = 0;
  int frames = 0;
  int eval_frames = 0;
  int steps = 0;
  int runs = 0;
  double lr = 0.0;
  double sigma = 0.0;
  std::vector<double> rho;
};

void add_config_opts(CLI::App* c, Opts& o) {
  auto* conf = c->add_option("--config", o.config_path, "experiment config file (JSON)");
  c->add_option("--preset", o.preset, "built-in starting point: toy | vod | tj4d")
      ->check(CLI::IsMember({"toy", "vod", "tj4d"}))
      ->excludes(conf);
  c->add_option("--seed", o.seed, "model parameter/sampling seed");
  c->add_option("--data-seed", o.data_seed, "scene generator seed");
  c->add_option("--schema", o.schema, "radar channel layout: vod | tj4d")
      ->check(CLI::IsMember({"vod", "tj4d"}));
  c->add_flag("--ablate-rdl", o.ablate,
              "zero the projected radar depth channels (image-only lift baseline)");
  c->add_option("--frames", o.frames,
                "training frames; clears the held-out tail unless --eval-frames is also given");
  c->add_option("--eval-frames", o.eval_frames, "held-out frames appended after the training split");
  c->add_option("--steps", o.steps, "total training steps");
  c->add_option("--lr", o.lr, "learning rate");
  c->add_option("--rho", o.rho, "failure-test noise ratios");
  c->add_option("--runs", o.runs, "failure-test repetitions per ratio");
  c->add_option("--sigma", o.sigma, "failure-test noise standard deviation");
  c->add_option("--ft-seed", o.ft_seed, "failure-test base seed");
  c->add_option("--out", o.out, "output directory (default $BEVFUSE_OUT, then ./out)");
}

config::ExperimentConfig make_config(const CLI::App* c, const Opts& o) {
  config::ExperimentConfig cfg =
      c->count("--config") ? config::load(o.config_path) : config::preset(o.preset);
  if (c->count("--seed")) cfg.model.seed = o.seed;
  if (c->count("--ablate-rdl")) cfg.model.ablate_rdl = true;
  if (c->count("--schema")) cfg.model.schema = radar::RadarSchema::by_name(o.schema);
  if (c->count("--frames")) {
    cfg.data.train_frames = o.frames;
    if (!c->count("--eval-frames")) cfg.data.eval_frames = 0;
  }
  if (c->count("--eval-frames")) cfg.data.eval_frames = o.eval_frames;
  if (c->count("--data-seed")) cfg.data.seed = o.data_seed;
  if (c->count("--steps")) cfg.train.steps = o.steps;
  if (c->count("--lr")) cfg.train.lr = o.lr;
  if (c->count("--rho")) cfg.ft.rho_list = o.rho;
  if (c->count("--runs")) cfg.ft.runs = o.runs;
  if (c->count("--sigma")) cfg.ft.sigma = o.sigma;
  if (c->count("--ft-seed")) cfg.ft.base_seed = o.ft_seed;
  cfg.validate();
  return cfg;
}

fs::path resolve_out(const CLI::App* c, const Opts& o) {
  if (c->count("--out")) return fs::path(o.out);
  if (const char* env = std::getenv("BEVFUSE_OUT")) return fs::path(env);
  return fs::path("out");
}

// Frames are stored in generation order: the first data.train_frames belong
// to the training split, the next data.eval_frames are held out.
std::vector<model::Sample> load_split(const config::ExperimentConfig& cfg, const std::string& dir,
                                      const std::string& split) {
  auto ds = synth::read_dataset(dir);
  const int train_n = cfg.data.train_frames;
  const int eval_n = cfg.data.eval_frames;
  const int total = train_n + eval_n;
  if (static_cast<int>(ds.frames.size()) != total)
    throw IncompatError("dataset holds " + std::to_string(ds.frames.size()) +
                        " frames, config expects " + std::to_string(total));
  if (ds.cfg.seed != cfg.data.seed) throw IncompatError("dataset was generated under another data seed");
  if (ds.cfg.schema.name != cfg.model.schema.name)
    throw IncompatError("dataset schema " + ds.cfg.schema.name + ", config wants " +
                        cfg.model.schema.name);
  if (ds.cfg.camera.height != cfg.model.camera.height ||
      ds.cfg.camera.width != cfg.model.camera.width ||
      (ds.cfg.camera.intrinsics - cfg.model.camera.intrinsics).norm() != 0.0 ||
      (ds.cfg.camera.extrinsics - cfg.model.camera.extrinsics).norm() != 0.0)
    throw IncompatError("dataset camera does not match the config");
  if (ds.cfg.classes.size() != cfg.model.classes.size())
    throw IncompatError("dataset has " + std::to_string(ds.cfg.classes.size()) +
                        " classes, config has " + std::to_string(cfg.model.classes.size()));

  int begin = 0, end = 0;
  if (split == "train") {
    begin = 0;
    end = train_n;
  } else if (split == "eval") {
    begin = train_n;
    end = total;
  } else if (split == "all") {
    begin = 0;
    end = total;
  } else {
    throw ConfigError("unknown split: " + split);
  }
  if (begin == end) throw DataError("-", "split", "the '" + split + "' split is empty");

  std::vector<model::Sample> out;
  out.reserve(static_cast<std::size_t>(end - begin));
  for (int i = begin; i < end; ++i) out.push_back(model::make_sample(ds.frames[i]));
  return out;
}

evaluation::EvalConfig eval_config(const config::ExperimentConfig& cfg) {
  evaluation::EvalConfig ec;
  for (std::size_t i = 0; i < cfg.model.classes.size(); ++i)
    ec.iou_thresholds[static_cast<int>(i)] = cfg.model.classes[i].iou_eval_thr;
  return ec;
}

std::vector<std::string> class_names(const config::ExperimentConfig& cfg) {
  std::vector<std::string> names;
  for (const auto& c : cfg.model.classes) names.push_back(c.name);
  return names;
}

nlohmann::json metrics_block(const std::vector<evaluation::EvalFrame>& frames,
                             const config::ExperimentConfig& cfg) {
  const auto ec = eval_config(cfg);
  const auto res3 = evaluation::evaluate_map(frames, ec, true);
  const auto resb = evaluation::evaluate_map(frames, ec, false);
  nlohmann::json b;
  b["map_3d"] = res3.map;
  b["map_bev"] = resb.map;
  b["ap_3d"] = nlohmann::json::object();
  b["ap_bev"] = nlohmann::json::object();
  for (const auto& [cls, ap] : res3.per_class) b["ap_3d"][cfg.model.classes[cls].name] = ap;
  for (const auto& [cls, ap] : resb.per_class) b["ap_bev"][cfg.model.classes[cls].name] = ap;
  b["skipped"] = nlohmann::json::array();
  for (int cls : res3.skipped_classes) b["skipped"].push_back(cfg.model.classes[cls].name);
  return b;
}

void csv_metric_rows(std::ofstream& out, const std::string& scope, const nlohmann::json& block) {
  for (const auto& [name, ap] : block["ap_3d"].items())
    out << scope << "," << name << "," << ap.get<double>() << ","
        << block["ap_bev"][name].get<double>() << "\n";
  out << scope << ",mAP," << block["map_3d"].get<double>() << ","
      << block["map_bev"].get<double>() << "\n";
}

void write_pgm(const fs::path& path, const double* vals, int h, int w) {
  std::ofstream out(path);
  if (!out) throw DataError("-", path.string(), "cannot open for writing");
  out << "P2\n" << w << " " << h << "\n255\n";
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = std::min(1.0, std::max(0.0, vals[y * w + x]));
      out << static_cast<int>(std::lround(255.0 * v)) << (x + 1 < w ? ' ' : '\n');
    }
  }
}

// per-cell fusion weights of both modalities for one frame, as grayscale maps
void write_heatmaps(const model::Model& m, const model::Sample& s, const fs::path& dir) {
  fs::create_directories(dir);
  ad::NoGradGuard guard;
  auto fwd = m.forward(s.image, s.cloud, s.key);
  std::vector<ad::Tensor> enc;
  enc.push_back(m.uff.shared_encode(m.uff.channel_unify(fwd.cam_bev, 0)));
  enc.push_back(m.uff.shared_encode(m.uff.channel_unify(fwd.radar_bev, 1)));
  auto w = m.uff.modality_weights(enc);
  const int ny = w.dim(1), nx = w.dim(2);
  const char* names[2] = {"camera", "radar"};
  for (int mod = 0; mod < 2; ++mod)
    write_pgm(dir / (s.id + "_" + names[mod] + ".pgm"), w.data() + mod * ny * nx, ny, nx);
}

// ------------------------------------------------------------------ commands

int cmd_synth(const CLI::App* c, const Opts& o) {
  auto cfg = make_config(c, o);
  const fs::path out = resolve_out(c, o);
  if (fs::exists(out) && !fs::is_empty(out) && !fs::exists(out / "manifest.json"))
    throw DataError("-", out.string(), "refusing to write a dataset into a non-dataset directory");

  const int total = cfg.data.train_frames + cfg.data.eval_frames;
  auto ds = synth::generate_dataset(cfg.scene(), total);
  synth::write_dataset(ds, out.string());

  std::cout << "dataset  " << out.string() << "\n"
            << "config   " << config::hash_hex(config::compatibility_hash(cfg)) << "\n"
            << "schema   " << cfg.model.schema.name << " (" << cfg.model.schema.num_extras()
            << " extra channels)\n"
            << "frames   " << total << " (train " << cfg.data.train_frames << ", held-out "
            << cfg.data.eval_frames << ")\n"
            << "image    " << cfg.model.camera.height << "x" << cfg.model.camera.width << "\n"
            << "classes ";
  for (const auto& name : class_names(cfg)) std::cout << " " << name;
  std::cout << "\n";
  return 0;
}

int cmd_train(const CLI::App* c, const Opts& o) {
  auto cfg = make_config(c, o);
  const auto hash = config::compatibility_hash(cfg);
  auto samples = load_split(cfg, o.dataset, "train");

  const fs::path out = resolve_out(c, o);
  fs::create_directories(out);
  const std::string ckpt = (out / "checkpoint.bin").string();
  const std::string csv = (out / "train_loss.csv").string();

  model::Model m(cfg.model);
  model::Trainer trainer(&m, cfg.train.lr);
  long start = 0;
  if (o.resume) {
    auto meta = checkpoint::load(ckpt, m, &trainer.opt, hash);
    start = meta.step;
    if (start > cfg.train.steps)
      throw IncompatError("checkpoint is at step " + std::to_string(start) +
                          ", beyond the configured budget of " + std::to_string(cfg.train.steps));
  }

  std::ofstream loss(csv, o.resume ? std::ios::app : std::ios::trunc);
  if (!loss) throw DataError("-", csv, "cannot open for writing");
  if (!o.resume)
    loss << "# config " << config::hash_hex(hash) << "\n"
         << "step,total,cls,reg,dir,depth_aux\n";
  loss << std::setprecision(17);
  trainer.fit(
      samples, cfg.train.steps,
      [&](long step, const detect::Losses& L) {
        loss << step << "," << L.total.value() << "," << L.cls.value() << "," << L.reg.value()
             << "," << L.dir.value() << "," << L.depth_aux.value() << "\n";
      },
      start);
  loss.flush();
  if (!loss) throw DataError("-", csv, "loss log write failed");

  checkpoint::save(ckpt, m, &trainer.opt, cfg.train.steps, hash);
  config::save(cfg, (out / "config.json").string());
  std::cout << "trained " << (cfg.train.steps - start) << " steps (total " << cfg.train.steps
            << ") on " << samples.size() << " frames\ncheckpoint " << ckpt << "\n";
  return 0;
}

int cmd_eval(const CLI::App* c, const Opts& o) {
  auto cfg = make_config(c, o);
  const auto hash = config::compatibility_hash(cfg);
  auto samples = load_split(cfg, o.dataset, o.split);

  model::Model m(cfg.model);
  checkpoint::load(o.ckpt, m, nullptr, hash);

  const fs::path out = resolve_out(c, o);
  fs::create_directories(out / "detections");

  std::vector<evaluation::EvalFrame> frames;
  frames.reserve(samples.size());
  for (const auto& s : samples) {
    evaluation::EvalFrame f;
    f.frame_id = s.id;
    f.gts = s.gt;
    f.dets = model::detect_sample(m, s);
    evaluation::write_detections((out / "detections" / (s.id + ".txt")).string(), f.dets);
    if (o.heatmaps) write_heatmaps(m, s, out / "heatmaps");
    frames.push_back(std::move(f));
  }

  nlohmann::json j;
  j["config"] = config::hash_hex(hash);
  j["split"] = o.split;
  j["frames"] = static_cast<int>(frames.size());
  j["all"] = metrics_block(frames, cfg);
  if (o.roi == "vod-corridor") {
    std::vector<evaluation::EvalFrame> corridor = frames;
    for (auto& f : corridor) {
      f.dets = evaluation::roi_filter(f.dets, cfg.roi, cfg.model.camera);
      f.gts = evaluation::roi_filter(f.gts, cfg.roi, cfg.model.camera);
    }
    j["roi"] = metrics_block(corridor, cfg);
  }

  {
    std::ofstream jf(out / "metrics.json");
    if (!jf) throw DataError("-", (out / "metrics.json").string(), "cannot open for writing");
    jf << j.dump(2) << "\n";
  }
  {
    std::ofstream cf(out / "metrics.csv");
    if (!cf) throw DataError("-", (out / "metrics.csv").string(), "cannot open for writing");
    cf << "# config " << config::hash_hex(hash) << "\n"
       << "scope,class,ap_3d,ap_bev\n"
       << std::setprecision(17);
    csv_metric_rows(cf, "all", j["all"]);
    if (j.contains("roi")) csv_metric_rows(cf, "roi", j["roi"]);
  }
  config::save(cfg, (out / "config.json").string());

  std::cout << "evaluated " << frames.size() << " frames (" << o.split << " split)\n"
            << "mAP 3d  " << j["all"]["map_3d"].get<double>() << "\n"
            << "mAP bev " << j["all"]["map_bev"].get<double>() << "\n";
  if (j.contains("roi"))
    std::cout << "corridor mAP 3d  " << j["roi"]["map_3d"].get<double>() << "\n"
              << "corridor mAP bev " << j["roi"]["map_bev"].get<double>() << "\n";
  std::cout << "metrics " << (out / "metrics.json").string() << "\n";
  return 0;
}

int cmd_ft(const CLI::App* c, const Opts& o) {
  auto cfg = make_config(c, o);
  const auto hash = config::compatibility_hash(cfg);
  auto samples = load_split(cfg, o.dataset, o.split);

  model::Model m(cfg.model);
  checkpoint::load(o.ckpt, m, nullptr, hash);

  const fs::path out = resolve_out(c, o);
  fs::create_directories(out);

  const bool corridor = o.roi == "vod-corridor";
  std::vector<ad::Tensor> images;
  std::vector<std::vector<boxes::Box3D>> gts;
  for (const auto& s : samples) {
    images.push_back(s.image);
    gts.push_back(corridor ? evaluation::roi_filter(s.gt, cfg.roi, cfg.model.camera) : s.gt);
  }
  auto run_model = [&](int f, const ad::Tensor& image) {
    ad::NoGradGuard guard;
    auto dets = m.detections(m.forward(image, samples[static_cast<std::size_t>(f)].cloud,
                                       samples[static_cast<std::size_t>(f)].key));
    return corridor ? evaluation::roi_filter(dets, cfg.roi, cfg.model.camera) : dets;
  };

  auto report = evaluation::failure_test(images, gts, run_model, eval_config(cfg), cfg.ft);
  const auto hex = config::hash_hex(hash);
  evaluation::write_ft_csv((out / "ft.csv").string(), report, class_names(cfg), hex);
  evaluation::write_ft_json((out / "ft.json").string(), report, class_names(cfg), hex);
  config::save(cfg, (out / "config.json").string());

  std::cout << "failure test on " << samples.size() << " frames (" << o.split << " split), "
            << report.cfg.runs << " run(s), sigma " << report.cfg.sigma << "\n";
  for (const auto& cell : report.cells)
    std::cout << "  rho " << cell.rho << "  mean mAP " << cell.mean_map << "  std "
              << cell.std_map << "\n";
  std::cout << "report " << (out / "ft.csv").string() << "\n";
  return 0;
}

geometry::CameraModel scaled_camera(const geometry::CameraModel& cam, int h, int w) {
  geometry::CameraModel c = cam;
  const double sx = static_cast<double>(w) / cam.width;
  const double sy = static_cast<double>(h) / cam.height;
  c.height = h;
  c.width = w;
  c.intrinsics(0, 0) *= sx;
  c.intrinsics(0, 2) *= sx;
  c.intrinsics(1, 1) *= sy;
  c.intrinsics(1, 2) *= sy;
  return c;
}

int cmd_sweep_res(const CLI::App* c, const Opts& o) {
  auto cfg = make_config(c, o);
  const auto hash = config::compatibility_hash(cfg);
  const fs::path out = resolve_out(c, o);
  fs::create_directories(out);

  const int stride = cfg.model.image_encoder.total_stride();
  // retrains from scratch per (scale, lift conditioning) cell and scores the
  // training frames; the radar cloud and boxes are resolution-independent
  auto train_eval = [&](int h, int w, bool rdl_on) {
    config::ExperimentConfig run = cfg;
    run.model.ablate_rdl = !rdl_on;
    run.model.camera = scaled_camera(cfg.model.camera, h, w);
    run.validate();

    auto ds = synth::generate_dataset(run.scene(), run.data.train_frames);
    std::vector<model::Sample> samples;
    for (const auto& f : ds.frames) samples.push_back(model::make_sample(f));

    model::Model m(run.model);
    model::Trainer trainer(&m, run.train.lr);
    trainer.fit(samples, run.train.steps);

    std::vector<evaluation::EvalFrame> frames(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      frames[i].frame_id = samples[i].id;
      frames[i].gts = samples[i].gt;
      frames[i].dets = model::detect_sample(m, samples[i]);
    }
    const auto ec = eval_config(run);
    const double map3 = evaluation::evaluate_map(frames, ec, true).map;
    const double mapb = evaluation::evaluate_map(frames, ec, false).map;
    std::cout << "  " << h << "x" << w << " rdl " << (rdl_on ? "on " : "off") << " mAP3d "
              << map3 << " mAPbev " << mapb << "\n";
    return std::make_pair(map3, mapb);
  };

  std::cout << "resolution sweep: " << cfg.data.train_frames << " frames, " << cfg.train.steps
            << " steps per cell\n";
  auto rows = evaluation::sweep_resolution({0.25, 0.5, 0.75, 1.0}, cfg.model.camera.height,
                                           cfg.model.camera.width, stride, train_eval);
  const auto hex = config::hash_hex(hash);
  evaluation::write_sweep_csv((out / "sweep.csv").string(), rows, hex);
  config::save(cfg, (out / "config.json").string());
  std::cout << "table " << (out / "sweep.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"radar-camera BEV fusion experiments on synthetic scenes"};
  app.require_subcommand(1);
  Opts o;

  auto* c_synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_config_opts(c_synth, o);

  auto* c_train = app.add_subcommand("train", "train a model on a dataset");
  add_config_opts(c_train, o);
  c_train->add_option("--dataset", o.dataset, "dataset directory")->required();
  c_train->add_flag("--resume", o.resume, "continue from the checkpoint in the output directory");

  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_config_opts(c_eval, o);
  c_eval->add_option("--dataset", o.dataset, "dataset directory")->required();
  c_eval->add_option("--checkpoint", o.ckpt, "checkpoint file")->required();
  c_eval->add_option("--split", o.split, "frame split: train | eval | all")
      ->check(CLI::IsMember({"train", "eval", "all"}));
  c_eval->add_option("--roi", o.roi, "also score the driving corridor: none | vod-corridor")
      ->check(CLI::IsMember({"none", "vod-corridor"}));
  c_eval->add_flag("--debug-heatmaps", o.heatmaps, "export per-cell modality weight maps");

  auto* c_ft = app.add_subcommand("ft", "failure-test noise sweep over a checkpoint");
  add_config_opts(c_ft, o);
  c_ft->add_option("--dataset", o.dataset, "dataset directory")->required();
  c_ft->add_option("--checkpoint", o.ckpt, "checkpoint file")->required();
  c_ft->add_option("--split", o.split, "frame split: train | eval | all")
      ->check(CLI::IsMember({"train", "eval", "all"}));
  c_ft->add_option("--roi", o.roi, "score inside the driving corridor: none | vod-corridor")
      ->check(CLI::IsMember({"none", "vod-corridor"}));

  auto* c_sweep = app.add_subcommand("sweep-res", "image resolution study (retrains per scale)");
  add_config_opts(c_sweep, o);

  try {
    app.parse(argc, argv);
    if (c_synth->parsed()) return cmd_synth(c_synth, o);
    if (c_train->parsed()) return cmd_train(c_train, o);
    if (c_eval->parsed()) return cmd_eval(c_eval, o);
    if (c_ft->parsed()) return cmd_ft(c_ft, o);
    if (c_sweep->parsed()) return cmd_sweep_res(c_sweep, o);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const IncompatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
