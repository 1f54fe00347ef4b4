#include "bevfuse/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>

#include "bevfuse/common.hpp"
#include "bevfuse/rng.hpp"

namespace bevfuse::evaluation {

void NoiseSpec::validate() const {
  if (rho < 0.0) throw ConfigError("noise level rho must be >= 0");
  if (sigma <= 0.0) throw ConfigError("noise sigma must be > 0");
}

std::vector<double> noise_field(std::size_t count, const NoiseSpec& spec) {
  spec.validate();
  std::vector<double> out(count);
  Rng rng(spec.seed);
  for (double& v : out) v = spec.rho * rng.normal(0.0, spec.sigma);
  return out;
}

ad::Tensor inject_noise(const ad::Tensor& image, const NoiseSpec& spec) {
  spec.validate();
  ad::Tensor out(image.shape(), false);
  if (spec.rho == 0.0) {
    std::copy(image.data(), image.data() + image.numel(), out.data());
    return out;
  }
  auto noise = noise_field(image.numel(), spec);
  for (std::size_t i = 0; i < image.numel(); ++i)
    out.data()[i] = std::clamp(image.data()[i] + noise[i], 0.0, 1.0);
  return out;
}

void EvalConfig::validate() const {
  if (iou_thresholds.empty()) throw ConfigError("evaluation needs per-class IoU thresholds");
  for (const auto& [cls, thr] : iou_thresholds)
    if (!(thr > 0.0 && thr <= 1.0)) throw ConfigError("IoU threshold must be in (0,1]");
  if (interp_points < 1) throw ConfigError("interp_points must be >= 1");
}

double average_precision(const std::vector<EvalFrame>& frames, double iou_thr, int class_id,
                         int interp_points, bool use_3d_iou) {
  struct DetRef {
    double score;
    int frame, index;
  };
  std::vector<DetRef> dets;
  int num_gt = 0;
  for (int f = 0; f < static_cast<int>(frames.size()); ++f) {
    for (int d = 0; d < static_cast<int>(frames[f].dets.size()); ++d)
      if (frames[f].dets[d].class_id == class_id)
        dets.push_back({frames[f].dets[d].score, f, d});
    for (const auto& g : frames[f].gts)
      if (g.class_id == class_id) ++num_gt;
  }
  if (num_gt == 0) return 0.0;
  std::sort(dets.begin(), dets.end(), [](const DetRef& a, const DetRef& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.frame != b.frame) return a.frame < b.frame;
    return a.index < b.index;
  });

  std::vector<std::vector<bool>> gt_used(frames.size());
  for (std::size_t f = 0; f < frames.size(); ++f)
    gt_used[f].assign(frames[f].gts.size(), false);

  std::vector<int> tp(dets.size(), 0);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto& frame = frames[dets[i].frame];
    const auto& det = frame.dets[dets[i].index];
    double best = 0.0;
    int best_g = -1;
    for (int g = 0; g < static_cast<int>(frame.gts.size()); ++g) {
      if (frame.gts[g].class_id != class_id || gt_used[dets[i].frame][g]) continue;
      const double iou = use_3d_iou ? boxes::rotated_iou_3d(det, frame.gts[g])
                                    : boxes::rotated_iou_bev(det, frame.gts[g]);
      if (iou > best) {
        best = iou;
        best_g = g;
      }
    }
    if (best_g >= 0 && best >= iou_thr) {
      tp[i] = 1;
      gt_used[dets[i].frame][best_g] = true;
    }
  }

  std::vector<double> precision(dets.size()), recall(dets.size());
  int cum_tp = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    cum_tp += tp[i];
    precision[i] = static_cast<double>(cum_tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(cum_tp) / num_gt;
  }

  double ap = 0.0;
  for (int k = 1; k <= interp_points; ++k) {
    const double r = static_cast<double>(k) / interp_points;
    double p_max = 0.0;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (recall[i] >= r) p_max = std::max(p_max, precision[i]);
    ap += p_max;
  }
  return ap / interp_points;
}

MapResult evaluate_map(const std::vector<EvalFrame>& frames, const EvalConfig& cfg,
                       bool use_3d_iou) {
  cfg.validate();
  MapResult out;
  double total = 0.0;
  int counted = 0;
  for (const auto& [cls, thr] : cfg.iou_thresholds) {
    bool has_gt = false;
    for (const auto& f : frames)
      for (const auto& g : f.gts)
        if (g.class_id == cls) has_gt = true;
    if (!has_gt) {
      out.skipped_classes.push_back(cls);
      continue;
    }
    const double ap = average_precision(frames, thr, cls, cfg.interp_points, use_3d_iou);
    out.per_class[cls] = ap;
    total += ap;
    ++counted;
  }
  out.map = counted > 0 ? total / counted : 0.0;
  return out;
}

std::vector<boxes::Box3D> roi_filter(const std::vector<boxes::Box3D>& boxes_ego,
                                     const RoiSpec& roi, const geometry::CameraModel& cam) {
  std::vector<boxes::Box3D> kept;
  for (const auto& b : boxes_ego) {
    const Eigen::Vector3d pc = cam.to_camera(Eigen::Vector3d(b.x, b.y, b.z));
    if (std::abs(pc.x()) <= roi.lateral_max && pc.z() <= roi.forward_max) kept.push_back(b);
  }
  return kept;
}

void FTConfig::validate() const {
  if (rho_list.empty()) throw ConfigError("failure test needs at least one rho");
  for (double r : rho_list)
    if (r < 0.0) throw ConfigError("noise level rho must be >= 0");
  if (runs < 1) throw ConfigError("failure test needs runs >= 1");
  if (sigma <= 0.0) throw ConfigError("noise sigma must be > 0");
}

FTReport failure_test(const std::vector<ad::Tensor>& images,
                      const std::vector<std::vector<boxes::Box3D>>& gts,
                      const std::function<std::vector<boxes::Box3D>(int, const ad::Tensor&)>& model,
                      const EvalConfig& eval_cfg, const FTConfig& ft) {
  ft.validate();
  eval_cfg.validate();
  if (images.size() != gts.size()) throw ConfigError("failure test image/gt count mismatch");

  FTReport report;
  report.cfg = ft;
  for (std::size_t ri = 0; ri < ft.rho_list.size(); ++ri) {
    const double rho = ft.rho_list[ri];
    std::vector<double> run_maps;
    std::map<int, double> class_sum;
    std::map<int, int> class_count;
    for (int run = 0; run < ft.runs; ++run) {
      std::vector<EvalFrame> frames(images.size());
      for (std::size_t f = 0; f < images.size(); ++f) {
        NoiseSpec spec{rho, ft.sigma,
                       derive_seed(ft.base_seed, "ft",
                                   {static_cast<std::uint64_t>(ri), static_cast<std::uint64_t>(run),
                                    static_cast<std::uint64_t>(f)})};
        ad::Tensor noisy = inject_noise(images[f], spec);
        frames[f].dets = model(static_cast<int>(f), noisy);
        frames[f].gts = gts[f];
      }
      MapResult res = evaluate_map(frames, eval_cfg);
      run_maps.push_back(res.map);
      for (const auto& [cls, ap] : res.per_class) {
        class_sum[cls] += ap;
        class_count[cls] += 1;
      }
    }
    FTCell cell;
    cell.rho = rho;
    double mean = 0.0;
    for (double m : run_maps) mean += m;
    mean /= run_maps.size();
    cell.mean_map = mean;
    if (run_maps.size() > 1) {
      double ss = 0.0;
      for (double m : run_maps) ss += (m - mean) * (m - mean);
      cell.std_map = std::sqrt(ss / (run_maps.size() - 1));
    }
    for (const auto& [cls, s] : class_sum) cell.mean_class_ap[cls] = s / class_count[cls];
    report.cells.push_back(cell);
  }
  return report;
}

namespace {

std::string class_label(const std::vector<std::string>& names, int cls) {
  if (cls >= 0 && cls < static_cast<int>(names.size())) return names[cls];
  return "class" + std::to_string(cls);
}

}  // namespace

void write_ft_csv(const std::string& path, const FTReport& report,
                  const std::vector<std::string>& class_names, const std::string& config_hex) {
  std::ofstream out(path);
  if (!out) throw DataError("-", path, "cannot open for writing");
  if (!config_hex.empty()) out << "# config " << config_hex << "\n";
  std::vector<int> classes;
  for (const auto& cell : report.cells)
    for (const auto& [cls, ap] : cell.mean_class_ap)
      if (std::find(classes.begin(), classes.end(), cls) == classes.end()) classes.push_back(cls);
  std::sort(classes.begin(), classes.end());

  out << "rho,mean_map,std_map";
  for (int cls : classes) out << ",ap_" << class_label(class_names, cls);
  out << "\n";
  out << std::setprecision(17);
  for (const auto& cell : report.cells) {
    out << cell.rho << "," << cell.mean_map << "," << cell.std_map;
    for (int cls : classes) {
      out << ",";
      auto it = cell.mean_class_ap.find(cls);
      if (it != cell.mean_class_ap.end()) out << it->second;
    }
    out << "\n";
  }
}

void write_ft_json(const std::string& path, const FTReport& report,
                   const std::vector<std::string>& class_names, const std::string& config_hex) {
  nlohmann::json j;
  if (!config_hex.empty()) j["config"] = config_hex;
  j["sigma"] = report.cfg.sigma;
  j["runs"] = report.cfg.runs;
  j["base_seed"] = report.cfg.base_seed;
  j["cells"] = nlohmann::json::array();
  for (const auto& cell : report.cells) {
    nlohmann::json c;
    c["rho"] = cell.rho;
    c["mean_map"] = cell.mean_map;
    c["std_map"] = cell.std_map;
    for (const auto& [cls, ap] : cell.mean_class_ap)
      c["mean_class_ap"][class_label(class_names, cls)] = ap;
    j["cells"].push_back(c);
  }
  std::ofstream out(path);
  if (!out) throw DataError("-", path, "cannot open for writing");
  out << j.dump(2) << "\n";
}

std::vector<SweepRow> sweep_resolution(
    const std::vector<double>& scales, int full_h, int full_w, int stride,
    const std::function<std::pair<double, double>(int, int, bool)>& train_eval) {
  std::vector<SweepRow> rows;
  for (double scale : scales) {
    int h = static_cast<int>(full_h * scale) / stride * stride;
    int w = static_cast<int>(full_w * scale) / stride * stride;
    h = std::max(h, stride);
    w = std::max(w, stride);

    SweepRow off;
    off.scale = scale;
    off.img_h = h;
    off.img_w = w;
    off.rdl = false;
    std::tie(off.map_3d, off.map_bev) = train_eval(h, w, false);
    off.delta_3d_pct = 0.0;
    off.delta_bev_pct = 0.0;
    rows.push_back(off);

    SweepRow on = off;
    on.rdl = true;
    std::tie(on.map_3d, on.map_bev) = train_eval(h, w, true);
    on.delta_3d_pct = off.map_3d != 0.0 ? (on.map_3d - off.map_3d) / off.map_3d * 100.0 : 0.0;
    on.delta_bev_pct =
        off.map_bev != 0.0 ? (on.map_bev - off.map_bev) / off.map_bev * 100.0 : 0.0;
    rows.push_back(on);
  }
  return rows;
}

void write_detections(const std::string& path, const std::vector<boxes::Box3D>& dets) {
  std::ofstream out(path);
  if (!out) throw DataError("-", path, "cannot open detections file for writing");
  out << "# class score x y z l w h yaw\n" << std::setprecision(17);
  for (const auto& d : dets)
    out << d.class_id << " " << d.score << " " << d.x << " " << d.y << " " << d.z << " " << d.l
        << " " << d.w << " " << d.h << " " << d.yaw << "\n";
  if (!out) throw DataError("-", path, "detections write failed");
}

std::vector<boxes::Box3D> read_detections(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("-", path, "cannot open detections file");
  std::vector<boxes::Box3D> dets;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    boxes::Box3D b;
    if (!(ss >> b.class_id >> b.score >> b.x >> b.y >> b.z >> b.l >> b.w >> b.h >> b.yaw))
      throw DataError("-", path, "malformed detection record");
    dets.push_back(b);
  }
  return dets;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows,
                     const std::string& config_hex) {
  std::ofstream out(path);
  if (!out) throw DataError("-", path, "cannot open for writing");
  if (!config_hex.empty()) out << "# config " << config_hex << "\n";
  out << "scale,image_size,rdl,map_3d,delta_3d,map_bev,delta_bev\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line << r.scale << "," << r.img_h << "x" << r.img_w << "," << (r.rdl ? 1 : 0) << ","
         << std::setprecision(17) << r.map_3d << ","
         << std::fixed << std::setprecision(1) << r.delta_3d_pct << "%,";
    line.unsetf(std::ios_base::fixed);
    line << std::setprecision(17) << r.map_bev << ","
         << std::fixed << std::setprecision(1) << r.delta_bev_pct << "%";
    out << line.str() << "\n";
  }
}

}  // namespace bevfuse::evaluation
