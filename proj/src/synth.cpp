#include "bevfuse/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "bevfuse/common.hpp"
#include "bevfuse/rng.hpp"

static_assert(std::endian::native == std::endian::little, "on-disk format is little-endian");

namespace bevfuse::synth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// every stored continuous value passes through float32 so the on-disk round
// trip is bit-exact; the volatile hop keeps gcc's slp vectorizer from folding
// the double->float->double pair back to identity
double q32(double v) {
  volatile float f = static_cast<float>(v);
  return static_cast<double>(f);
}

}  // namespace

void SceneConfig::validate() const {
  if (classes.empty()) throw ConfigError("scene needs at least one object class");
  for (const auto& c : classes) {
    if (c.l_std < 0 || c.w_std < 0 || c.h_std < 0 || c.rcs_std < 0)
      throw ConfigError("negative distribution std for class " + c.name);
    if (c.l_mean <= 0 || c.w_mean <= 0 || c.h_mean <= 0)
      throw ConfigError("non-positive dims for class " + c.name);
  }
  if (min_objects < 0 || max_objects < min_objects) throw ConfigError("bad objects-per-frame range");
  if (min_points_per_object < 1 || max_points_per_object < min_points_per_object)
    throw ConfigError("bad points-per-object range");
  if (clutter_fraction < 0) throw ConfigError("negative clutter fraction");
  camera.validate();
  grid.validate();
  schema.validate();
}

ad::Tensor image_tensor(const Frame& f) {
  ad::Tensor t(std::vector<int>{3, f.img_h, f.img_w}, false);
  for (std::size_t i = 0; i < f.image.size(); ++i)
    t.data()[i] = static_cast<double>(f.image[i]) / 255.0;
  return t;
}

namespace {

struct Placed {
  boxes::Box3D box;
  ObjectMeta meta;
  int class_id;
};

bool overlaps_any(const boxes::Box3D& b, const std::vector<Placed>& placed) {
  for (const auto& p : placed) {
    const double min_gap =
        0.5 * (std::hypot(b.l, b.w) + std::hypot(p.box.l, p.box.w)) * 0.5 + 0.3;
    if (std::hypot(b.x - p.box.x, b.y - p.box.y) < min_gap) return true;
    if (boxes::rotated_iou_bev(b, p.box) > 0.0) return true;
  }
  return false;
}

void fill_extras(const SceneConfig& cfg, const Eigen::Vector3d& p, double rcs, double vx,
                 double vy, std::vector<double>& extras) {
  if (cfg.schema.name == "vod") {
    const double r = p.norm();
    const double vr = r > 1e-9 ? (vx * p.x() + vy * p.y()) / r : 0.0;
    extras.push_back(q32(rcs));
    extras.push_back(q32(vr));
    extras.push_back(q32(vr));  // ego static, compensated equals raw
    extras.push_back(0.0);      // single sweep
  } else if (cfg.schema.name == "tj4d") {
    extras.push_back(q32(p.norm()));
    extras.push_back(q32(rcs));
    extras.push_back(q32(std::atan2(p.y(), p.x())));
    extras.push_back(q32(std::atan2(p.z(), std::hypot(p.x(), p.y()))));
  } else {
    throw ConfigError("no generator for radar schema " + cfg.schema.name);
  }
}

// convex hull via monotone chain; points need not be distinct
std::vector<Eigen::Vector2d> convex_hull(std::vector<Eigen::Vector2d> pts) {
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
    if (a.x() != b.x()) return a.x() < b.x();
    return a.y() < b.y();
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const auto& a, const auto& b) { return a == b; }),
            pts.end());
  if (pts.size() < 3) return pts;
  auto cross = [](const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  std::vector<Eigen::Vector2d> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  const std::size_t lower = k + 1;
  for (std::size_t i = pts.size() - 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

void fill_hull(std::vector<double>& rgb, int h, int w, const std::vector<Eigen::Vector2d>& hull,
               const std::array<double, 3>& color) {
  if (hull.size() < 3) return;
  double vmin = 1e30, vmax = -1e30;
  for (const auto& p : hull) {
    vmin = std::min(vmin, p.y());
    vmax = std::max(vmax, p.y());
  }
  const int v0 = std::max(0, static_cast<int>(std::floor(vmin)));
  const int v1 = std::min(h - 1, static_cast<int>(std::ceil(vmax)));
  const std::size_t n = hull.size();
  for (int v = v0; v <= v1; ++v) {
    const double yc = v + 0.5;
    double xmin = 1e30, xmax = -1e30;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& a = hull[i];
      const auto& b = hull[(i + 1) % n];
      if ((a.y() <= yc) == (b.y() <= yc)) continue;
      const double t = (yc - a.y()) / (b.y() - a.y());
      const double x = a.x() + t * (b.x() - a.x());
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
    }
    if (xmin > xmax) continue;
    const int u0 = std::max(0, static_cast<int>(std::floor(xmin + 0.5)));
    const int u1 = std::min(w - 1, static_cast<int>(std::floor(xmax - 0.5)));
    for (int u = u0; u <= u1; ++u)
      for (int c = 0; c < 3; ++c)
        rgb[static_cast<std::size_t>(c) * h * w + static_cast<std::size_t>(v) * w + u] = color[c];
  }
}

std::vector<std::uint8_t> render_image(const SceneConfig& cfg, const std::vector<Placed>& objects) {
  const auto& cam = cfg.camera;
  const int h = cam.height, w = cam.width;
  std::vector<double> rgb(3 * static_cast<std::size_t>(h) * w, 0.0);
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  Eigen::Matrix3d Kinv = cam.intrinsics.inverse();
  const Eigen::Vector3d cam_origin = cam.to_ego(Eigen::Vector3d::Zero());
  const double horizon = cam.intrinsics(1, 2);

  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      double r, g, b;
      if (v + 0.5 < horizon) {
        const double t = (v + 0.5) / std::max(1.0, horizon);
        r = 0.45 + 0.10 * t;
        g = 0.62 + 0.12 * t;
        b = 0.85 + 0.05 * t;
      } else {
        const Eigen::Vector3d dir_cam = Kinv * Eigen::Vector3d(u + 0.5, v + 0.5, 1.0);
        const Eigen::Vector3d dir = cam.to_ego(dir_cam) - cam_origin;
        r = 0.32;
        g = 0.30;
        b = 0.28;
        if (dir.z() < -1e-9) {
          const double t = -cam_origin.z() / dir.z();
          const Eigen::Vector3d gp = cam_origin + t * dir;
          const double dist = std::hypot(gp.x(), gp.y());
          double shade = 1.2 / (1.0 + 0.03 * dist);
          const double fx = gp.x() - 4.0 * std::floor(gp.x() / 4.0);
          if (fx < 0.25) shade *= 1.35;
          if (std::abs(gp.y()) < 0.12) shade *= 1.25;
          shade = std::clamp(shade, 0.15, 1.6);
          r *= shade;
          g *= shade;
          b *= shade;
        }
      }
      rgb[0 * plane + static_cast<std::size_t>(v) * w + u] = r;
      rgb[1 * plane + static_cast<std::size_t>(v) * w + u] = g;
      rgb[2 * plane + static_cast<std::size_t>(v) * w + u] = b;
    }
  }

  // painter order: far to near
  std::vector<int> order(objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double da = std::hypot(objects[a].box.x, objects[a].box.y);
    const double db = std::hypot(objects[b].box.x, objects[b].box.y);
    if (da != db) return da > db;
    return a < b;
  });
  for (int oi : order) {
    const auto& obj = objects[oi];
    const auto corners2d = boxes::bev_corners(obj.box);
    std::vector<Eigen::Vector3d> corners;
    for (const auto& c2 : corners2d) {
      corners.emplace_back(c2.x(), c2.y(), obj.box.z - 0.5 * obj.box.h);
      corners.emplace_back(c2.x(), c2.y(), obj.box.z + 0.5 * obj.box.h);
    }
    auto proj = geometry::project_to_image(corners, cfg.camera);
    std::vector<Eigen::Vector2d> pts;
    bool ok = true;
    for (const auto& p : proj) {
      if (p.depth < 0.2) ok = false;
      pts.emplace_back(p.u, p.v);
    }
    if (!ok) continue;
    const double dist = std::hypot(obj.box.x, obj.box.y);
    const double bright = std::clamp(1.25 / (1.0 + 0.035 * dist), 0.3, 1.1);
    const auto& base = cfg.classes[obj.class_id].color;
    std::array<double, 3> color{base[0] * bright, base[1] * bright, base[2] * bright};
    fill_hull(rgb, h, w, convex_hull(pts), color);
  }

  std::vector<std::uint8_t> out(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(rgb[i], 0.0, 1.0)));
  return out;
}

}  // namespace

Frame generate_frame(const SceneConfig& cfg, std::uint64_t frame_seed, const std::string& id) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, "frame", {frame_seed}));
  Frame frame;
  frame.id = id;
  frame.img_h = cfg.camera.height;
  frame.img_w = cfg.camera.width;
  frame.cloud.schema = cfg.schema;

  const int want =
      cfg.min_objects + static_cast<int>(rng.uniform_index(cfg.max_objects - cfg.min_objects + 1));
  frame.requested_objects = want;

  const double fov_slope = cfg.camera.intrinsics(0, 2) / cfg.camera.intrinsics(0, 0);
  std::vector<Placed> placed;
  for (int n = 0; n < want; ++n) {
    const int cls = static_cast<int>(rng.uniform_index(cfg.classes.size()));
    const ClassGen& g = cfg.classes[cls];
    boxes::Box3D b;
    b.l = q32(std::max(0.6, rng.normal(g.l_mean, g.l_std)));
    b.w = q32(std::max(0.4, rng.normal(g.w_mean, g.w_std)));
    b.h = q32(std::max(0.4, rng.normal(g.h_mean, g.h_std)));
    b.z = q32(g.z_center);
    b.class_id = cls;
    bool done = false;
    for (int attempt = 0; attempt < cfg.max_place_retries && !done; ++attempt) {
      const double margin = 0.5 * std::hypot(b.l, b.w) + 0.2;
      const double x_lo = std::max(cfg.grid.x_min + margin, 3.0);
      const double x_hi = cfg.grid.x_max - margin;
      if (x_hi <= x_lo) break;
      const double x = rng.uniform(x_lo, x_hi);
      const double y_span = std::min(cfg.grid.y_max - margin, 0.85 * fov_slope * x);
      if (y_span <= 0.0) continue;
      const double y = rng.uniform(-y_span, y_span);
      const double yaw = rng.uniform(-M_PI, M_PI);
      b.x = q32(x);
      b.y = q32(y);
      b.yaw = q32(boxes::wrap_to_pi(yaw));
      if (!overlaps_any(b, placed)) done = true;
    }
    if (!done) continue;
    Placed p;
    p.box = b;
    p.class_id = cls;
    const double speed = g.speed_max > 0.0 ? rng.uniform(0.0, g.speed_max) : 0.0;
    p.meta.vx = q32(speed * std::cos(b.yaw));
    p.meta.vy = q32(speed * std::sin(b.yaw));
    placed.push_back(p);
  }

  // radar returns: camera-facing box surfaces, then ground clutter
  int total_obj_points = 0;
  for (auto& p : placed) {
    const int npts = cfg.min_points_per_object +
                     static_cast<int>(rng.uniform_index(
                         cfg.max_points_per_object - cfg.min_points_per_object + 1));
    const ClassGen& g = cfg.classes[p.class_id];
    const double cy_ = std::cos(p.box.yaw), sy_ = std::sin(p.box.yaw);
    const Eigen::Vector2d to_sensor =
        Eigen::Vector2d(-p.box.x, -p.box.y).normalized();
    // outward BEV normals of the four side faces
    const Eigen::Vector2d normals[4] = {{cy_, sy_}, {-cy_, -sy_}, {-sy_, cy_}, {sy_, -cy_}};
    double weights[5];
    double wsum = 0.0;
    for (int f = 0; f < 4; ++f) {
      weights[f] = std::max(0.0, normals[f].dot(to_sensor));
      wsum += weights[f];
    }
    weights[4] = 0.15 * std::max(wsum, 1e-6);  // top face
    wsum += weights[4];

    int emitted = 0;
    for (int k = 0; k < npts; ++k) {
      double pick = rng.uniform(0.0, wsum);
      int face = 0;
      while (face < 4 && pick > weights[face]) {
        pick -= weights[face];
        ++face;
      }
      // local box coordinates: u along l, v along w, z vertical
      double lu, lv, lz;
      const double jitter = rng.normal(0.0, 0.02);
      if (face == 0 || face == 1) {
        lu = (face == 0 ? 0.5 : -0.5) * p.box.l + jitter;
        lv = rng.uniform(-0.5, 0.5) * p.box.w * 0.96;
        lz = rng.uniform(-0.42, 0.42) * p.box.h;
      } else if (face == 2 || face == 3) {
        lu = rng.uniform(-0.5, 0.5) * p.box.l * 0.96;
        lv = (face == 2 ? 0.5 : -0.5) * p.box.w + jitter;
        lz = rng.uniform(-0.42, 0.42) * p.box.h;
      } else {
        lu = rng.uniform(-0.5, 0.5) * p.box.l * 0.96;
        lv = rng.uniform(-0.5, 0.5) * p.box.w * 0.96;
        lz = 0.5 * p.box.h + jitter;
      }
      Eigen::Vector3d pt(p.box.x + cy_ * lu - sy_ * lv, p.box.y + sy_ * lu + cy_ * lv,
                         p.box.z + lz);
      pt = Eigen::Vector3d(q32(pt.x()), q32(pt.y()), q32(pt.z()));
      const double rcs = rng.normal(g.rcs_mean, g.rcs_std);
      frame.cloud.xyz.push_back(pt);
      fill_extras(cfg, pt, rcs, p.meta.vx, p.meta.vy, frame.cloud.extras);
      ++emitted;
    }
    p.meta.num_radar_points = emitted;
    total_obj_points += emitted;
  }

  const int clutter = static_cast<int>(std::lround(cfg.clutter_fraction * total_obj_points));
  for (int k = 0; k < clutter; ++k) {
    Eigen::Vector3d pt(q32(rng.uniform(cfg.grid.x_min, cfg.grid.x_max)),
                       q32(rng.uniform(cfg.grid.y_min, cfg.grid.y_max)),
                       q32(0.03 + std::abs(rng.normal(0.0, 0.03))));
    const double rcs = rng.normal(cfg.clutter_rcs_mean, cfg.clutter_rcs_std);
    frame.cloud.xyz.push_back(pt);
    fill_extras(cfg, pt, rcs, 0.0, 0.0, frame.cloud.extras);
  }

  for (const auto& p : placed) {
    frame.gt.push_back(p.box);
    frame.meta.push_back(p.meta);
  }
  frame.image = render_image(cfg, placed);
  return frame;
}

Dataset generate_dataset(const SceneConfig& cfg, int num_frames) {
  Dataset ds;
  ds.cfg = cfg;
  char buf[16];
  for (int i = 0; i < num_frames; ++i) {
    std::snprintf(buf, sizeof(buf), "%06d", i);
    ds.frames.push_back(generate_frame(cfg, static_cast<std::uint64_t>(i), buf));
  }
  return ds;
}

// ------------------------------------------------------------------- on disk

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
void put_i32(std::ofstream& out, std::int32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
void put_f32(std::ofstream& out, double v) {
  const float f = static_cast<float>(v);
  out.write(reinterpret_cast<const char*>(&f), 4);
}

std::uint32_t get_u32(std::ifstream& in, const std::string& frame, const std::string& field) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw DataError(frame, field, "truncated record");
  return v;
}
std::int32_t get_i32(std::ifstream& in, const std::string& frame, const std::string& field) {
  std::int32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw DataError(frame, field, "truncated record");
  return v;
}
double get_f32(std::ifstream& in, const std::string& frame, const std::string& field) {
  float v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 4)) throw DataError(frame, field, "truncated record");
  return static_cast<double>(v);
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

geometry::CameraModel camera_from_json(const json& j) {
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

geometry::BEVGridSpec grid_from_json(const json& j) {
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

json schema_to_json(const radar::RadarSchema& s) {
  return json{{"name", s.name},
              {"channels", s.extra_channels},
              {"shift", s.shift},
              {"scale", s.scale}};
}

radar::RadarSchema schema_from_json(const json& j) {
  radar::RadarSchema s;
  s.name = j.at("name");
  s.extra_channels = j.at("channels").get<std::vector<std::string>>();
  s.shift = j.at("shift").get<std::vector<double>>();
  s.scale = j.at("scale").get<std::vector<double>>();
  return s;
}

json classgen_to_json(const ClassGen& c) {
  return json{{"name", c.name},     {"l", {c.l_mean, c.l_std}}, {"w", {c.w_mean, c.w_std}},
              {"h", {c.h_mean, c.h_std}}, {"z_center", c.z_center},
              {"rcs", {c.rcs_mean, c.rcs_std}}, {"speed_max", c.speed_max},
              {"color", c.color}};
}

ClassGen classgen_from_json(const json& j) {
  ClassGen c;
  c.name = j.at("name");
  c.l_mean = j.at("l").at(0);
  c.l_std = j.at("l").at(1);
  c.w_mean = j.at("w").at(0);
  c.w_std = j.at("w").at(1);
  c.h_mean = j.at("h").at(0);
  c.h_std = j.at("h").at(1);
  c.z_center = j.at("z_center");
  c.rcs_mean = j.at("rcs").at(0);
  c.rcs_std = j.at("rcs").at(1);
  c.speed_max = j.at("speed_max");
  c.color = j.at("color");
  return c;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "frames");

  json manifest;
  manifest["format"] = 1;
  manifest["seed"] = ds.cfg.seed;
  manifest["camera"] = camera_to_json(ds.cfg.camera);
  manifest["grid"] = grid_to_json(ds.cfg.grid);
  manifest["schema"] = schema_to_json(ds.cfg.schema);
  json gen;
  gen["objects"] = {ds.cfg.min_objects, ds.cfg.max_objects};
  gen["points_per_object"] = {ds.cfg.min_points_per_object, ds.cfg.max_points_per_object};
  gen["clutter_fraction"] = ds.cfg.clutter_fraction;
  gen["clutter_rcs"] = {ds.cfg.clutter_rcs_mean, ds.cfg.clutter_rcs_std};
  gen["max_place_retries"] = ds.cfg.max_place_retries;
  for (const auto& c : ds.cfg.classes) gen["classes"].push_back(classgen_to_json(c));
  manifest["gen"] = gen;
  for (const auto& f : ds.frames)
    manifest["frames"].push_back(json{{"id", f.id}, {"requested", f.requested_objects}});

  {
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw DataError("-", "manifest.json", "cannot open for writing");
    out << manifest.dump(2) << "\n";
  }

  for (const auto& f : ds.frames) {
    const fs::path base = fs::path(dir) / "frames" / f.id;
    {
      std::ofstream out(base.string() + ".img", std::ios::binary);
      put_u32(out, static_cast<std::uint32_t>(f.img_h));
      put_u32(out, static_cast<std::uint32_t>(f.img_w));
      put_u32(out, 3);
      out.write(reinterpret_cast<const char*>(f.image.data()),
                static_cast<std::streamsize>(f.image.size()));
      if (!out) throw DataError(f.id, "img", "write failed");
    }
    {
      std::ofstream out(base.string() + ".rad", std::ios::binary);
      put_u32(out, static_cast<std::uint32_t>(f.cloud.num_points()));
      const std::uint8_t len = static_cast<std::uint8_t>(f.cloud.schema.name.size());
      out.write(reinterpret_cast<const char*>(&len), 1);
      out.write(f.cloud.schema.name.data(), len);
      const int N = f.cloud.schema.num_extras();
      for (int i = 0; i < f.cloud.num_points(); ++i) {
        put_f32(out, f.cloud.xyz[i].x());
        put_f32(out, f.cloud.xyz[i].y());
        put_f32(out, f.cloud.xyz[i].z());
        for (int c = 0; c < N; ++c) put_f32(out, f.cloud.extra(i, c));
      }
      if (!out) throw DataError(f.id, "rad", "write failed");
    }
    {
      std::ofstream out(base.string() + ".gt", std::ios::binary);
      put_u32(out, static_cast<std::uint32_t>(f.gt.size()));
      for (std::size_t i = 0; i < f.gt.size(); ++i) {
        const auto& b = f.gt[i];
        put_i32(out, b.class_id);
        for (double v : {b.x, b.y, b.z, b.l, b.w, b.h, b.yaw}) put_f32(out, v);
        put_f32(out, f.meta[i].vx);
        put_f32(out, f.meta[i].vy);
        put_i32(out, f.meta[i].num_radar_points);
      }
      if (!out) throw DataError(f.id, "gt", "write failed");
    }
  }
}

Dataset read_dataset(const std::string& dir) {
  json manifest;
  {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw DataError("-", "manifest.json", "missing or unreadable");
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      throw DataError("-", "manifest.json", e.what());
    }
  }
  Dataset ds;
  try {
    ds.cfg.seed = manifest.at("seed");
    ds.cfg.camera = camera_from_json(manifest.at("camera"));
    ds.cfg.grid = grid_from_json(manifest.at("grid"));
    ds.cfg.schema = schema_from_json(manifest.at("schema"));
    const json& gen = manifest.at("gen");
    ds.cfg.min_objects = gen.at("objects").at(0);
    ds.cfg.max_objects = gen.at("objects").at(1);
    ds.cfg.min_points_per_object = gen.at("points_per_object").at(0);
    ds.cfg.max_points_per_object = gen.at("points_per_object").at(1);
    ds.cfg.clutter_fraction = gen.at("clutter_fraction");
    ds.cfg.clutter_rcs_mean = gen.at("clutter_rcs").at(0);
    ds.cfg.clutter_rcs_std = gen.at("clutter_rcs").at(1);
    ds.cfg.max_place_retries = gen.at("max_place_retries");
    for (const auto& cj : gen.at("classes")) ds.cfg.classes.push_back(classgen_from_json(cj));
  } catch (const json::exception& e) {
    throw DataError("-", "manifest.json", e.what());
  }

  for (const auto& fj : manifest.at("frames")) {
    Frame f;
    f.id = fj.at("id");
    f.requested_objects = fj.at("requested");
    const fs::path base = fs::path(dir) / "frames" / f.id;
    {
      std::ifstream in(base.string() + ".img", std::ios::binary);
      if (!in) throw DataError(f.id, "img", "missing file");
      f.img_h = static_cast<int>(get_u32(in, f.id, "img.h"));
      f.img_w = static_cast<int>(get_u32(in, f.id, "img.w"));
      const std::uint32_t ch = get_u32(in, f.id, "img.c");
      if (ch != 3) throw DataError(f.id, "img.c", "expected 3 channels");
      f.image.resize(3 * static_cast<std::size_t>(f.img_h) * f.img_w);
      if (!in.read(reinterpret_cast<char*>(f.image.data()),
                   static_cast<std::streamsize>(f.image.size())))
        throw DataError(f.id, "img.pixels", "truncated record");
    }
    {
      std::ifstream in(base.string() + ".rad", std::ios::binary);
      if (!in) throw DataError(f.id, "rad", "missing file");
      const std::uint32_t count = get_u32(in, f.id, "rad.count");
      std::uint8_t len = 0;
      if (!in.read(reinterpret_cast<char*>(&len), 1))
        throw DataError(f.id, "rad.schema", "truncated record");
      std::string name(len, '\0');
      if (!in.read(name.data(), len)) throw DataError(f.id, "rad.schema", "truncated record");
      if (name != ds.cfg.schema.name)
        throw DataError(f.id, "rad.schema", "schema does not match manifest");
      f.cloud.schema = ds.cfg.schema;
      const int N = f.cloud.schema.num_extras();
      for (std::uint32_t i = 0; i < count; ++i) {
        const double x = get_f32(in, f.id, "rad.xyz");
        const double y = get_f32(in, f.id, "rad.xyz");
        const double z = get_f32(in, f.id, "rad.xyz");
        f.cloud.xyz.emplace_back(x, y, z);
        for (int c = 0; c < N; ++c)
          f.cloud.extras.push_back(get_f32(in, f.id, "rad.extras"));
      }
    }
    {
      std::ifstream in(base.string() + ".gt", std::ios::binary);
      if (!in) throw DataError(f.id, "gt", "missing file");
      const std::uint32_t count = get_u32(in, f.id, "gt.count");
      for (std::uint32_t i = 0; i < count; ++i) {
        boxes::Box3D b;
        b.class_id = get_i32(in, f.id, "gt.class");
        b.x = get_f32(in, f.id, "gt.box");
        b.y = get_f32(in, f.id, "gt.box");
        b.z = get_f32(in, f.id, "gt.box");
        b.l = get_f32(in, f.id, "gt.box");
        b.w = get_f32(in, f.id, "gt.box");
        b.h = get_f32(in, f.id, "gt.box");
        b.yaw = get_f32(in, f.id, "gt.box");
        ObjectMeta m;
        m.vx = get_f32(in, f.id, "gt.vel");
        m.vy = get_f32(in, f.id, "gt.vel");
        m.num_radar_points = get_i32(in, f.id, "gt.points");
        f.gt.push_back(b);
        f.meta.push_back(m);
      }
    }
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

SceneConfig default_scene(const geometry::CameraModel& camera, const geometry::BEVGridSpec& grid,
                          const radar::RadarSchema& schema, std::uint64_t seed) {
  SceneConfig cfg;
  cfg.camera = camera;
  cfg.grid = grid;
  cfg.schema = schema;
  cfg.seed = seed;

  ClassGen car;
  car.name = "car";
  car.l_mean = 4.2;
  car.l_std = 0.4;
  car.w_mean = 1.8;
  car.w_std = 0.12;
  car.h_mean = 1.6;
  car.h_std = 0.1;
  car.z_center = 0.8;
  car.rcs_mean = 8.0;
  car.rcs_std = 3.0;
  car.speed_max = 6.0;
  car.color = {0.85, 0.15, 0.12};

  ClassGen ped;
  ped.name = "pedestrian";
  ped.l_mean = 0.8;
  ped.l_std = 0.08;
  ped.w_mean = 0.7;
  ped.w_std = 0.06;
  ped.h_mean = 1.75;
  ped.h_std = 0.1;
  ped.z_center = 0.9;
  ped.rcs_mean = -4.0;
  ped.rcs_std = 2.0;
  ped.speed_max = 1.6;
  ped.color = {0.1, 0.35, 0.9};

  ClassGen cyc;
  cyc.name = "cyclist";
  cyc.l_mean = 1.8;
  cyc.l_std = 0.15;
  cyc.w_mean = 0.7;
  cyc.w_std = 0.06;
  cyc.h_mean = 1.7;
  cyc.h_std = 0.1;
  cyc.z_center = 0.85;
  cyc.rcs_mean = 0.0;
  cyc.rcs_std = 2.0;
  cyc.speed_max = 4.0;
  cyc.color = {0.15, 0.8, 0.2};

  cfg.classes = {car, ped, cyc};
  return cfg;
}

}  // namespace bevfuse::synth
