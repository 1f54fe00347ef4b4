#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bevfuse/common.hpp"
#include "bevfuse/evaluation.hpp"
#include "bevfuse/geometry.hpp"
#include "bevfuse/rng.hpp"
#include "oracles.hpp"

using namespace bevfuse;
using boxes::Box3D;
using evaluation::EvalFrame;
using evaluation::NoiseSpec;

namespace {

Box3D make_box(double x, double y, int cls, double score = 0.0) {
  Box3D b;
  b.x = x;
  b.y = y;
  b.z = 0.8;
  b.l = 3.6;
  b.w = 1.6;
  b.h = 1.5;
  b.yaw = 0.0;
  b.class_id = cls;
  b.score = score;
  return b;
}

Box3D jitter(const Box3D& b, Rng& rng, double amount) {
  Box3D out = b;
  out.x += rng.uniform(-amount, amount);
  out.y += rng.uniform(-amount, amount);
  out.yaw = boxes::wrap_to_pi(out.yaw + rng.uniform(-0.3 * amount, 0.3 * amount));
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("noise field matches its nominal moments") {
  NoiseSpec spec;
  spec.rho = 0.7;
  spec.sigma = 0.1;
  spec.seed = 99;
  auto field = evaluation::noise_field(200000, spec);
  double mean = 0.0;
  for (double v : field) mean += v;
  mean /= field.size();
  double var = 0.0;
  for (double v : field) var += (v - mean) * (v - mean);
  const double stddev = std::sqrt(var / (field.size() - 1));
  CHECK(std::abs(mean) < 0.001);
  CHECK(std::abs(stddev - spec.rho * spec.sigma) < 0.01 * spec.rho * spec.sigma);

  auto again = evaluation::noise_field(200000, spec);
  CHECK(field == again);
  spec.seed = 100;
  auto other = evaluation::noise_field(16, spec);
  bool differs = false;
  for (int i = 0; i < 16; ++i) differs = differs || other[i] != field[i];
  CHECK(differs);
}

TEST_CASE("zero noise level copies the image bit for bit") {
  Rng rng(1);
  ad::Tensor img(std::vector<int>{3, 7, 9}, false);
  for (double& v : img.values()) v = rng.uniform(0.0, 1.0);
  NoiseSpec spec;
  spec.rho = 0.0;
  spec.seed = 1234;
  ad::Tensor out = evaluation::inject_noise(img, spec);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(out.data()[i] == img.data()[i]);

  spec.rho = 0.8;
  ad::Tensor noisy = evaluation::inject_noise(img, spec);
  bool changed = false;
  for (std::size_t i = 0; i < img.numel(); ++i) {
    CHECK(noisy.data()[i] >= 0.0);
    CHECK(noisy.data()[i] <= 1.0);
    changed = changed || noisy.data()[i] != img.data()[i];
  }
  CHECK(changed);

  ad::Tensor noisy2 = evaluation::inject_noise(img, spec);
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(noisy.data()[i] == noisy2.data()[i]);
}

TEST_CASE("average precision on hand-checked cases") {
  SUBCASE("perfect detections score 1") {
    std::vector<EvalFrame> frames(2);
    for (int f = 0; f < 2; ++f) {
      frames[f].gts = {make_box(5 + f, 0, 0), make_box(15, 3, 0)};
      for (const auto& g : frames[f].gts) {
        Box3D d = g;
        d.score = 0.9;
        frames[f].dets.push_back(d);
      }
    }
    CHECK(evaluation::average_precision(frames, 0.5, 0, 40) == 1.0);
  }

  SUBCASE("no detections score 0") {
    std::vector<EvalFrame> frames(1);
    frames[0].gts = {make_box(5, 0, 0)};
    CHECK(evaluation::average_precision(frames, 0.5, 0, 40) == 0.0);
  }

  SUBCASE("half recall at full precision gives one half") {
    std::vector<EvalFrame> frames(1);
    frames[0].gts = {make_box(5, 0, 0), make_box(15, 3, 0)};
    Box3D d = frames[0].gts[0];
    d.score = 0.9;
    frames[0].dets = {d};
    CHECK(evaluation::average_precision(frames, 0.5, 0, 40) == doctest::Approx(0.5));
  }

  SUBCASE("a duplicate counts as a false positive") {
    std::vector<EvalFrame> frames(1);
    frames[0].gts = {make_box(5, 0, 0)};
    Box3D d1 = frames[0].gts[0];
    d1.score = 0.9;
    Box3D d2 = d1;
    d2.score = 0.8;
    frames[0].dets = {d1, d2};
    // recall 1 at precision 1 before the duplicate arrives
    CHECK(evaluation::average_precision(frames, 0.5, 0, 40) == doctest::Approx(1.0));
  }
}

TEST_CASE("average precision equals the envelope-based second implementation") {
  Rng rng(7);
  std::vector<EvalFrame> frames(200);
  for (auto& f : frames) {
    const int ngt = static_cast<int>(rng.uniform_index(5));
    for (int g = 0; g < ngt; ++g)
      f.gts.push_back(make_box(rng.uniform(2.0, 30.0), rng.uniform(-10.0, 10.0),
                               static_cast<int>(rng.uniform_index(2))));
    for (const auto& g : f.gts) {
      if (rng.uniform() < 0.25) continue;  // missed
      Box3D d = jitter(g, rng, rng.uniform(0.0, 1.2));
      d.score = rng.uniform(0.05, 1.0);
      f.dets.push_back(d);
    }
    const int nfp = static_cast<int>(rng.uniform_index(4));
    for (int k = 0; k < nfp; ++k) {
      Box3D d = make_box(rng.uniform(2.0, 30.0), rng.uniform(-10.0, 10.0),
                         static_cast<int>(rng.uniform_index(2)), rng.uniform(0.05, 1.0));
      f.dets.push_back(d);
    }
    if (rng.uniform() < 0.1 && !f.dets.empty()) f.dets.push_back(f.dets.back());  // tied scores
  }

  for (int cls = 0; cls < 2; ++cls)
    for (double thr : {0.25, 0.5})
      for (bool use3d : {false, true}) {
        const double lib = evaluation::average_precision(frames, thr, cls, 40, use3d);
        const double ora = testing::oracle_average_precision(frames, thr, cls, 40, use3d);
        CHECK(std::abs(lib - ora) < 1e-9);
      }
}

TEST_CASE("map skips classes without ground truth") {
  std::vector<EvalFrame> frames(1);
  frames[0].gts = {make_box(5, 0, 0)};
  Box3D d = frames[0].gts[0];
  d.score = 0.9;
  frames[0].dets = {d};
  evaluation::EvalConfig cfg;
  cfg.iou_thresholds = {{0, 0.5}, {1, 0.25}, {2, 0.5}};
  auto res = evaluation::evaluate_map(frames, cfg);
  CHECK(res.per_class.size() == 1);
  CHECK(res.per_class.at(0) == doctest::Approx(1.0));
  CHECK(res.map == doctest::Approx(1.0));
  CHECK(res.skipped_classes == std::vector<int>{1, 2});
}

TEST_CASE("corridor filter matches the camera-frame predicate") {
  geometry::CameraModel cam;
  cam.height = 96;
  cam.width = 128;
  cam.intrinsics << 110.0, 0.0, 64.0, 0.0, 110.0, 48.0, 0.0, 0.0, 1.0;
  cam.extrinsics << 0.0, -1.0, 0.0, 0.0,
                    0.0,  0.0, -1.0, 1.4,
                    1.0,  0.0, 0.0, 0.0,
                    0.0,  0.0, 0.0, 1.0;
  evaluation::RoiSpec roi;
  Rng rng(11);
  std::vector<Box3D> all;
  for (int i = 0; i < 500; ++i)
    all.push_back(make_box(rng.uniform(-5.0, 40.0), rng.uniform(-12.0, 12.0), 0));
  auto kept = evaluation::roi_filter(all, roi, cam);
  std::size_t expect = 0;
  for (const auto& b : all) {
    const Eigen::Vector3d pc = cam.to_camera({b.x, b.y, b.z});
    if (std::abs(pc.x()) <= roi.lateral_max && pc.z() <= roi.forward_max) ++expect;
  }
  CHECK(kept.size() == expect);
  for (const auto& b : kept) {
    const Eigen::Vector3d pc = cam.to_camera({b.x, b.y, b.z});
    CHECK(std::abs(pc.x()) <= roi.lateral_max);
    CHECK(pc.z() <= roi.forward_max);
  }
}

TEST_CASE("failure test degrades a noise-sensitive stub model") {
  const int F = 3;
  std::vector<ad::Tensor> images;
  std::vector<std::vector<Box3D>> gts;
  Rng rng(13);
  for (int f = 0; f < F; ++f) {
    ad::Tensor img(std::vector<int>{3, 16, 16}, false);
    for (double& v : img.values()) v = rng.uniform(0.2, 0.8);
    images.push_back(img);
    gts.push_back({make_box(6.0, -3.0 + f, 0), make_box(14.0, 2.0, 0), make_box(22.0, -1.0, 0)});
  }

  // drops ground truths once the perturbation passes per-object thresholds
  auto model = [&](int f, const ad::Tensor& noisy) {
    double d = 0.0;
    for (std::size_t i = 0; i < noisy.numel(); ++i)
      d += std::abs(noisy.data()[i] - images[f].data()[i]);
    d /= static_cast<double>(noisy.numel());
    std::vector<Box3D> dets;
    const double keep_above[3] = {0.02, 0.055, 0.10};
    for (int j = 0; j < 3; ++j) {
      if (d >= keep_above[j]) continue;
      Box3D b = gts[f][j];
      b.score = 0.9 - 0.1 * j;
      dets.push_back(b);
    }
    return dets;
  };

  evaluation::EvalConfig ecfg;
  ecfg.iou_thresholds = {{0, 0.5}};
  evaluation::FTConfig ft;
  ft.rho_list = {0.0, 0.5, 0.9};
  ft.runs = 10;
  ft.base_seed = 77;

  auto report = evaluation::failure_test(images, gts, model, ecfg, ft);
  REQUIRE(report.cells.size() == 3);
  CHECK(report.cells[0].rho == 0.0);
  CHECK(report.cells[0].mean_map == doctest::Approx(1.0));
  CHECK(report.cells[0].std_map == 0.0);
  CHECK(report.cells[0].mean_map > report.cells[1].mean_map);
  CHECK(report.cells[1].mean_map > report.cells[2].mean_map);
  for (const auto& c : report.cells) {
    CHECK(c.std_map >= 0.0);
    CHECK(c.mean_class_ap.at(0) == doctest::Approx(c.mean_map));
  }

  auto again = evaluation::failure_test(images, gts, model, ecfg, ft);
  for (int i = 0; i < 3; ++i) {
    CHECK(report.cells[i].mean_map == again.cells[i].mean_map);
    CHECK(report.cells[i].std_map == again.cells[i].std_map);
  }

  const std::string csv = "/tmp/bevfuse_test_ft.csv";
  const std::string js = "/tmp/bevfuse_test_ft.json";
  evaluation::write_ft_csv(csv, report, {"car"});
  evaluation::write_ft_json(js, report, {"car"});
  std::string text = slurp(csv);
  CHECK(text.find("rho,mean_map,std_map,ap_car") == 0);
  int lines = 0;
  for (char ch : text) lines += ch == '\n';
  CHECK(lines == 4);
  std::string jtext = slurp(js);
  CHECK(jtext.find("\"cells\"") != std::string::npos);
  std::remove(csv.c_str());
  std::remove(js.c_str());
}

TEST_CASE("resolution sweep snaps sizes and zeroes its baseline deltas") {
  auto train_eval = [](int h, int w, bool rdl) {
    const double base = 0.3 + 1e-4 * h + 2e-5 * w;
    return std::make_pair(base + (rdl ? 0.07 : 0.0), base + (rdl ? 0.02 : 0.0));
  };
  auto rows = evaluation::sweep_resolution({0.25, 0.3, 1.0}, 96, 128, 8, train_eval);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].img_h == 24);
  CHECK(rows[0].img_w == 32);
  CHECK(rows[2].img_h == 24);  // 0.3 * 96 = 28.8 snaps down to 24
  CHECK(rows[2].img_w == 32);  // 0.3 * 128 = 38.4 snaps down to 32
  CHECK(rows[4].img_h == 96);
  CHECK(rows[4].img_w == 128);

  for (std::size_t i = 0; i < rows.size(); i += 2) {
    CHECK(!rows[i].rdl);
    CHECK(rows[i + 1].rdl);
    CHECK(rows[i].delta_3d_pct == 0.0);
    CHECK(rows[i].delta_bev_pct == 0.0);
    const double expect_3d = (rows[i + 1].map_3d - rows[i].map_3d) / rows[i].map_3d * 100.0;
    CHECK(rows[i + 1].delta_3d_pct == doctest::Approx(expect_3d).epsilon(1e-12));
  }

  const std::string path = "/tmp/bevfuse_test_sweep.csv";
  evaluation::write_sweep_csv(path, rows);
  std::string text = slurp(path);
  CHECK(text.find("scale,image_size,rdl,map_3d,delta_3d,map_bev,delta_bev") == 0);
  std::istringstream ss(text);
  std::string line;
  std::getline(ss, line);
  int off_rows = 0;
  while (std::getline(ss, line)) {
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    REQUIRE(fields.size() == 7);
    CHECK(fields[1].find('x') != std::string::npos);  // HxW
    if (fields[2] == "0") {
      ++off_rows;
      // baseline rows print a literal zero delta
      CHECK(fields[4] == "0.0%");
      CHECK(fields[6] == "0.0%");
    } else {
      CHECK(fields[2] == "1");
    }
  }
  CHECK(off_rows == 3);
  std::remove(path.c_str());
}

TEST_CASE("detection files round trip bit for bit") {
  Rng rng(4021);
  std::vector<Box3D> dets;
  for (int i = 0; i < 40; ++i) {
    Box3D b;
    b.x = rng.uniform(-30.0, 30.0);
    b.y = rng.uniform(-30.0, 30.0);
    b.z = rng.uniform(-1.0, 3.0);
    b.l = rng.uniform(0.3, 6.0);
    b.w = rng.uniform(0.3, 3.0);
    b.h = rng.uniform(0.3, 3.0);
    b.yaw = rng.uniform(-3.14159, 3.14159);
    b.class_id = static_cast<int>(rng.uniform_index(5));
    b.score = rng.uniform(1e-9, 1.0);
    dets.push_back(b);
  }

  const std::string path = "/tmp/bevfuse_test_dets.txt";
  evaluation::write_detections(path, dets);
  auto back = evaluation::read_detections(path);
  REQUIRE(back.size() == dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    CHECK(back[i].class_id == dets[i].class_id);
    CHECK(back[i].score == dets[i].score);
    CHECK(back[i].x == dets[i].x);
    CHECK(back[i].y == dets[i].y);
    CHECK(back[i].z == dets[i].z);
    CHECK(back[i].l == dets[i].l);
    CHECK(back[i].w == dets[i].w);
    CHECK(back[i].h == dets[i].h);
    CHECK(back[i].yaw == dets[i].yaw);
  }

  // the column order is part of the file contract
  std::string text = slurp(path);
  CHECK(text.find("# class score x y z l w h yaw") == 0);

  // empty set still produces a readable file
  evaluation::write_detections(path, {});
  CHECK(evaluation::read_detections(path).empty());

  std::ofstream(path) << "# class score x y z l w h yaw\n1 0.5 not-a-number\n";
  CHECK_THROWS_AS(evaluation::read_detections(path), DataError);
  std::remove(path.c_str());
}
