#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>

#include "bevfuse/geometry.hpp"
#include "bevfuse/rng.hpp"

using namespace bevfuse;
using namespace bevfuse::geometry;

namespace {

CameraModel make_camera() {
  CameraModel cam;
  cam.height = 96;
  cam.width = 128;
  cam.intrinsics << 110.0, 0.0, 64.0, 0.0, 110.0, 48.0, 0.0, 0.0, 1.0;
  // ego: x forward, y left, z up; camera: x right, y down, z forward; mounted at (0,0,1.4)
  cam.extrinsics << 0.0, -1.0, 0.0, 0.0,
                    0.0,  0.0, -1.0, 1.4,
                    1.0,  0.0, 0.0, 0.0,
                    0.0,  0.0, 0.0, 1.0;
  cam.validate();
  return cam;
}

BEVGridSpec make_grid(double x0, double x1, double y0, double y1, double z0, double z1,
                      double cell) {
  BEVGridSpec g;
  g.x_min = x0;
  g.x_max = x1;
  g.y_min = y0;
  g.y_max = y1;
  g.z_min = z0;
  g.z_max = z1;
  g.dx = cell;
  g.dy = cell;
  g.validate();
  return g;
}

}  // namespace

TEST_CASE("projection round trip against explicit matrix inverse") {
  CameraModel cam = make_camera();
  Eigen::Matrix3d Kinv = cam.intrinsics.inverse();
  Eigen::Matrix4d Einv = cam.extrinsics.inverse();

  Rng rng(31);
  std::vector<Eigen::Vector3d> pts;
  std::vector<std::array<double, 3>> expect;
  for (int n = 0; n < 500; ++n) {
    double u = rng.uniform(0.0, cam.width - 1e-6);
    double v = rng.uniform(0.0, cam.height - 1e-6);
    double d = rng.uniform(0.5, 60.0);
    Eigen::Vector3d pc = Kinv * Eigen::Vector3d(u * d, v * d, d);
    Eigen::Vector4d pe = Einv * Eigen::Vector4d(pc.x(), pc.y(), pc.z(), 1.0);
    pts.emplace_back(pe.x(), pe.y(), pe.z());
    expect.push_back({u, v, d});
  }

  auto proj = project_to_image(pts, cam);
  REQUIRE(proj.size() == pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(proj[i].visible);
    CHECK(std::abs(proj[i].u - expect[i][0]) < 1e-6);
    CHECK(std::abs(proj[i].v - expect[i][1]) < 1e-6);
    CHECK(std::abs(proj[i].depth - expect[i][2]) < 1e-6);

    Eigen::Vector3d back = cam.to_ego(cam.to_camera(pts[i]));
    CHECK((back - pts[i]).norm() < 1e-9);
  }
}

TEST_CASE("projection edge cases") {
  CameraModel cam = make_camera();
  // behind the camera: negative ego x
  auto behind = project_to_image({Eigen::Vector3d(-5.0, 0.0, 1.4)}, cam);
  CHECK_FALSE(behind[0].visible);
  CHECK(behind[0].depth < 0.0);
  // principal ray maps to the principal point
  auto center = project_to_image({Eigen::Vector3d(10.0, 0.0, 1.4)}, cam);
  CHECK(center[0].visible);
  CHECK(center[0].u == doctest::Approx(64.0).epsilon(1e-12));
  CHECK(center[0].v == doctest::Approx(48.0).epsilon(1e-12));
  CHECK(center[0].depth == doctest::Approx(10.0).epsilon(1e-12));
  // non-finite input must throw
  CHECK_THROWS_AS(project_to_image({Eigen::Vector3d(std::nan(""), 0.0, 0.0)}, cam),
                  std::invalid_argument);
}

TEST_CASE("frustum rays reproject to their pixel centers") {
  CameraModel cam = make_camera();
  DepthBinSpec bins{1.0, 21.0, 10};
  const int stride = 8;
  const int fh = cam.height / stride;
  const int fw = cam.width / stride;
  auto pts = build_frustum(fh, fw, bins, cam, stride);
  REQUIRE(static_cast<int>(pts.size()) == bins.num_bins * fh * fw);

  auto proj = project_to_image(pts, cam);
  for (int k = 0; k < bins.num_bins; ++k) {
    for (int r = 0; r < fh; ++r) {
      for (int c = 0; c < fw; ++c) {
        const auto& p = proj[(k * fh + r) * fw + c];
        const double u_exp = (c + 0.5) * stride;
        const double v_exp = (r + 0.5) * stride;
        CHECK(std::abs(p.u - u_exp) < 0.5);
        CHECK(std::abs(p.v - v_exp) < 0.5);
        CHECK(p.depth == doctest::Approx(bins.bin_center(k)).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("frustum with corner offset is stride invariant") {
  CameraModel cam = make_camera();
  DepthBinSpec bins{1.0, 21.0, 5};
  auto fine = build_frustum(12, 16, bins, cam, 8, 0.0);
  auto coarse = build_frustum(6, 8, bins, cam, 16, 0.0);
  for (int k = 0; k < bins.num_bins; ++k) {
    for (int r = 0; r < 6; ++r) {
      for (int c = 0; c < 8; ++c) {
        const Eigen::Vector3d& pc = coarse[(k * 6 + r) * 8 + c];
        const Eigen::Vector3d& pf = fine[(k * 12 + 2 * r) * 16 + 2 * c];
        CHECK((pc - pf).norm() < 1e-9);
      }
    }
  }
}

TEST_CASE("depth bin indexing") {
  DepthBinSpec bins{1.0, 21.0, 10};
  CHECK(bins.bin_width() == doctest::Approx(2.0));
  CHECK(bins.bin_index(0.5) == -1);
  CHECK(bins.bin_index(1.0) == 0);
  CHECK(bins.bin_index(2.999) == 0);
  CHECK(bins.bin_index(3.0) == 1);
  CHECK(bins.bin_index(20.999) == 9);
  CHECK(bins.bin_index(21.0) == -1);
  CHECK(bins.bin_center(0) == doctest::Approx(2.0));
  CHECK(bins.bin_center(9) == doctest::Approx(20.0));
}

TEST_CASE("bev cell index matches brute force binning") {
  BEVGridSpec grid = make_grid(0.0, 20.0, -10.0, 10.0, -0.5, 3.5, 0.5);
  REQUIRE(grid.nx() == 40);
  REQUIRE(grid.ny() == 40);

  Rng rng(77);
  for (int n = 0; n < 10000; ++n) {
    double x = rng.uniform(-2.0, 22.0);
    double y = rng.uniform(-12.0, 12.0);
    double z = rng.uniform(-1.5, 4.5);
    auto cell = bev_cell_index(x, y, grid);
    bool in_xy = (x >= grid.x_min && x < grid.x_max && y >= grid.y_min && y < grid.y_max);
    CHECK(cell.has_value() == in_xy);
    if (cell) {
      int bx = static_cast<int>(std::floor((x - grid.x_min) / grid.dx));
      int by = static_cast<int>(std::floor((y - grid.y_min) / grid.dy));
      CHECK(cell->first == by);
      CHECK(cell->second == bx);
    }
    auto flat = bev_cell_of_points({Eigen::Vector3d(x, y, z)}, grid);
    bool in_z = (z >= grid.z_min && z <= grid.z_max);
    if (cell && in_z) {
      CHECK(flat[0] == cell->first * grid.nx() + cell->second);
    } else {
      CHECK(flat[0] == -1);
    }
  }

  // boundary rules: min edges inside, max edges outside
  auto c0 = bev_cell_index(0.0, -10.0, grid);
  REQUIRE(c0.has_value());
  CHECK(c0->first == 0);
  CHECK(c0->second == 0);
  CHECK_FALSE(bev_cell_index(20.0, 0.0, grid).has_value());
  CHECK_FALSE(bev_cell_index(0.0, 10.0, grid).has_value());
}

TEST_CASE("grid coarsening halves resolution") {
  BEVGridSpec grid = make_grid(0.0, 20.0, -10.0, 10.0, -0.5, 3.5, 0.5);
  BEVGridSpec c = grid.coarser(2);
  CHECK(c.nx() == 20);
  CHECK(c.ny() == 20);
  CHECK(c.dx == doctest::Approx(1.0));
  CHECK(c.x_max == doctest::Approx(grid.x_max));
}

TEST_CASE("splat conserves feature mass") {
  BEVGridSpec grid = make_grid(0.0, 8.0, -4.0, 4.0, -1.0, 3.0, 1.0);

  Rng rng(123);
  const int P = 300;
  const int C = 5;
  ad::Tensor feats(std::vector<int>{P, C}, false);
  std::vector<Eigen::Vector3d> pts(P);
  for (int i = 0; i < P; ++i) {
    pts[i] = Eigen::Vector3d(rng.uniform(-1.0, 9.0), rng.uniform(-5.0, 5.0),
                             rng.uniform(-2.0, 4.0));
    for (int c = 0; c < C; ++c) feats.data()[i * C + c] = rng.normal(0.0, 1.0);
  }
  ad::Tensor bev = splat_to_bev(feats, pts, grid);
  REQUIRE(bev.shape() == std::vector<int>({C, grid.ny(), grid.nx()}));

  auto cells = bev_cell_of_points(pts, grid);
  const int plane = grid.ny() * grid.nx();
  for (int c = 0; c < C; ++c) {
    double in_mass = 0.0;
    for (int i = 0; i < P; ++i)
      if (cells[i] >= 0) in_mass += feats.data()[i * C + c];
    double out_mass = 0.0;
    for (int j = 0; j < plane; ++j) out_mass += bev.data()[c * plane + j];
    CHECK(std::abs(out_mass - in_mass) <= 1e-5 * std::max(1.0, std::abs(in_mass)));
  }

  // per-cell values match a naive grouping loop (ascending-order summation)
  std::map<int, std::vector<double>> acc;
  for (int i = 0; i < P; ++i)
    if (cells[i] >= 0) acc[cells[i]].push_back(feats.data()[i * C + 0]);
  for (auto& [cell, vals] : acc) {
    std::sort(vals.begin(), vals.end());
    double s = 0.0;
    for (double v : vals) s += v;
    CHECK(bev.data()[0 * plane + cell] == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("splat is additive over disjoint point sets") {
  BEVGridSpec grid = make_grid(0.0, 4.0, 0.0, 4.0, -1.0, 1.0, 1.0);

  std::vector<Eigen::Vector3d> a{{0.5, 0.5, 0.0}, {1.5, 2.5, 0.0}};
  std::vector<Eigen::Vector3d> b{{3.5, 3.5, 0.0}};
  ad::Tensor fa = ad::Tensor::from({2, 1}, {2.0, 3.0}, false);
  ad::Tensor fb = ad::Tensor::from({1, 1}, {5.0}, false);
  std::vector<Eigen::Vector3d> both = a;
  both.push_back(b[0]);
  ad::Tensor fboth = ad::Tensor::from({3, 1}, {2.0, 3.0, 5.0}, false);

  ad::Tensor ya = splat_to_bev(fa, a, grid);
  ad::Tensor yb = splat_to_bev(fb, b, grid);
  ad::Tensor yboth = splat_to_bev(fboth, both, grid);
  for (std::size_t i = 0; i < yboth.numel(); ++i)
    CHECK(yboth.data()[i] == ya.data()[i] + yb.data()[i]);
}

TEST_CASE("deterministic splat is permutation invariant bitwise") {
  BEVGridSpec grid = make_grid(0.0, 2.0, 0.0, 2.0, -1.0, 1.0, 1.0);

  Rng rng(55);
  const int P = 64;
  std::vector<Eigen::Vector3d> pts(P);
  ad::Tensor feats(std::vector<int>{P, 3}, false);
  for (int i = 0; i < P; ++i) {
    pts[i] = Eigen::Vector3d(rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0), 0.0);
    for (int c = 0; c < 3; ++c) feats.data()[i * 3 + c] = rng.normal(0.0, 1.0);
  }
  ad::Tensor base = splat_to_bev(feats, pts, grid);

  std::vector<int> perm(P);
  for (int i = 0; i < P; ++i) perm[i] = i;
  for (int trial = 0; trial < 20; ++trial) {
    Rng prng(derive_seed(900, "perm", {static_cast<std::uint64_t>(trial)}));
    prng.shuffle(perm);
    std::vector<Eigen::Vector3d> ppts(P);
    ad::Tensor pfeats(std::vector<int>{P, 3}, false);
    for (int i = 0; i < P; ++i) {
      ppts[i] = pts[perm[i]];
      for (int c = 0; c < 3; ++c) pfeats.data()[i * 3 + c] = feats.data()[perm[i] * 3 + c];
    }
    ad::Tensor y = splat_to_bev(pfeats, ppts, grid);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      CHECK(y.data()[i] == base.data()[i]);
    }
  }
}
