#include <doctest.h>

#include <cmath>

#include "bevfuse/nn.hpp"
#include "bevfuse/rng.hpp"
#include "bevfuse/tensor.hpp"
#include "gradcheck.hpp"

using namespace bevfuse;
using bevfuse::ad::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true) {
  Tensor t(std::move(shape), requires_grad);
  for (double& v : t.values()) v = rng.normal(0.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("elementwise ops and backward") {
  Rng rng(1);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  auto res = testing::grad_check([&] { return ad::sum(ad::mul(ad::add(a, b), ad::sub(a, b))); },
                                 {a, b});
  CHECK_MESSAGE(res.ok, res.worst_at);
}

TEST_CASE("relu sigmoid log_sigmoid smooth_l1 gradients") {
  Rng rng(2);
  Tensor a = random_tensor({40}, rng);
  auto res1 = testing::grad_check([&] { return ad::sum(ad::relu(a)); }, {a});
  CHECK_MESSAGE(res1.ok, res1.worst_at);
  auto res2 = testing::grad_check([&] { return ad::sum(ad::sigmoid(a)); }, {a});
  CHECK_MESSAGE(res2.ok, res2.worst_at);
  auto res3 = testing::grad_check([&] { return ad::sum(ad::log_sigmoid(a)); }, {a});
  CHECK_MESSAGE(res3.ok, res3.worst_at);
  auto res4 = testing::grad_check([&] { return ad::sum(ad::smooth_l1(a, 0.5)); }, {a});
  CHECK_MESSAGE(res4.ok, res4.worst_at);
}

TEST_CASE("linear matches manual matmul and gradients") {
  Rng rng(3);
  Tensor x = random_tensor({5, 7}, rng);
  Tensor w = random_tensor({4, 7}, rng);
  Tensor b = random_tensor({4}, rng);
  Tensor y = ad::linear(x, w, b);
  REQUIRE(y.shape() == std::vector<int>({5, 4}));
  // manual check of one entry
  double acc = b.data()[2];
  for (int k = 0; k < 7; ++k) acc += x.data()[1 * 7 + k] * w.data()[2 * 7 + k];
  CHECK(y.data()[1 * 4 + 2] == doctest::Approx(acc).epsilon(1e-12));

  auto res = testing::grad_check([&] { return ad::sum(ad::relu(ad::linear(x, w, b))); }, {x, w, b});
  CHECK_MESSAGE(res.ok, res.worst_at);
}

TEST_CASE("conv2d shapes and gradients") {
  Rng rng(4);
  Tensor x = random_tensor({3, 6, 5}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng);
  Tensor b = random_tensor({4}, rng);
  Tensor y = ad::conv2d(x, w, b, 1, 1);
  REQUIRE(y.shape() == std::vector<int>({4, 6, 5}));
  Tensor y2 = ad::conv2d(x, w, b, 2, 1);
  REQUIRE(y2.shape() == std::vector<int>({4, 3, 3}));

  auto res = testing::grad_check([&] { return ad::sum(ad::conv2d(x, w, b, 2, 1)); }, {x, w, b});
  CHECK_MESSAGE(res.ok, res.worst_at);

  // 1x1 fast path
  Tensor w1 = random_tensor({2, 3, 1, 1}, rng);
  Tensor b1 = random_tensor({2}, rng);
  auto res1 = testing::grad_check([&] { return ad::sum(ad::conv2d(x, w1, b1, 1, 0)); },
                                  {x, w1, b1});
  CHECK_MESSAGE(res1.ok, res1.worst_at);
}

TEST_CASE("group_norm normalizes and gradients agree") {
  Rng rng(5);
  Tensor x = random_tensor({6, 4, 3}, rng);
  Tensor gamma = random_tensor({6}, rng);
  Tensor beta = random_tensor({6}, rng);
  Tensor y = ad::group_norm(x, gamma, beta, 2);
  REQUIRE(y.shape() == x.shape());

  Tensor wsum = random_tensor({6, 4, 3}, rng, false);
  auto res = testing::grad_check(
      [&] { return ad::sum(ad::mul(ad::group_norm(x, gamma, beta, 2), wsum)); },
      {x, gamma, beta}, 2e-4);
  CHECK_MESSAGE(res.ok, res.worst_at);
}

TEST_CASE("softmax_dim0 sums to one and gradients") {
  Rng rng(6);
  Tensor x = random_tensor({5, 3, 2}, rng);
  Tensor p = ad::softmax_dim0(x);
  for (int j = 0; j < 6; ++j) {
    double s = 0.0;
    for (int i = 0; i < 5; ++i) s += p.data()[i * 6 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor wsum = random_tensor({5, 3, 2}, rng, false);
  auto res = testing::grad_check([&] { return ad::sum(ad::mul(ad::softmax_dim0(x), wsum)); }, {x});
  CHECK_MESSAGE(res.ok, res.worst_at);
}

TEST_CASE("masked_rowmax ignores padded rows") {
  Rng rng(7);
  Tensor x(std::vector<int>{6, 2}, true);
  for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = static_cast<double>(i);
  // 2 groups of 3 rows; second row of group 1 invalid
  std::vector<int> counts{2, 3};
  Tensor y = ad::masked_rowmax(x, counts, 3);
  CHECK(y.data()[0] == 2.0);  // max over rows 0..1, col 0
  CHECK(y.data()[1] == 3.0);
  CHECK(y.data()[2] == 10.0);
  CHECK(y.data()[3] == 11.0);

  Tensor xr = random_tensor({6, 2}, rng);
  auto res = testing::grad_check([&] { return ad::sum(ad::masked_rowmax(xr, counts, 3)); }, {xr});
  CHECK_MESSAGE(res.ok, res.worst_at);
}

TEST_CASE("scatter and lift_splat gradients") {
  Rng rng(8);
  Tensor feats = random_tensor({3, 4}, rng);
  std::vector<int> cells{5, 0, 11};
  Tensor m = ad::scatter_cells(feats, cells, 3, 4);
  REQUIRE(m.shape() == std::vector<int>({4, 3, 4}));
  auto res = testing::grad_check([&] { return ad::sum(ad::scatter_cells(feats, cells, 3, 4)); },
                                 {feats});
  CHECK_MESSAGE(res.ok, res.worst_at);

  Tensor ctx = random_tensor({3, 2, 2}, rng);
  Tensor depth = random_tensor({4, 2, 2}, rng);
  std::vector<int> lcells(16);
  Rng rng2(99);
  for (auto& c : lcells) c = static_cast<int>(rng2.uniform_index(13)) - 1;  // -1..11
  auto res2 = testing::grad_check(
      [&] { return ad::sum(ad::lift_splat(ctx, depth, lcells, 3, 4)); }, {ctx, depth});
  CHECK_MESSAGE(res2.ok, res2.worst_at);
}

TEST_CASE("cross_entropy_cols ignores -1 and matches manual value") {
  Tensor logits = Tensor::from({3, 2}, {1.0, 0.0, 2.0, 0.0, 3.0, 0.0}, true);
  std::vector<int> targets{2, -1};
  Tensor loss = ad::cross_entropy_cols(logits, targets);
  const double z = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  CHECK(loss.value() == doctest::Approx(z - 3.0).epsilon(1e-12));

  Rng rng(9);
  Tensor l2 = random_tensor({4, 6}, rng);
  std::vector<int> t2{0, 3, -1, 2, 1, -1};
  auto res = testing::grad_check([&] { return ad::cross_entropy_cols(l2, t2); }, {l2});
  CHECK_MESSAGE(res.ok, res.worst_at);
}

TEST_CASE("upsample and concat gradients") {
  Rng rng(10);
  Tensor a = random_tensor({2, 3, 2}, rng);
  Tensor b = random_tensor({3, 3, 2}, rng);
  Tensor cat = ad::concat_channel({a, b});
  REQUIRE(cat.shape() == std::vector<int>({5, 3, 2}));
  Tensor wsum = random_tensor({5, 3, 2}, rng, false);
  auto res = testing::grad_check(
      [&] { return ad::sum(ad::mul(ad::concat_channel({a, b}), wsum)); }, {a, b});
  CHECK_MESSAGE(res.ok, res.worst_at);

  Tensor u = ad::upsample2_nearest(a);
  REQUIRE(u.shape() == std::vector<int>({2, 6, 4}));
  CHECK(u.data()[0] == a.data()[0]);
  CHECK(u.data()[1] == a.data()[0]);
  auto res2 = testing::grad_check([&] { return ad::sum(ad::upsample2_nearest(a)); }, {a});
  CHECK_MESSAGE(res2.ok, res2.worst_at);
}

TEST_CASE("gather_channels picks planes and gradients") {
  Rng rng(13);
  Tensor x = random_tensor({4, 2, 3}, rng);
  Tensor y = ad::gather_channels(x, {3, 1});
  REQUIRE(y.shape() == std::vector<int>({2, 2, 3}));
  for (int i = 0; i < 6; ++i) {
    CHECK(y.data()[i] == x.data()[3 * 6 + i]);
    CHECK(y.data()[6 + i] == x.data()[1 * 6 + i]);
  }
  Tensor wsum = random_tensor({3, 2, 3}, rng, false);
  auto res = testing::grad_check(
      [&] { return ad::sum(ad::mul(ad::gather_channels(x, {0, 2, 0}), wsum)); }, {x});
  CHECK_MESSAGE(res.ok, res.worst_at);
}

TEST_CASE("mul_spatial broadcasts over channels with gradients") {
  Rng rng(14);
  Tensor x = random_tensor({3, 2, 4}, rng);
  Tensor s = random_tensor({2, 4}, rng);
  Tensor y = ad::mul_spatial(x, s);
  REQUIRE(y.shape() == x.shape());
  CHECK(y.data()[1 * 8 + 5] == doctest::Approx(x.data()[1 * 8 + 5] * s.data()[5]));
  auto res = testing::grad_check([&] { return ad::sum(ad::mul_spatial(x, s)); }, {x, s});
  CHECK_MESSAGE(res.ok, res.worst_at);
}

TEST_CASE("no-grad mode builds no graph") {
  Rng rng(11);
  Tensor a = random_tensor({4}, rng);
  {
    ad::NoGradGuard guard;
    Tensor y = ad::sum(ad::relu(a));
    CHECK_FALSE(y.requires_grad());
  }
  Tensor y = ad::sum(ad::relu(a));
  CHECK(y.requires_grad());
}

TEST_CASE("adam reduces a quadratic") {
  Rng rng(12);
  Tensor x = random_tensor({8}, rng);
  nn::ParamRegistry reg;
  reg.add("x", x);
  nn::Adam opt(&reg, 0.1);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 100; ++i) {
    opt.zero_grad();
    Tensor loss = ad::sum(ad::mul(x, x));
    if (i == 0) first = loss.value();
    last = loss.value();
    loss.backward();
    opt.step();
  }
  CHECK(last < 0.05 * first);
}
