#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "doctest.h"
#include "grad_suite.hpp"
#include "mp3d/errors.hpp"
#include "mp3d/ops.hpp"
#include "mp3d/rng.hpp"
#include "oracles.hpp"

using namespace mp3d;

namespace {

oracle::Vol to_vol(const Tensor& t) {
  oracle::Vol v{static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)),
                static_cast<int>(t.dim(3)), static_cast<int>(t.dim(4)), {}};
  v.v.assign(t.data().begin(), t.data().end());
  return v;
}

std::vector<double> as_double(std::span<const float> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("conv3d: zero input gives zero output") {
  std::mt19937_64 rng(1);
  auto k = gradcheck::random_tensor<float>({2, 1, 3, 3, 3}, rng);
  auto y = conv3d(Tensor::zeros({1, 1, 3, 4, 4}), k, Tensor{}, {{1, 1, 1}, {1, 1, 1}, 1});
  for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("conv3d: 1x1x1 unit filter is the identity") {
  std::mt19937_64 rng(2);
  auto x = gradcheck::random_tensor<float>({2, 1, 3, 4, 5}, rng);
  auto y = conv3d(x, Tensor::full({1, 1, 1, 1, 1}, 1.0f), Tensor{}, {});
  CHECK(y.shape() == x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("conv3d: all-ones 3x3x3 kernel over 0..26 sums to 351") {
  std::vector<float> v(27);
  std::iota(v.begin(), v.end(), 0.0f);
  auto x = Tensor::from({1, 1, 3, 3, 3}, v);
  auto y = conv3d(x, Tensor::full({1, 1, 3, 3, 3}, 1.0f), Tensor{}, {});
  REQUIRE(y.numel() == 1);
  const auto ref = oracle::conv3d(to_vol(x), std::vector<double>(27, 1.0), 1, {3, 3, 3}, {}, {1, 1, 1}, {0, 0, 0}, 1);
  CHECK(ref.v[0] == doctest::Approx(351.0));
  CHECK(y.item() == doctest::Approx(351.0));
}

TEST_CASE("conv3d matches the direct-loop oracle on random configurations") {
  std::mt19937_64 rng(3);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  for (int t = 0; t < 25; ++t) {
    const int groups = pick(1, 3), cin = groups * pick(1, 2), cout = groups * pick(1, 2);
    const std::array<int, 3> k{pick(1, 3), pick(1, 3), pick(1, 3)}, s{pick(1, 2), pick(1, 2), pick(1, 2)},
        p{pick(0, 1), pick(0, 1), pick(0, 1)};
    auto x = gradcheck::random_tensor<float>({pick(1, 2), cin, pick(k[0], 5), pick(k[1], 6), pick(k[2], 6)}, rng);
    auto w = gradcheck::random_tensor<float>({cout, cin / groups, k[0], k[1], k[2]}, rng);
    auto b = gradcheck::random_tensor<float>({cout}, rng);
    auto y = conv3d(x, w, b, {s, p, groups});
    auto ref = oracle::conv3d(to_vol(x), as_double(w.data()), cout, k, as_double(b.data()), s, p, groups);
    REQUIRE(ref.v.size() == static_cast<std::size_t>(y.numel()));
    CHECK(y.dim(2) == ref.d);
    CHECK(y.dim(3) == ref.h);
    CHECK(y.dim(4) == ref.w);
    for (std::size_t i = 0; i < ref.v.size(); ++i) CHECK(std::abs(ref.v[i] - y.data()[i]) < 1e-5);
  }
}

TEST_CASE("conv3d rejects bad shapes") {
  CHECK_THROWS_AS(conv3d(Tensor::zeros({1, 3, 2, 4, 4}), Tensor::zeros({2, 3, 1, 1, 1}), Tensor{}, {{1, 1, 1}, {0, 0, 0}, 2}),
                  ShapeError);
  CHECK_THROWS_AS(conv3d(Tensor::zeros({1, 2, 2, 4, 4}), Tensor::zeros({2, 3, 1, 1, 1}), Tensor{}, {}), ShapeError);
  CHECK_THROWS_AS(conv3d(Tensor::zeros({1, 1, 2, 2, 2}), Tensor::zeros({1, 1, 3, 3, 3}), Tensor{}, {}), ShapeError);
}

TEST_CASE("conv3d is linear for bias-free kernels") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 10; ++t) {
    auto x = gradcheck::random_tensor<float>({1, 2, 3, 5, 5}, rng);
    auto y = gradcheck::random_tensor<float>({1, 2, 3, 5, 5}, rng);
    auto k = gradcheck::random_tensor<float>({3, 2, 3, 3, 3}, rng);
    const float a = 0.7f, b = -1.3f;
    ConvOptions o{{1, 1, 1}, {1, 1, 1}, 1};
    auto lhs = conv3d(add(mul_scalar(x, a), mul_scalar(y, b)), k, Tensor{}, o);
    auto rhs = add(mul_scalar(conv3d(x, k, Tensor{}, o), a), mul_scalar(conv3d(y, k, Tensor{}, o), b));
    double scale = 0, err = 0;
    for (std::int64_t i = 0; i < lhs.numel(); ++i) {
      scale = std::max(scale, std::abs(static_cast<double>(rhs.at(i))));
      err = std::max(err, std::abs(static_cast<double>(lhs.at(i) - rhs.at(i))));
    }
    CHECK(err <= 1e-4 * scale);
  }
}

TEST_CASE("pool3d examples") {
  std::mt19937_64 rng(5);
  auto x = gradcheck::random_tensor<float>({1, 2, 3, 4, 4}, rng);
  auto same = pool3d(x, PoolMode::kMax, {1, 1, 1}, {1, 1, 1});
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(same.at(i) == x.at(i));

  auto m = pool3d(Tensor::from({1, 1, 1, 2, 2}, {1, 2, 3, 4}), PoolMode::kMax, {1, 2, 2}, {1, 1, 1});
  CHECK(m.item() == 4.0f);

  auto r = gradcheck::random_tensor<float>({1, 2, 3, 4, 4}, rng);
  auto avg = pool3d(r, PoolMode::kAvg, {1, 2, 2}, {1, 2, 2});
  auto ref = oracle::pool3d(to_vol(r), false, {1, 2, 2}, {1, 2, 2}, {0, 0, 0});
  REQUIRE(ref.v.size() == static_cast<std::size_t>(avg.numel()));
  for (std::size_t i = 0; i < ref.v.size(); ++i) CHECK(avg.data()[i] == doctest::Approx(ref.v[i]).epsilon(1e-6));

  CHECK_THROWS_AS(pool3d(r, PoolMode::kMax, {4, 2, 2}, {1, 1, 1}), ShapeError);
}

TEST_CASE("max pooling dominates average pooling") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 10; ++t) {
    auto x = gradcheck::random_tensor<float>({1, 2, 3, 6, 6}, rng);
    auto mx = pool3d(x, PoolMode::kMax, {1, 3, 3}, {1, 2, 2});
    auto av = pool3d(x, PoolMode::kAvg, {1, 3, 3}, {1, 2, 2});
    for (std::int64_t i = 0; i < mx.numel(); ++i) CHECK(mx.at(i) >= av.at(i));
  }
}

TEST_CASE("max pooling gradient ties go to the first element") {
  auto x = Tensor::from({1, 1, 1, 2, 2}, {5, 5, 5, 5}, true);
  sum(pool3d(x, PoolMode::kMax, {1, 2, 2}, {1, 2, 2})).backward();
  CHECK(x.grad()[0] == 1.0f);
  CHECK(x.grad()[1] == 0.0f);
  CHECK(x.grad()[2] == 0.0f);
  CHECK(x.grad()[3] == 0.0f);
}

TEST_CASE("group_norm examples") {
  auto zero = group_norm(Tensor::full({1, 4, 3, 3}, 2.5f), 2, Tensor::full({4}, 1.0f), Tensor::zeros({4}));
  for (float v : zero.data()) CHECK(v == 0.0f);

  std::mt19937_64 rng(7);
  auto x = gradcheck::random_tensor<float>({2, 4, 3, 3}, rng);
  auto five = group_norm(x, 2, Tensor::zeros({4}), Tensor::full({4}, 5.0f));
  for (float v : five.data()) CHECK(v == 5.0f);

  auto y = group_norm(x, 2, Tensor{}, Tensor{});
  for (int n = 0; n < 2; ++n)
    for (int g = 0; g < 2; ++g) {
      double mean = 0, var = 0;
      const std::size_t base = (static_cast<std::size_t>(n) * 4 + g * 2) * 9;
      for (std::size_t i = 0; i < 18; ++i) mean += y.data()[base + i];
      mean /= 18;
      for (std::size_t i = 0; i < 18; ++i) var += (y.data()[base + i] - mean) * (y.data()[base + i] - mean);
      var /= 18;
      // direct statistics of the raw group predict the normalised values
      double rm = 0, rv = 0;
      for (std::size_t i = 0; i < 18; ++i) rm += x.data()[base + i];
      rm /= 18;
      for (std::size_t i = 0; i < 18; ++i) rv += (x.data()[base + i] - rm) * (x.data()[base + i] - rm);
      rv /= 18;
      CHECK(std::abs(mean) < 1e-5);
      CHECK(var >= 1 - 1e-3);
      CHECK(var <= 1 + 1e-3);
      for (std::size_t i = 0; i < 18; ++i)
        CHECK(y.data()[base + i] == doctest::Approx((x.data()[base + i] - rm) / std::sqrt(rv + 1e-5)).epsilon(1e-4));
    }
  CHECK_THROWS_AS(group_norm(x, 3, Tensor{}, Tensor{}), ShapeError);
}

TEST_CASE("group_norm is invariant to per-group affine rescaling") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 10; ++t) {
    auto x = gradcheck::random_tensor<float>({1, 4, 4, 4}, rng, -10.0, 10.0);
    std::vector<float> v(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i < 32 ? 3.0f : 0.25f) * v[i] + (i < 32 ? -2.0f : 7.0f);
    auto a = group_norm(x, 2, Tensor{}, Tensor{});
    auto b = group_norm(Tensor::from(x.shape(), v), 2, Tensor{}, Tensor{});
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.at(i) - b.at(i)) < 1e-4);
  }
}

TEST_CASE("elementwise op examples") {
  auto r = relu(Tensor::from({2}, {-1, 2}));
  CHECK(r.at(0) == 0.0f);
  CHECK(r.at(1) == 2.0f);
  std::mt19937_64 rng(9);
  auto x = gradcheck::random_tensor<float>({3, 4}, rng);
  auto s = add(x, Tensor::zeros({3, 4}));
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(s.at(i) == x.at(i));
  CHECK(sigmoid(Tensor::zeros({1})).item() == 0.5f);
  CHECK_THROWS_AS(add(x, Tensor::zeros({4, 3})), ShapeError);
}

TEST_CASE("upsample examples") {
  auto u = upsample2x_nearest(Tensor::from({1, 1, 1, 1}, {1}));
  CHECK(u.shape() == Shape{1, 1, 2, 2});
  for (float v : u.data()) CHECK(v == 1.0f);

  std::mt19937_64 rng(10);
  auto x = gradcheck::random_tensor<float>({1, 2, 3, 4}, rng);
  auto back = pool3d(reshape(upsample2x_nearest(x), {1, 2, 1, 6, 8}), PoolMode::kAvg, {1, 2, 2}, {1, 2, 2});
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(back.at(i) == doctest::Approx(x.at(i)));

  auto leaf = Tensor::from(x.shape(), {x.data().begin(), x.data().end()}, true);
  sum(upsample2x_nearest(leaf)).backward();
  for (float g : leaf.grad()) CHECK(g == 4.0f);
  // finite differences agree
  gradcheck::Fn<double> f = [](const std::vector<Tensor64>& v) { return sum(upsample2x_nearest(v[0])); };
  auto x64 = gradcheck::random_tensor<double>({1, 2, 3, 4}, rng);
  CHECK(gradcheck::max_relative_error<double>(f, {x64}, 1e-5, 1) < 1e-8);
}

TEST_CASE("loss examples") {
  CHECK(bce_with_logits(Tensor::zeros({1}), Tensor::full({1}, 0.5f)).item() == doctest::Approx(std::log(2.0)));
  std::mt19937_64 rng(11);
  auto p = gradcheck::random_tensor<float>({5}, rng);
  CHECK(smooth_l1(p, p).item() == 0.0f);
  CHECK(smooth_l1(Tensor::full({3}, 2.0f), Tensor::zeros({3}), 1.0).item() == doctest::Approx(1.5));
  CHECK(smooth_l1(Tensor::full({3}, 0.5f), Tensor::zeros({3}), 1.0).item() == doctest::Approx(0.125));
  CHECK(bce_with_logits(p, p, Tensor::zeros({5})).item() == 0.0f);
  CHECK_THROWS_AS(smooth_l1(p, Tensor::zeros({4})), ShapeError);
}

TEST_CASE("backward examples") {
  std::mt19937_64 rng(12);
  auto x = gradcheck::random_tensor<float>({3, 4}, rng);
  auto a = Tensor::from(x.shape(), {x.data().begin(), x.data().end()}, true);
  sum(a).backward();
  for (float g : a.grad()) CHECK(g == 1.0f);

  auto b = Tensor::from(x.shape(), {x.data().begin(), x.data().end()}, true);
  sum(mul(b, b)).backward();
  for (std::int64_t i = 0; i < b.numel(); ++i) CHECK(b.grad()[i] == doctest::Approx(2 * b.at(i)));

  auto c = Tensor::from(x.shape(), {x.data().begin(), x.data().end()}, true);
  std::vector<float> w(static_cast<std::size_t>(c.numel()), 0.5f);
  weighted_sum(c, w).backward();
  for (float g : c.grad()) CHECK(g == 0.5f);

  CHECK_THROWS_AS(relu(a).backward(), ShapeError);
}

TEST_CASE("backward visits shared subgraphs once") {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = mul_scalar(x, 3.0f);
  sum(add(y, y)).backward();
  CHECK(x.grad()[0] == 6.0f);
  CHECK(x.grad()[1] == 6.0f);
}

TEST_CASE("no-grad guard records nothing") {
  auto x = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = mul_scalar(x, 2.0f);
  }
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("gradients match finite differences for every op") {
  for (auto& [name, gen] : gradcheck::suite<double>()) {
    std::mt19937_64 rng(fnv1a64(name));
    for (int t = 0; t < 3; ++t) {
      auto inst = gen(rng);
      CAPTURE(name);
      CHECK(gradcheck::max_relative_error<double>(inst.f, inst.inputs, gradcheck::fd_step<double>(), t, inst.constant) <
            1e-6);
    }
  }
  for (auto& [name, gen] : gradcheck::suite<float>()) {
    std::mt19937_64 rng(fnv1a64(name) + 1);
    for (int t = 0; t < 3; ++t) {
      auto inst = gen(rng);
      CAPTURE(name);
      CHECK(gradcheck::max_relative_error<float>(inst.f, inst.inputs, gradcheck::fd_step<float>(), t, inst.constant) <
            1e-2);
    }
  }
}

TEST_CASE("forward passes are bit-reproducible") {
  std::mt19937_64 r1(13), r2(13);
  auto inst1 = gradcheck::suite<float>()["composite"](r1);
  auto inst2 = gradcheck::suite<float>()["composite"](r2);
  auto a = inst1.f(inst1.inputs), b = inst2.f(inst2.inputs);
  CHECK(std::memcmp(a.data().data(), b.data().data(), sizeof(float) * static_cast<std::size_t>(a.numel())) == 0);
}
