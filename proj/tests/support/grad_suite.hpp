#pragma once

// Random gradient-check instances for every differentiable op.

#include <map>
#include <string>

#include "gradcheck.hpp"
#include "mp3d/conversion.hpp"
#include "mp3d/ops.hpp"

namespace gradcheck {

template <typename T>
struct Instance {
  Fn<T> f;
  std::vector<mp3d::BasicTensor<T>> inputs;
  std::vector<bool> constant;
};

template <typename T>
using Generator = std::function<Instance<T>(std::mt19937_64&)>;

inline int pick(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

/// Pushes every entry away from zero by at least `gap` (keeps ReLU off its kink).
template <typename T>
mp3d::BasicTensor<T> away_from_zero(mp3d::BasicTensor<T> t, double gap = 0.05) {
  for (auto& x : t.mutable_data()) x = static_cast<T>(x >= 0 ? x + gap : x - gap);
  return t;
}

template <typename T>
std::map<std::string, Generator<T>> suite() {
  using TT = mp3d::BasicTensor<T>;
  std::map<std::string, Generator<T>> g;

  g["conv3d"] = [](std::mt19937_64& r) {
    const int groups = pick(r, 1, 2);
    const int cin = groups * pick(r, 1, 2), cout = groups * pick(r, 1, 2);
    const mp3d::Triple k{pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 3)};
    const mp3d::Triple s{pick(r, 1, 2), pick(r, 1, 2), pick(r, 1, 2)};
    const mp3d::Triple p{pick(r, 0, k[0] / 2), pick(r, 0, k[1] / 2), pick(r, 0, k[2] / 2)};
    const bool with_bias = pick(r, 0, 1) == 1;
    mp3d::Shape in{pick(r, 1, 2), cin, pick(r, k[0], 4), pick(r, k[1], 5), pick(r, k[2], 5)};
    mp3d::ConvOptions o{s, p, groups};
    Instance<T> inst;
    inst.inputs = {random_tensor<T>(in, r), random_tensor<T>({cout, cin / groups, k[0], k[1], k[2]}, r),
                   with_bias ? random_tensor<T>({cout}, r) : TT{}};
    inst.f = [o](const std::vector<TT>& x) { return mp3d::conv3d(x[0], x[1], x[2], o); };
    return inst;
  };
  g["pool3d_max"] = [](std::mt19937_64& r) {
    const mp3d::Triple win{pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 3)};
    const mp3d::Triple s{pick(r, 1, 2), pick(r, 1, 2), pick(r, 1, 2)};
    const mp3d::Triple p{pick(r, 0, win[0] / 2), pick(r, 0, win[1] / 2), pick(r, 0, win[2] / 2)};
    Instance<T> inst;
    inst.inputs = {distinct_tensor<T>({pick(r, 1, 2), pick(r, 1, 2), pick(r, win[0], 3), pick(r, win[1], 5),
                                       pick(r, win[2], 5)},
                                      r)};
    inst.f = [win, s, p](const std::vector<TT>& x) { return mp3d::pool3d(x[0], mp3d::PoolMode::kMax, win, s, p); };
    return inst;
  };
  g["pool3d_avg"] = [](std::mt19937_64& r) {
    const mp3d::Triple win{pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 3)};
    const mp3d::Triple s{pick(r, 1, 2), pick(r, 1, 2), pick(r, 1, 2)};
    const mp3d::Triple p{pick(r, 0, win[0] / 2), pick(r, 0, win[1] / 2), pick(r, 0, win[2] / 2)};
    Instance<T> inst;
    inst.inputs = {random_tensor<T>(
        {pick(r, 1, 2), pick(r, 1, 2), pick(r, win[0], 3), pick(r, win[1], 5), pick(r, win[2], 5)}, r)};
    inst.f = [win, s, p](const std::vector<TT>& x) { return mp3d::pool3d(x[0], mp3d::PoolMode::kAvg, win, s, p); };
    return inst;
  };
  g["group_norm"] = [](std::mt19937_64& r) {
    const int groups = pick(r, 1, 3), c = groups * pick(r, 1, 2);
    mp3d::Shape shape{pick(r, 1, 2), c, pick(r, 2, 4), pick(r, 2, 4)};
    if (pick(r, 0, 1)) shape.push_back(pick(r, 1, 3));
    Instance<T> inst;
    inst.inputs = {random_tensor<T>(shape, r), random_tensor<T>({c}, r, 0.5, 1.5), random_tensor<T>({c}, r)};
    inst.f = [groups](const std::vector<TT>& x) { return mp3d::group_norm(x[0], groups, x[1], x[2]); };
    return inst;
  };
  g["relu"] = [](std::mt19937_64& r) {
    Instance<T> inst;
    inst.inputs = {away_from_zero(random_tensor<T>({pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 5)}, r))};
    inst.f = [](const std::vector<TT>& x) { return mp3d::relu(x[0]); };
    return inst;
  };
  g["sigmoid"] = [](std::mt19937_64& r) {
    Instance<T> inst;
    inst.inputs = {random_tensor<T>({pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 5)}, r, -3, 3)};
    inst.f = [](const std::vector<TT>& x) { return mp3d::sigmoid(x[0]); };
    return inst;
  };
  g["add"] = [](std::mt19937_64& r) {
    const mp3d::Shape s{pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 5)};
    Instance<T> inst;
    inst.inputs = {random_tensor<T>(s, r), random_tensor<T>(s, r)};
    inst.f = [](const std::vector<TT>& x) { return mp3d::add(x[0], x[1]); };
    return inst;
  };
  g["mul"] = [](std::mt19937_64& r) {
    const mp3d::Shape s{pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 5)};
    Instance<T> inst;
    inst.inputs = {random_tensor<T>(s, r), random_tensor<T>(s, r)};
    inst.f = [](const std::vector<TT>& x) { return mp3d::add(mp3d::mul(x[0], x[1]), mp3d::mul(x[0], x[0])); };
    return inst;
  };
  g["mul_scalar"] = [](std::mt19937_64& r) {
    const auto k = static_cast<T>(std::uniform_real_distribution<double>(-2, 2)(r));
    Instance<T> inst;
    inst.inputs = {random_tensor<T>({pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 5)}, r)};
    inst.f = [k](const std::vector<TT>& x) { return mp3d::mul_scalar(x[0], k); };
    return inst;
  };
  g["upsample2x_nearest"] = [](std::mt19937_64& r) {
    Instance<T> inst;
    inst.inputs = {random_tensor<T>({pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4)}, r)};
    inst.f = [](const std::vector<TT>& x) { return mp3d::upsample2x_nearest(x[0]); };
    return inst;
  };
  g["narrow"] = [](std::mt19937_64& r) {
    const mp3d::Shape s{pick(r, 1, 3), pick(r, 2, 4), pick(r, 2, 5)};
    const int dim = pick(r, 0, 2);
    const auto start = pick(r, 0, static_cast<int>(s[static_cast<std::size_t>(dim)]) - 1);
    const auto len = pick(r, 1, static_cast<int>(s[static_cast<std::size_t>(dim)]) - start);
    Instance<T> inst;
    inst.inputs = {random_tensor<T>(s, r)};
    inst.f = [dim, start, len](const std::vector<TT>& x) { return mp3d::narrow(x[0], dim, start, len); };
    return inst;
  };
  g["reshape"] = [](std::mt19937_64& r) {
    const int a = pick(r, 1, 4), b = pick(r, 1, 4), c = pick(r, 1, 4);
    Instance<T> inst;
    inst.inputs = {random_tensor<T>({a, b, c}, r)};
    inst.f = [a, b, c](const std::vector<TT>& x) { return mp3d::reshape(x[0], {a * b, c}); };
    return inst;
  };
  g["concat_anchor_outputs"] = [](std::mt19937_64& r) {
    const int n = pick(r, 1, 2), k = pick(r, 1, 4), a = pick(r, 1, 3), levels = pick(r, 1, 3);
    Instance<T> inst;
    for (int l = 0; l < levels; ++l) inst.inputs.push_back(random_tensor<T>({n, k * a, pick(r, 1, 4), pick(r, 1, 4)}, r));
    inst.f = [k](const std::vector<TT>& x) { return mp3d::concat_anchor_outputs(x, k); };
    return inst;
  };
  g["sum"] = [](std::mt19937_64& r) {
    Instance<T> inst;
    inst.inputs = {random_tensor<T>({pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 5)}, r)};
    inst.f = [](const std::vector<TT>& x) { return mp3d::sum(x[0]); };
    return inst;
  };
  g["bce_with_logits"] = [](std::mt19937_64& r) {
    const mp3d::Shape s{pick(r, 1, 4), pick(r, 1, 8)};
    Instance<T> inst;
    inst.inputs = {random_tensor<T>(s, r, -3, 3), random_tensor<T>(s, r, 0, 1), random_tensor<T>(s, r, 0, 2)};
    inst.constant = {false, true, true};
    inst.f = [](const std::vector<TT>& x) { return mp3d::bce_with_logits(x[0], x[1], x[2]); };
    return inst;
  };
  g["smooth_l1"] = [](std::mt19937_64& r) {
    const mp3d::Shape s{pick(r, 1, 4), pick(r, 1, 8)};
    const double beta = std::uniform_real_distribution<double>(0.5, 1.5)(r);
    Instance<T> inst;
    auto target = random_tensor<T>(s, r, -2, 2);
    auto pred = random_tensor<T>(s, r, -2, 2);
    // keep |pred - target| off the beta kink
    for (std::size_t i = 0; i < static_cast<std::size_t>(pred.numel()); ++i) {
      const double d = static_cast<double>(pred.data()[i]) - static_cast<double>(target.data()[i]);
      if (std::abs(std::abs(d) - beta) < 0.05) pred.mutable_data()[i] = static_cast<T>(target.data()[i] + (d > 0 ? beta + 0.1 : -beta - 0.1));
    }
    inst.inputs = {pred, target, random_tensor<T>(s, r, 0, 2)};
    inst.constant = {false, true, true};
    inst.f = [beta](const std::vector<TT>& x) { return mp3d::smooth_l1(x[0], x[1], beta, x[2]); };
    return inst;
  };
  g["group_transform"] = [](std::mt19937_64& r) {
    const int d = 2 * pick(r, 0, 2) + 1, c = pick(r, 1, 3), max_slices = d + 2 * pick(r, 0, 2);
    Instance<T> inst;
    inst.inputs = {random_tensor<T>({pick(r, 1, 2), c, d, pick(r, 1, 4), pick(r, 1, 4)}, r),
                   random_tensor<T>({c, max_slices}, r), random_tensor<T>({c}, r)};
    inst.f = [](const std::vector<TT>& x) { return mp3d::group_transform(x[0], x[1], x[2]); };
    return inst;
  };
  g["center_crop_transform"] = [](std::mt19937_64& r) {
    Instance<T> inst;
    inst.inputs = {random_tensor<T>({pick(r, 1, 2), pick(r, 1, 3), 2 * pick(r, 0, 2) + 1, pick(r, 1, 4), pick(r, 1, 4)}, r)};
    inst.f = [](const std::vector<TT>& x) { return mp3d::center_crop_transform(x[0]); };
    return inst;
  };
  g["composite"] = [](std::mt19937_64& r) {
    // conv3d -> group_norm -> relu -> pool -> sum; no conv bias, GN removes it
    const int cout = 2 * pick(r, 1, 2);
    Instance<T> inst;
    inst.inputs = {random_tensor<T>({1, pick(r, 1, 2), pick(r, 1, 3), pick(r, 4, 6), pick(r, 4, 6)}, r), {}, {},
                   random_tensor<T>({cout}, r, 0.5, 1.5), random_tensor<T>({cout}, r)};
    inst.inputs[1] = random_tensor<T>({cout, inst.inputs[0].dim(1), 1, 3, 3}, r);
    inst.f = [](const std::vector<TT>& x) {
      auto y = mp3d::conv3d(x[0], x[1], x[2], {{1, 1, 1}, {0, 1, 1}, 1});
      y = mp3d::relu(mp3d::group_norm(y, 2, x[3], x[4]));
      return mp3d::sum(mp3d::pool3d(y, mp3d::PoolMode::kAvg, {1, 2, 2}, {1, 2, 2}));
    };
    return inst;
  };
  return g;
}

/// Finite-difference step for each precision.
template <typename T>
constexpr double fd_step() {
  return sizeof(T) == 4 ? 1e-3 : 1e-5;
}

}  // namespace gradcheck
