#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "grad_suite.hpp"
#include "gradcheck.hpp"
#include "mp3d/backbone.hpp"
#include "mp3d/box.hpp"
#include "mp3d/commands.hpp"
#include "mp3d/config.hpp"
#include "mp3d/data.hpp"
#include "mp3d/detector.hpp"
#include "mp3d/eval.hpp"
#include "mp3d/ops.hpp"
#include "mp3d/profiler.hpp"
#include "mp3d/trainer.hpp"
#include "mp3d/weights.hpp"
#include "oracles.hpp"

using namespace mp3d;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string summary;
  std::vector<std::string> notes;
};

struct Criterion {
  int id;
  std::string title;
  std::function<Outcome()> run;
};

// ---- gradients ----

template <typename T>
std::string signature_of(const std::vector<BasicTensor<T>>& in) {
  std::string s;
  for (const auto& t : in) s += (t.defined() ? shape_str(t.shape()) : std::string("-")) + ";";
  return s;
}

struct GradStats {
  double worst = 0;
  std::string worst_op;
  int min_shapes = 1 << 30;
  std::string min_shapes_op;
  int ops = 0;
};

template <typename T>
GradStats run_grad_suite(std::uint64_t seed) {
  GradStats st;
  const double step = gradcheck::fd_step<T>();
  for (const auto& [name, gen] : gradcheck::suite<T>()) {
    std::mt19937_64 rng(seed);
    std::set<std::string> shapes;
    for (int draw = 0; draw < 200 && shapes.size() < 20; ++draw) {
      auto inst = gen(rng);
      if (!shapes.insert(signature_of(inst.inputs)).second) continue;
      const double e = gradcheck::max_relative_error<T>(inst.f, inst.inputs, step, seed + shapes.size(), inst.constant);
      if (std::isnan(e) || e > st.worst) {
        st.worst = std::isnan(e) ? std::numeric_limits<double>::infinity() : e;
        st.worst_op = name;
      }
    }
    const int n = static_cast<int>(shapes.size());
    if (n < st.min_shapes) {
      st.min_shapes = n;
      st.min_shapes_op = name;
    }
    ++st.ops;
  }
  return st;
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto d = run_grad_suite<double>(101);
  const auto f = run_grad_suite<float>(202);
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = d.worst < 1e-6 && f.worst < 1e-2 && d.min_shapes >= 20 && f.min_shapes >= 20 && secs < 120;
  o.summary = std::to_string(d.ops) + " ops; max rel err f64 " + fmt("%.2e", d.worst) + " (limit 1e-6), f32 " +
              fmt("%.2e", f.worst) + " (limit 1e-2); min shapes/op " + std::to_string(std::min(d.min_shapes, f.min_shapes)) +
              " (need 20); " + fmt("%.1f", secs) + " s (limit 120)";
  o.notes.push_back("worst f64 op: " + d.worst_op + ", worst f32 op: " + f.worst_op + "; fewest shapes: " +
                    (d.min_shapes <= f.min_shapes ? d.min_shapes_op : f.min_shapes_op));
  return o;
}

// ---- oracle equivalence ----

oracle::Vol to_vol(const Tensor& t) {
  oracle::Vol v{static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)),
                static_cast<int>(t.dim(3)), static_cast<int>(t.dim(4)), {}};
  v.v.assign(t.data().begin(), t.data().end());
  return v;
}

std::vector<double> as_double(std::span<const float> s) { return {s.begin(), s.end()}; }

oracle::Rect rect(const Box& b) { return {b.x1, b.y1, b.x2, b.y2}; }

Box random_box(std::mt19937_64& rng, double extent, double lo, double hi) {
  std::uniform_real_distribution<double> side(lo, hi), u(0, 1);
  const double w = side(rng), h = side(rng);
  const double x = u(rng) * (extent - w), y = u(rng) * (extent - h);
  return {x, y, x + w, y + h};
}

struct EvalInstance {
  ImageDetections preds;
  ImageBoxes gts;
  std::vector<std::string> images;
};

// Predictions jitter around GTs; scores on a coarse grid so ties occur.
EvalInstance random_eval_instance(std::mt19937_64& rng, int images, int max_gts, int max_preds) {
  EvalInstance in;
  std::uniform_int_distribution<int> ngt(0, max_gts), npred(0, max_preds), grid(0, 9);
  std::uniform_real_distribution<double> jitter(-3, 3), u(0, 1);
  for (int i = 0; i < images; ++i) {
    const std::string name = "img" + std::to_string(i);
    in.images.push_back(name);
    auto& g = in.gts[name];
    for (int k = ngt(rng); k > 0; --k) g.push_back(random_box(rng, 56, 4, 16));
    auto& p = in.preds[name];
    for (int k = npred(rng); k > 0; --k) {
      Box b;
      if (!g.empty() && u(rng) < 0.7) {
        b = g[std::uniform_int_distribution<std::size_t>(0, g.size() - 1)(rng)];
        b = {b.x1 + jitter(rng), b.y1 + jitter(rng), b.x2 + jitter(rng), b.y2 + jitter(rng)};
        if (!b.valid()) b = random_box(rng, 56, 4, 16);
      } else {
        b = random_box(rng, 56, 4, 16);
      }
      p.push_back({b, 0.05 + 0.1 * grid(rng)});
    }
  }
  return in;
}

std::vector<oracle::Pred> oracle_preds(const ImageDetections& preds) {
  std::vector<oracle::Pred> out;
  for (const auto& [image, dets] : preds)
    for (std::size_t i = 0; i < dets.size(); ++i) out.push_back({image, static_cast<int>(i), dets[i].score, rect(dets[i].box)});
  return out;
}

std::map<std::string, std::vector<oracle::Rect>> oracle_gts(const ImageBoxes& gts) {
  std::map<std::string, std::vector<oracle::Rect>> out;
  for (const auto& [image, bs] : gts)
    for (const auto& b : bs) out[image].push_back(rect(b));
  return out;
}

std::int64_t count_gts(const ImageBoxes& gts) {
  std::int64_t n = 0;
  for (const auto& [k, v] : gts) n += static_cast<std::int64_t>(v.size());
  return n;
}

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  constexpr int kTrials = 200;
  std::mt19937_64 rng(303);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  double conv_err = 0, pool_err = 0, metric_err = 0;
  int shape_mismatch = 0, nms_bad = 0, match_bad = 0, pool_max_bad = 0;

  for (int t = 0; t < kTrials; ++t) {
    const int groups = pick(1, 3), cin = groups * pick(1, 2), cout = groups * pick(1, 2);
    const std::array<int, 3> k{pick(1, 3), pick(1, 3), pick(1, 3)}, s{pick(1, 2), pick(1, 2), pick(1, 2)},
        p{pick(0, 1), pick(0, 1), pick(0, 1)};
    auto x = gradcheck::random_tensor<float>({pick(1, 2), cin, pick(k[0], 5), pick(k[1], 7), pick(k[2], 7)}, rng);
    auto w = gradcheck::random_tensor<float>({cout, cin / groups, k[0], k[1], k[2]}, rng);
    auto b = gradcheck::random_tensor<float>({cout}, rng);
    auto y = conv3d(x, w, b, {s, p, groups});
    auto ref = oracle::conv3d(to_vol(x), as_double(w.data()), cout, k, as_double(b.data()), s, p, groups);
    if (ref.v.size() != static_cast<std::size_t>(y.numel())) {
      ++shape_mismatch;
      continue;
    }
    const auto yd = y.data();
    for (std::size_t i = 0; i < ref.v.size(); ++i) conv_err = std::max(conv_err, std::abs(ref.v[i] - yd[i]));
  }

  for (int t = 0; t < kTrials; ++t) {
    const std::array<int, 3> win{pick(1, 3), pick(1, 3), pick(1, 3)}, st{pick(1, 2), pick(1, 2), pick(1, 2)};
    const std::array<int, 3> pad{pick(0, win[0] / 2), pick(0, win[1] / 2), pick(0, win[2] / 2)};
    auto x = gradcheck::random_tensor<float>({pick(1, 2), pick(1, 3), pick(win[0], 5), pick(win[1], 7), pick(win[2], 7)}, rng);
    for (bool max_mode : {true, false}) {
      auto y = pool3d(x, max_mode ? PoolMode::kMax : PoolMode::kAvg, win, st, pad);
      auto ref = oracle::pool3d(to_vol(x), max_mode, win, st, pad);
      if (ref.v.size() != static_cast<std::size_t>(y.numel())) {
        ++shape_mismatch;
        continue;
      }
      const auto yd = y.data();
      for (std::size_t i = 0; i < ref.v.size(); ++i) {
        if (max_mode && static_cast<float>(ref.v[i]) != yd[i]) ++pool_max_bad;
        pool_err = std::max(pool_err, std::abs(ref.v[i] - yd[i]));
      }
    }
  }

  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < kTrials; ++t) {
    std::vector<Detection> dets;
    std::vector<oracle::Rect> rects;
    std::vector<double> scores;
    const int n = pick(0, 30);
    for (int i = 0; i < n; ++i) {
      // Coarse scores force ties.
      dets.push_back({random_box(rng, 64, 4, 30), t % 2 ? u(rng) : 0.1 * pick(0, 5)});
      rects.push_back(rect(dets.back().box));
      scores.push_back(dets.back().score);
    }
    const double thr = 0.3 + 0.1 * pick(0, 4);
    if (nms(dets, thr) != oracle::nms(rects, scores, thr)) ++nms_bad;
  }

  for (int t = 0; t < kTrials; ++t) {
    auto in = random_eval_instance(rng, pick(1, 4), 4, 10);
    const auto got = match_detections(in.preds, in.gts, 0.5);
    const auto want = oracle::match(oracle_preds(in.preds), oracle_gts(in.gts), 0.5);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i)
      same = got[i].image == want[i].first.image && got[i].index == want[i].first.index && got[i].tp == want[i].second;
    if (!same) ++match_bad;
  }

  for (int t = 0; t < kTrials; ++t) {
    auto in = random_eval_instance(rng, pick(1, 5), 3, 8);
    const auto gt_total = count_gts(in.gts);
    if (gt_total == 0) in.gts[in.images[0]].push_back({1, 1, 9, 9});
    const auto report = evaluate(in.preds, in.gts, in.images);
    const auto matched = oracle::match(oracle_preds(in.preds), oracle_gts(in.gts), 0.5);
    std::vector<bool> tp;
    std::vector<double> sc;
    for (const auto& [pr, flag] : matched) {
      tp.push_back(flag);
      sc.push_back(pr.score);
    }
    const long images = static_cast<long>(in.images.size());
    const auto want = oracle::froc(tp, sc, images, count_gts(in.gts), kFpRates);
    for (std::size_t i = 0; i < want.size(); ++i) metric_err = std::max(metric_err, std::abs(report.sensitivity[i] - want[i]));
    metric_err = std::max(metric_err, std::abs(report.ap50 - oracle::ap(tp, sc, count_gts(in.gts))));
  }

  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = shape_mismatch == 0 && conv_err < 1e-5 && pool_err < 1e-5 && pool_max_bad == 0 && nms_bad == 0 &&
           match_bad == 0 && metric_err < 1e-5 && secs < 300;
  o.summary = "200 instances each; conv max err " + fmt("%.2e", conv_err) + ", pool " + fmt("%.2e", pool_err) +
              ", FROC/AP " + fmt("%.2e", metric_err) + " (limit 1e-5); NMS mismatches " + std::to_string(nms_bad) +
              ", matching flag mismatches " + std::to_string(match_bad) + ", max-pool inexact " +
              std::to_string(pool_max_bad) + "; " + fmt("%.1f", secs) + " s (limit 300)";
  if (shape_mismatch) o.notes.push_back(std::to_string(shape_mismatch) + " output shape mismatches");
  return o;
}

// ---- profiler ----

double gflops(BackboneVariant v, int slices, const ProfileConfig& p) {
  const auto cfg = paper_detector_config(v, slices);
  const auto g = build_profile_graph(cfg, p);
  return static_cast<double>(count_flops(g, {1, cfg.backbone.input_channels, slices, p.resolution, p.resolution},
                                         p.convention)
                                 .total_flops) /
         1e9;
}

double mparams(BackboneVariant v, const ProfileConfig& p) {
  return static_cast<double>(count_params(build_profile_graph(paper_detector_config(v, 9), p)).total_params) / 1e6;
}

Outcome profiler_targets() {
  Outcome o;
  ProfileConfig best;
  double best_gap = 1e300, best_value = 0;
  for (int mac : {1, 2})
    for (int res : {448, 512, 576}) {
      ProfileConfig p;
      p.convention = FlopConvention{mac};
      p.resolution = res;
      const double g = gflops(BackboneVariant::kMP3D63, 9, p);
      if (std::abs(g - 248.93) < best_gap) {
        best_gap = std::abs(g - 248.93);
        best = p;
        best_value = g;
      }
    }
  const auto rel = [](double got, double want) { return std::abs(got - want) / want; };
  bool pass = rel(best_value, 248.93) <= 0.10;
  std::string s = "calibrated mac=" + std::to_string(best.convention.mac_flops) + " res=" + std::to_string(best.resolution) +
                  ": D=9 " + fmt("%.2f", best_value) + " GFLOPs (" + fmt("%+.1f%%", 100 * (best_value / 248.93 - 1)) +
                  ", limit 10%)";
  const std::map<int, double> targets{{5, 156.84}, {7, 202.88}, {11, 294.97}};
  for (const auto& [d, want] : targets) {
    const double got = gflops(BackboneVariant::kMP3D63, d, best);
    pass = pass && rel(got, want) <= 0.02;
    s += "; D=" + std::to_string(d) + " " + fmt("%.2f", got) + " (" + fmt("%+.2f%%", 100 * (got / want - 1)) + ")";
  }
  const double ratio = gflops(BackboneVariant::kMR3D50, 9, best) / best_value;
  const double dparams = mparams(BackboneVariant::kMR3D50, best) - mparams(BackboneVariant::kMP3D63, best);
  pass = pass && rel(ratio, 1.670) <= 0.10 && rel(dparams, 18.87) <= 0.10;
  s += " (limit 2%); MR/MP FLOP ratio " + fmt("%.3f", ratio) + " (1.670 +-10%); param diff " + fmt("%.2f", dparams) +
       "M (18.87M +-10%)";
  o.pass = pass;
  o.summary = s;
  return o;
}

// ---- metric properties ----

bool same_metrics(const EvalReport& a, const EvalReport& b) {
  for (std::size_t i = 0; i < a.sensitivity.size(); ++i)
    if (std::abs(a.sensitivity[i] - b.sensitivity[i]) > 1e-12) return false;
  return std::abs(a.ap50 - b.ap50) <= 1e-12;
}

Outcome metric_properties() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(707);
  const std::vector<double> rates{0.125, 0.25, 0.5, 1, 2, 4, 8};
  int monotone_bad = 0, map_bad = 0, rename_bad = 0, trials = 0;
  while (trials < 1000) {
    auto in = random_eval_instance(rng, 4, 3, 8);
    if (count_gts(in.gts) == 0) continue;
    ++trials;
    const auto base = evaluate(in.preds, in.gts, in.images, 0.5, rates);
    for (std::size_t i = 0; i < base.sensitivity.size(); ++i) {
      const double v = base.sensitivity[i];
      if (v < 0 || v > 1 || (i > 0 && v < base.sensitivity[i - 1])) ++monotone_bad;
    }
    if (base.ap50 < 0 || base.ap50 > 1) ++monotone_bad;

    auto mapped = in.preds;
    const double a = std::uniform_real_distribution<double>(0.5, 4)(rng);
    for (auto& [k, dets] : mapped)
      for (auto& d : dets) d.score = std::exp(a * d.score) - 7;
    if (!same_metrics(base, evaluate(mapped, in.gts, in.images, 0.5, rates))) ++map_bad;

    std::vector<std::string> names = in.images;
    std::shuffle(names.begin(), names.end(), rng);
    EvalInstance renamed;
    for (std::size_t i = 0; i < names.size(); ++i) {
      renamed.preds["z_" + names[i]] = in.preds[in.images[i]];
      renamed.gts["z_" + names[i]] = in.gts[in.images[i]];
      renamed.images.push_back("z_" + names[i]);
    }
    if (!same_metrics(base, evaluate(renamed.preds, renamed.gts, renamed.images, 0.5, rates))) ++rename_bad;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = monotone_bad + map_bad + rename_bad == 0 && secs < 60;
  o.summary = "1000 trials; monotonicity/bounds violations " + std::to_string(monotone_bad) + ", score-map changes " +
              std::to_string(map_bad) + ", permutation/renaming changes " + std::to_string(rename_bad) + "; " +
              fmt("%.1f", secs) + " s (limit 60)";
  return o;
}

// ---- pipeline ----

struct Pipeline {
  ExperimentConfig cfg;
  fs::path work;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  double synth_secs = 0, pretrain_secs = 0;
  std::map<std::string, double> train_secs;

  fs::path data() const { return work / "data"; }
  fs::path pretrained() const { return work / "pretrain" / "pretrained.weights"; }

  ExperimentConfig variant(std::uint64_t seed, int slices) const {
    auto c = cfg;
    c.train.seed = seed;
    c.detector.backbone.input_slices = slices;
    return c;
  }

  void prepare() {
    auto t0 = Clock::now();
    cmd_synth_gen(cfg, data());
    synth_secs = seconds_since(t0);
    t0 = Clock::now();
    cmd_pretrain_sim(cfg, work / "pretrain");
    pretrain_secs = seconds_since(t0);
  }

  /// Trains (if needed) and evaluates one run; returns its directory.
  fs::path run(const std::string& name, std::uint64_t seed, int slices, bool pretrained_init) {
    const fs::path dir = work / name;
    if (!fs::exists(dir / "eval" / "report.json")) {
      const auto c = variant(seed, slices);
      TrainOptions t;
      t.data = data();
      t.out = dir;
      if (pretrained_init) t.init = pretrained();
      const auto t0 = Clock::now();
      cmd_train(c, t);
      EvalOptions e;
      e.data = data();
      e.out = dir / "eval" / "report.json";
      e.weights = dir / "final.weights";
      cmd_eval(c, e);
      train_secs[name] = seconds_since(t0);
    }
    return dir;
  }

  static double ap(const fs::path& dir) {
    std::ifstream in(dir / "eval" / "report.json");
    return nlohmann::json::parse(in).at("ap_at_05").get<double>();
  }
};

Outcome depth_transfer(Pipeline& pl) {
  Outcome o;
  const auto store = WeightStore::load(pl.pretrained());
  int mismatches = 0;
  std::string loads;
  for (int d : {5, 7, 9, 11}) {
    auto dcfg = pl.cfg.detector;
    dcfg.backbone.input_slices = d;
    Detector det(dcfg, 99);
    const auto rep = transfer_depth(store, det.graph(), false);
    const int mm = static_cast<int>(rep.missing.size() + rep.unexpected.size());
    mismatches += mm;
    loads += " D=" + std::to_string(d) + ":" + std::to_string(rep.matched.size()) + "/" + std::to_string(mm);
  }

  RgbSyntheticConfig rc = pl.cfg.pretrain.images;
  rc.num_images = 1;
  const auto img = generate_rgb_synthetic(rc).front();
  const auto h = img.height, w = img.width, plane = h * w;
  auto slice = [&](int c) { return std::vector<float>(img.pixels.begin() + c * plane, img.pixels.begin() + (c + 1) * plane); };
  std::vector<float> v3, v9;
  for (int c : {0, 1, 2}) {
    const auto s = slice(c);
    v3.insert(v3.end(), s.begin(), s.end());
  }
  for (int c : {0, 0, 0, 0, 1, 2, 2, 2, 2}) {
    const auto s = slice(c);
    v9.insert(v9.end(), s.begin(), s.end());
  }

  const auto backbone_store = store.filtered("backbone.");
  auto features = [&](int d, const std::vector<float>& vol) {
    auto bcfg = pl.cfg.detector.backbone;
    bcfg.input_slices = d;
    auto g = build_backbone(bcfg, true, 5);
    transfer_depth(backbone_store, g, true);
    return std::make_pair(g.forward({{"volume", Tensor::from({1, 1, d, h, w}, vol)}}), g);
  };
  const auto f3 = features(3, v3).first;
  const auto [f9, g9] = features(9, v9);

  double worst = 0;
  std::string per_stage;
  for (int k = 2; k <= 5; ++k) {
    const std::string name = "C" + std::to_string(k) + "_3d";
    const auto& a = f3.at(name);
    const auto& b = f9.at(name);
    const auto ch = a.dim(1), hw = a.dim(3) * a.dim(4);
    const auto ca = a.data(), cb = b.data();
    double diff = 0, scale = 0;
    for (std::int64_t c = 0; c < ch; ++c)
      for (std::int64_t i = 0; i < hw; ++i) {
        const double x = ca[static_cast<std::size_t>((c * a.dim(2) + a.dim(2) / 2) * hw + i)];
        const double y = cb[static_cast<std::size_t>((c * b.dim(2) + b.dim(2) / 2) * hw + i)];
        diff = std::max(diff, std::abs(x - y));
        scale = std::max(scale, std::abs(x));
      }
    worst = std::max(worst, diff);
    per_stage += " " + name + " " + fmt("%.3e", diff) + " (|f|max " + fmt("%.2f", scale) + ")";
  }

  // Depth receptive radius of the deepest path through the backbone.
  std::vector<int> radius(g9.layers().size(), 0);
  bool has_norm = false;
  for (std::size_t i = 0; i < g9.layers().size(); ++i) {
    const auto& s = g9.layers()[i];
    int r = 0;
    for (int in : s.inputs) r = std::max(r, radius[static_cast<std::size_t>(in)]);
    if (s.kind == LayerKind::kConv || s.kind == LayerKind::kMaxPool || s.kind == LayerKind::kAvgPool)
      r += (s.kernel[0] - 1) / 2;
    has_norm = has_norm || s.kind == LayerKind::kGroupNorm;
    radius[i] = r;
  }
  std::string radii;
  for (int k = 2; k <= 5; ++k)
    radii += " C" + std::to_string(k) + "=" +
             std::to_string(radius[static_cast<std::size_t>(g9.output_id("C" + std::to_string(k) + "_3d"))]);

  o.pass = mismatches == 0 && worst < 1e-4;
  o.summary = "load mismatches " + std::to_string(mismatches) + " (matched/mismatched:" + loads +
              "); center feature max abs diff " + fmt("%.3e", worst) + " (limit 1e-4)";
  o.notes.push_back("per stage:" + per_stage);
  o.notes.push_back("depth receptive radius per stage:" + radii +
                    "; the replicated input equals the 3-slice input at centre offsets -1..+1 and adds 3 copies of "
                    "s0/s2 per side");
  o.notes.push_back("beyond offset 1 the 3-slice model reads zero padding where the 9-slice model reads s0/s2, so "
                    "every stage with radius >= 2 differs by construction");
  if (has_norm)
    o.notes.push_back("C2 (radius 1) also differs: group norm pools over all depth positions, and the 9-slice input "
                      "counts s0 and s2 four times each");
  return o;
}

Outcome depth_benefit(Pipeline& pl) {
  const auto t0 = Clock::now();
  Outcome o;
  double margin_sum = 0;
  std::string per_seed;
  for (auto seed : pl.seeds) {
    const auto d9 = pl.run("scratch_d9_s" + std::to_string(seed), seed, 9, false);
    const auto d1 = pl.run("scratch_d1_s" + std::to_string(seed), seed, 1, false);
    const double a9 = pl.ap(d9), a1 = pl.ap(d1);
    margin_sum += a9 - a1;
    per_seed += " seed " + std::to_string(seed) + ": D9 " + fmt("%.4f", a9) + " D1 " + fmt("%.4f", a1) + ";";
  }
  const double mean = margin_sum / static_cast<double>(pl.seeds.size());
  const double secs = seconds_since(t0) + pl.synth_secs;
  o.pass = mean >= 0.10 && secs < 3600;
  o.summary = "mean AP@0.5 margin " + fmt("%.4f", mean) + " (need >= 0.10); " + fmt("%.0f", secs) + " s (limit 3600)";
  o.notes.push_back("per seed:" + per_seed);
  return o;
}

Outcome pretrain_speedup(Pipeline& pl) {
  const auto t0 = Clock::now();
  double scratch_secs = 0;
  Outcome o;
  int wins = 0;
  std::string per_seed;
  for (auto seed : pl.seeds) {
    const std::string sname = "scratch_d9_s" + std::to_string(seed);
    const auto scratch = pl.run(sname, seed, 9, false);
    if (pl.train_secs.count(sname)) scratch_secs += pl.train_secs[sname];
    const auto pre = pl.run("pretrained_d9_s" + std::to_string(seed), seed, 9, true);
    const auto rs = read_loss_csv(scratch / "loss.csv");
    const auto rp = read_loss_csv(pre / "loss.csv");
    const double target = final_loss(rs, 50);
    const auto reach = steps_to_reach(rp, target, 50);
    const double frac = reach < 0 ? 1e9 : static_cast<double>(reach) / static_cast<double>(rs.size());
    if (reach >= 0 && frac <= 0.6) ++wins;
    per_seed += " seed " + std::to_string(seed) + ": scratch final " + fmt("%.5f", target) + " over " +
                std::to_string(rs.size()) + " steps, pretrained final " + fmt("%.5f", final_loss(rp, 50)) +
                ", reached at " + (reach < 0 ? std::string("never") : std::to_string(reach) + " (" + fmt("%.1f%%", 100 * frac) + ")") + ";";
  }
  const double secs = seconds_since(t0) + scratch_secs + pl.pretrain_secs;
  o.pass = wins >= 2 && secs < 2700;
  o.summary = std::to_string(wins) + "/3 pairs reach the scratch final loss within 60% of its steps (need 2); " +
              fmt("%.0f", secs) + " s (limit 2700)";
  o.notes.push_back("loss is the 50-step moving average;" + per_seed);
  return o;
}

std::vector<fs::path> artifact_files(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    if (ext == ".weights" || ext == ".csv") out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome reproducibility(Pipeline& pl) {
  Outcome o;
  pl.run("scratch_d9_s1", 1, 9, false);
  pl.run("pretrained_d9_s1", 1, 9, true);
  Pipeline again = pl;
  again.work = pl.work / "rerun";
  fs::remove_all(again.work);
  again.prepare();
  again.run("scratch_d9_s1", 1, 9, false);
  again.run("pretrained_d9_s1", 1, 9, true);

  int compared = 0, differ = 0;
  const std::vector<fs::path> roots{"data", "pretrain", "scratch_d9_s1", "pretrained_d9_s1"};
  for (const auto& r : roots) {
    const auto a = artifact_files(pl.work / r), b = artifact_files(again.work / r);
    if (a != b) {
      ++differ;
      o.notes.push_back("file sets differ under " + r.string());
      continue;
    }
    for (const auto& f : a) {
      ++compared;
      if (slurp(pl.work / r / f) != slurp(again.work / r / f)) {
        ++differ;
        o.notes.push_back("differs: " + (r / f).string());
      }
    }
  }
  o.pass = differ == 0 && compared > 0;
  o.summary = std::to_string(compared) + " weight/CSV files compared across two full reruns, " + std::to_string(differ) +
              " differ";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  fs::path config, work;
  std::vector<int> only;
  bool keep = false;
  app.add_option("--config", config, "experiment config for the training criteria")->required()->check(CLI::ExistingFile);
  app.add_option("--work", work, "scratch directory")->required();
  app.add_option("--only", only, "criterion ids to run");
  app.add_flag("--keep", keep, "reuse finished runs in the work directory");
  CLI11_PARSE(app, argc, argv);

  Pipeline pl;
  pl.cfg = ExperimentConfig::load(config);
  pl.work = work;
  bool prepared = false;
  auto ensure_prepared = [&] {
    if (prepared) return;
    if (!keep) fs::remove_all(work);
    fs::create_directories(work);
    if (!keep || !fs::exists(pl.pretrained())) pl.prepare();
    prepared = true;
  };

  const std::vector<Criterion> criteria{
      {1, "gradient suite", gradient_suite},
      {2, "oracle equivalence", oracle_equivalence},
      {3, "profiler targets", profiler_targets},
      {4, "depth transfer", [&] { ensure_prepared(); return depth_transfer(pl); }},
      {5, "depth benefit", [&] { ensure_prepared(); return depth_benefit(pl); }},
      {6, "pretraining speedup", [&] { ensure_prepared(); return pretrain_speedup(pl); }},
      {7, "metric properties", metric_properties},
      {8, "reproducibility", [&] { ensure_prepared(); return reproducibility(pl); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.summary = std::string("error: ") + e.what();
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.title << ": " << o.summary << "\n";
    for (const auto& n : o.notes) std::cout << "     " << n << "\n";
    std::cout.flush();
  }
  return failed == 0 ? 0 : 1;
}
