#include "mp3d/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

#include "mp3d/errors.hpp"

namespace mp3d {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("train.lr must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train.momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be nonnegative");
  if (epochs < 0) throw ConfigError("train.epochs must be nonnegative");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (warmup_steps < 0 || !(warmup_factor > 0 && warmup_factor <= 1))
    throw ConfigError("train.warmup_steps must be >= 0 and warmup_factor in (0, 1]");
  for (double f : decay_at)
    if (!(f > 0 && f < 1)) throw ConfigError("train.decay_at entries must be fractions in (0, 1)");
  if (!(decay_factor > 0 && decay_factor <= 1)) throw ConfigError("train.decay_factor must be in (0, 1]");
  if (!(grad_clip >= 0)) throw ConfigError("train.grad_clip must be nonnegative");
  if (loader_workers < 1) throw ConfigError("train.loader_workers must be positive");
}

double learning_rate(const TrainConfig& cfg, std::int64_t step, std::int64_t total) {
  double lr = cfg.lr;
  for (double f : cfg.decay_at)
    if (step >= static_cast<std::int64_t>(std::floor(f * static_cast<double>(total) + 1e-9))) lr *= cfg.decay_factor;
  if (step < cfg.warmup_steps) {
    const double a = static_cast<double>(step) / cfg.warmup_steps;
    lr *= cfg.warmup_factor * (1 - a) + a;
  }
  return lr;
}

Sgd::Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (const auto& p : params_) velocity_.emplace_back(static_cast<std::size_t>(p.numel()), 0.f);
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double Sgd::clip_grad_norm(double max_norm) {
  double sq = 0;
  for (auto& p : params_)
    if (p.has_grad())
      for (float g : p.mutable_grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (auto& p : params_)
      if (p.has_grad())
        for (float& g : p.mutable_grad()) g *= scale;
  }
  return norm;
}

void Sgd::step(double lr) {
  const auto mu = static_cast<float>(momentum_), wd = static_cast<float>(weight_decay_), a = static_cast<float>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto w = p.mutable_data();
    auto& v = velocity_[i];
    if (!p.has_grad()) {
      for (std::size_t k = 0; k < w.size(); ++k) v[k] = mu * v[k] + wd * w[k];
    } else {
      auto g = p.mutable_grad();
      for (std::size_t k = 0; k < w.size(); ++k) v[k] = mu * v[k] + g[k] + wd * w[k];
    }
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= a * v[k];
  }
}

Tensor stack_samples(const std::vector<SliceSample>& samples) {
  if (samples.empty()) throw ShapeError("cannot stack an empty batch");
  std::int64_t d = samples[0].depth, h = 0, w = 0;
  for (const auto& s : samples) {
    if (s.depth != d) throw ShapeError("batch samples differ in slice count");
    h = std::max(h, s.height);
    w = std::max(w, s.width);
  }
  const auto n = static_cast<std::int64_t>(samples.size());
  std::vector<float> data(static_cast<std::size_t>(n * d * h * w), 0.f);
  for (std::int64_t b = 0; b < n; ++b) {
    const auto& s = samples[static_cast<std::size_t>(b)];
    for (std::int64_t z = 0; z < d; ++z)
      for (std::int64_t y = 0; y < s.height; ++y)
        std::copy_n(s.window.begin() + (z * s.height + y) * s.width, s.width,
                    data.begin() + ((b * d + z) * h + y) * w);
  }
  return Tensor::from({n, 1, d, h, w}, std::move(data));
}

namespace {

WeightStore snapshot(const Detector& det) {
  WeightStore s = WeightStore::from_graph(det.graph());
  s.set_backbone_meta(det.config().backbone);
  return s;
}

}  // namespace

TrainResult train_detector(Detector& det, const SampleSource& source, const TrainConfig& cfg,
                           std::int64_t step_limit) {
  cfg.validate();
  if (source.size == 0 && cfg.epochs > 0) throw ConfigError("training set is empty");
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const auto steps_per_epoch = static_cast<std::int64_t>((source.size + bs - 1) / std::max<std::size_t>(bs, 1));
  const std::int64_t total = steps_per_epoch * cfg.epochs;
  const std::int64_t steps = step_limit > 0 ? std::min(step_limit, total) : total;

  TrainResult result;
  result.final_weights = snapshot(det);
  result.best_weights = result.final_weights;
  if (steps == 0) return result;

  std::vector<std::vector<std::size_t>> orders(static_cast<std::size_t>(cfg.epochs));
  auto order_of = [&](std::int64_t epoch) -> const std::vector<std::size_t>& {
    auto& o = orders[static_cast<std::size_t>(epoch)];
    if (o.empty()) {
      o.resize(source.size);
      std::iota(o.begin(), o.end(), std::size_t{0});
      Rng r = Rng::stream(cfg.seed, "train.shuffle", static_cast<std::uint64_t>(epoch));
      for (std::size_t i = o.size(); i > 1; --i)
        std::swap(o[i - 1], o[static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    return o;
  };
  for (std::int64_t e = 0; e < cfg.epochs; ++e) order_of(e);

  PrefetchLoader<std::vector<SliceSample>> loader(
      static_cast<std::size_t>(steps),
      [&](std::size_t step) {
        const auto epoch = static_cast<std::int64_t>(step) / steps_per_epoch;
        const auto& order = orders[static_cast<std::size_t>(epoch)];
        const std::size_t begin = static_cast<std::size_t>(static_cast<std::int64_t>(step) % steps_per_epoch) * bs;
        std::vector<SliceSample> batch;
        for (std::size_t k = begin; k < std::min(begin + bs, order.size()); ++k) {
          Rng aug = Rng::stream(cfg.seed, "train.augment", step, k - begin);
          batch.push_back(source.get(order[k], aug));
        }
        return batch;
      },
      cfg.loader_workers);

  Sgd opt(det.graph().params().tensors(), cfg.momentum, cfg.weight_decay);
  std::map<std::pair<std::int64_t, std::int64_t>, AnchorSet> anchor_cache;
  double epoch_sum = 0;
  std::int64_t epoch_count = 0;
  std::vector<SliceSample> batch;
  for (std::int64_t step = 0; step < steps; ++step) {
    loader.next(batch);
    Tensor volume = stack_samples(batch);
    const auto key = std::make_pair(volume.dim(3), volume.dim(4));
    auto it = anchor_cache.find(key);
    if (it == anchor_cache.end()) it = anchor_cache.emplace(key, det.anchors(key.first, key.second)).first;
    std::vector<TargetAssignment> targets;
    for (const auto& s : batch)
      targets.push_back(assign_targets(it->second.boxes, s.gt_boxes, det.config().iou_pos, det.config().iou_neg));

    opt.zero_grad();
    auto out = det.forward(volume);
    Rng sampler = Rng::stream(cfg.seed, "train.sampler", static_cast<std::uint64_t>(step));
    auto loss = detection_loss(out.logits, out.deltas, targets, sampler, det.config().sample_size,
                               det.config().pos_fraction);
    const double total_loss = loss.total.item();
    if (!std::isfinite(total_loss)) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << ": loss_cls=" << loss.cls.item() << " loss_reg=" << loss.reg.item()
          << " lr=" << learning_rate(cfg, step, total);
      throw DivergenceError(msg.str());
    }
    loss.total.backward();
    if (cfg.grad_clip > 0) opt.clip_grad_norm(cfg.grad_clip);
    opt.step(learning_rate(cfg, step, total));
    result.curve.push_back({step, loss.cls.item(), loss.reg.item(), total_loss});

    epoch_sum += total_loss;
    ++epoch_count;
    if ((step + 1) % steps_per_epoch == 0 || step + 1 == steps) {
      const double mean = epoch_sum / static_cast<double>(epoch_count);
      if (result.best_epoch < 0 || mean < result.best_epoch_loss) {
        result.best_epoch = static_cast<int>(step / steps_per_epoch);
        result.best_epoch_loss = mean;
        result.best_weights = snapshot(det);
      }
      epoch_sum = 0;
      epoch_count = 0;
    }
  }
  opt.zero_grad();
  result.steps = steps;
  result.final_weights = snapshot(det);
  return result;
}

std::string loss_csv(const std::vector<LossRow>& rows) {
  std::string out = "step,loss_cls,loss_reg,loss_total\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.6f,%.6f,%.6f\n", static_cast<long long>(r.step), r.cls, r.reg, r.total);
    out += buf;
  }
  return out;
}

std::vector<LossRow> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open loss curve " + path.string());
  std::string line;
  if (!std::getline(f, line) || line.rfind("step,loss_cls,loss_reg,loss_total", 0) != 0)
    throw FormatError(path.string() + ": expected header step,loss_cls,loss_reg,loss_total");
  std::vector<LossRow> rows;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    LossRow r{};
    long long step = 0;
    if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf", &step, &r.cls, &r.reg, &r.total) != 4)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed loss row");
    r.step = step;
    rows.push_back(r);
  }
  return rows;
}

namespace {

std::vector<double> smoothed(const std::vector<LossRow>& rows, int window) {
  std::vector<double> out(rows.size());
  double acc = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    acc += rows[i].total;
    if (i >= static_cast<std::size_t>(window)) acc -= rows[i - static_cast<std::size_t>(window)].total;
    out[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window)));
  }
  return out;
}

}  // namespace

std::int64_t steps_to_reach(const std::vector<LossRow>& rows, double threshold, int window) {
  const auto s = smoothed(rows, std::max(1, window));
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i + 1 >= static_cast<std::size_t>(std::max(1, window)) && s[i] <= threshold) return rows[i].step + 1;
  return -1;
}

double final_loss(const std::vector<LossRow>& rows, int window) {
  if (rows.empty()) return 0.0;
  return smoothed(rows, std::max(1, window)).back();
}

namespace {

struct PreparedVolume {
  Volume normalized;
  const VolumeRecord* record;
  double slice_ratio;  // source slices per resampled slice

  std::vector<Box> boxes_at(std::int64_t k) const {
    const auto src = static_cast<int>(std::lround(static_cast<double>(k) * slice_ratio));
    auto it = record->boxes.find(src);
    return it == record->boxes.end() ? std::vector<Box>{} : it->second;
  }
};

std::vector<std::pair<std::size_t, std::int64_t>> image_list(const std::vector<PreparedVolume>& vols) {
  std::vector<std::pair<std::size_t, std::int64_t>> items;
  for (std::size_t v = 0; v < vols.size(); ++v) {
    const auto slices = vols[v].record->image_slices();
    for (std::int64_t k = 0; k < vols[v].normalized.slices; ++k) {
      const auto src = static_cast<int>(std::lround(static_cast<double>(k) * vols[v].slice_ratio));
      if (std::binary_search(slices.begin(), slices.end(), src)) items.emplace_back(v, k);
    }
  }
  return items;
}

std::shared_ptr<std::vector<PreparedVolume>> prepare(const std::vector<const VolumeRecord*>& volumes,
                                                     double target_mm) {
  auto out = std::make_shared<std::vector<PreparedVolume>>();
  for (const auto* rec : volumes)
    out->push_back({clip_hu(resample_z(rec->volume, target_mm)), rec,
                    rec->volume.slices > 1 ? target_mm / rec->volume.z_spacing_mm : 1.0});
  return out;
}

}  // namespace

SampleSource make_volume_source(const std::vector<const VolumeRecord*>& volumes, int slices,
                                const AugmentConfig& augment_cfg, double target_mm) {
  auto vols = prepare(volumes, target_mm);
  auto items = std::make_shared<std::vector<std::pair<std::size_t, std::int64_t>>>(image_list(*vols));
  SampleSource src;
  src.size = items->size();
  src.get = [vols, items, slices, augment_cfg](std::size_t i, Rng& rng) {
    const auto [v, k] = (*items)[i];
    const auto& pv = (*vols)[v];
    SliceSample s = extract_window(pv.normalized, k, slices);
    s.gt_boxes = pv.boxes_at(k);
    return pad_to_multiple(augment(s, augment_cfg, rng), 32);
  };
  return src;
}

EvalSet make_eval_set(const std::vector<const VolumeRecord*>& volumes, int slices, double target_mm) {
  auto vols = prepare(volumes, target_mm);
  EvalSet set;
  for (const auto& [v, k] : image_list(*vols)) {
    const auto& pv = (*vols)[v];
    SliceSample s = extract_window(pv.normalized, k, slices);
    s.gt_boxes = pv.boxes_at(k);
    const std::string key = image_key(pv.record->id, static_cast<int>(k));
    set.keys.push_back(key);
    set.gt[key] = s.gt_boxes;
    set.samples.push_back(pad_to_multiple(s, 32));
  }
  return set;
}

ImageDetections predict(const Detector& det, const EvalSet& set, int batch_size) {
  ImageDetections out;
  for (std::size_t b = 0; b < set.samples.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(set.samples.size(), b + static_cast<std::size_t>(batch_size));
    std::vector<SliceSample> batch(set.samples.begin() + static_cast<std::ptrdiff_t>(b),
                                   set.samples.begin() + static_cast<std::ptrdiff_t>(e));
    auto dets = det.detect(stack_samples(batch));
    for (std::size_t i = b; i < e; ++i) out[set.keys[i]] = std::move(dets[i - b]);
  }
  return out;
}

WeightStore simulate_pretraining(const DetectorConfig& detector, const PretrainConfig& cfg,
                                 std::vector<LossRow>* curve) {
  DetectorConfig dcfg = detector;
  dcfg.backbone.input_slices = 3;
  Detector det(dcfg, Rng::stream(cfg.train.seed, "init").next());
  auto images = std::make_shared<std::vector<RgbImage>>(generate_rgb_synthetic(cfg.images));
  SampleSource src;
  src.size = images->size();
  src.get = [images](std::size_t i, Rng& rng) {
    const auto& img = (*images)[i];
    const Tensor vol = rgb_to_volume(img.to_tensor());
    SliceSample s;
    s.depth = 3;
    s.height = img.height;
    s.width = img.width;
    s.center_index = 1;
    s.window.assign(vol.data().begin(), vol.data().end());
    s.gt_boxes = img.boxes;
    AugmentConfig flips;
    flips.scales.clear();
    return pad_to_multiple(augment(s, flips, rng), 32);
  };
  auto result = train_detector(det, src, cfg.train);
  if (curve) *curve = result.curve;
  return result.final_weights;
}

}  // namespace mp3d
