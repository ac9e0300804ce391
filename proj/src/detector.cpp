#include "mp3d/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mp3d/errors.hpp"

namespace mp3d {

void AnchorConfig::validate() const {
  if (scales.size() != strides.size() || scales.empty())
    throw ConfigError("anchor scales and strides need one entry per pyramid level");
  if (aspect_ratios.empty()) throw ConfigError("at least one aspect ratio is required");
  for (double s : scales)
    if (!(s > 0)) throw ConfigError("anchor scales must be positive");
  for (double r : aspect_ratios)
    if (!(r > 0)) throw ConfigError("aspect ratios must be positive");
  for (std::size_t i = 0; i < strides.size(); ++i)
    if (strides[i] != (4 << i)) throw ConfigError("anchor strides must be 4, 8, 16, ... (one per FPN level)");
}

AnchorSet generate_anchors(const AnchorConfig& cfg, std::int64_t height, std::int64_t width) {
  AnchorSet set;
  for (std::size_t l = 0; l < cfg.strides.size(); ++l) {
    const std::int64_t s = cfg.strides[l];
    const std::int64_t rows = (height + s - 1) / s, cols = (width + s - 1) / s;
    set.grid.push_back({rows, cols});
    for (std::int64_t y = 0; y < rows; ++y)
      for (std::int64_t x = 0; x < cols; ++x) {
        const double cx = (static_cast<double>(x) + 0.5) * static_cast<double>(s);
        const double cy = (static_cast<double>(y) + 0.5) * static_cast<double>(s);
        for (double r : cfg.aspect_ratios) {
          const double w = cfg.scales[l] * std::sqrt(1.0 / r), h = cfg.scales[l] * std::sqrt(r);
          set.boxes.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
      }
  }
  return set;
}

std::int64_t TargetAssignment::num_positive() const {
  return std::count(labels.begin(), labels.end(), AnchorLabel::kPositive);
}

TargetAssignment assign_targets(const std::vector<Box>& anchors, const std::vector<Box>& gt, double iou_pos,
                                double iou_neg) {
  const std::size_t m = anchors.size();
  TargetAssignment t;
  t.labels.assign(m, AnchorLabel::kNegative);
  t.deltas.assign(m, {0, 0, 0, 0});
  t.matched_gt.assign(m, -1);
  if (gt.empty()) return t;

  std::vector<double> best(m, -1.0);
  std::vector<double> gt_best(gt.size(), 0.0);
  std::vector<double> ious(m * gt.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchors[i], gt[g]);
      ious[i * gt.size() + g] = v;
      if (v > best[i]) {
        best[i] = v;
        t.matched_gt[i] = static_cast<int>(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  for (std::size_t i = 0; i < m; ++i) {
    if (best[i] >= iou_pos)
      t.labels[i] = AnchorLabel::kPositive;
    else if (best[i] >= iou_neg)
      t.labels[i] = AnchorLabel::kIgnore;
  }
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (gt_best[g] <= 0) continue;
    for (std::size_t i = 0; i < m; ++i)
      if (ious[i * gt.size() + g] == gt_best[g]) t.labels[i] = AnchorLabel::kPositive;
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (t.labels[i] == AnchorLabel::kPositive)
      t.deltas[i] = encode_box(anchors[i], gt[static_cast<std::size_t>(t.matched_gt[i])]);
    else
      t.matched_gt[i] = -1;
  }
  return t;
}

namespace {

// First k entries of a partial Fisher-Yates shuffle of `pool`.
void choose(std::vector<std::int64_t>& pool, std::size_t k, Rng& rng) {
  for (std::size_t i = 0; i < k; ++i) {
    auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                      static_cast<std::int64_t>(pool.size()) - 1));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
}

}  // namespace

std::vector<std::int64_t> sample_anchors(const std::vector<AnchorLabel>& labels, int batch_size, double pos_fraction,
                                         Rng& rng) {
  std::vector<std::int64_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == AnchorLabel::kPositive) pos.push_back(static_cast<std::int64_t>(i));
    if (labels[i] == AnchorLabel::kNegative) neg.push_back(static_cast<std::int64_t>(i));
  }
  const auto max_pos = static_cast<std::size_t>(std::floor(batch_size * pos_fraction));
  const std::size_t num_pos = std::min(pos.size(), max_pos);
  const std::size_t num_neg = std::min(neg.size(), static_cast<std::size_t>(batch_size) - num_pos);
  choose(pos, num_pos, rng);
  choose(neg, num_neg, rng);
  pos.insert(pos.end(), neg.begin(), neg.end());
  std::sort(pos.begin(), pos.end());
  return pos;
}

DetectionLoss detection_loss(const Tensor& logits, const Tensor& deltas, const std::vector<TargetAssignment>& targets,
                             Rng& rng, int batch_size, double pos_fraction) {
  if (logits.rank() != 3 || logits.dim(2) != 1 || deltas.rank() != 3 || deltas.dim(2) != 4 ||
      logits.dim(0) != deltas.dim(0) || logits.dim(1) != deltas.dim(1))
    throw ShapeError("detection_loss: expected logits [N,M,1] and deltas [N,M,4], got " + shape_str(logits.shape()) +
                     " and " + shape_str(deltas.shape()));
  const std::int64_t n = logits.dim(0), m = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != n)
    throw ShapeError("detection_loss: " + std::to_string(targets.size()) + " assignments for batch of " +
                     std::to_string(n));
  const auto total = static_cast<std::size_t>(n * m);
  std::vector<float> cls_t(total, 0.f), cls_w(total, 0.f), reg_t(total * 4, 0.f), reg_w(total * 4, 0.f);
  for (std::int64_t b = 0; b < n; ++b) {
    const auto& t = targets[static_cast<std::size_t>(b)];
    if (static_cast<std::int64_t>(t.labels.size()) != m)
      throw ShapeError("detection_loss: assignment covers " + std::to_string(t.labels.size()) + " anchors, model has " +
                       std::to_string(m));
    for (std::int64_t i : sample_anchors(t.labels, batch_size, pos_fraction, rng)) {
      const auto k = static_cast<std::size_t>(b * m + i);
      cls_w[k] = 1.f;
      if (t.labels[static_cast<std::size_t>(i)] != AnchorLabel::kPositive) continue;
      cls_t[k] = 1.f;
      for (std::size_t j = 0; j < 4; ++j) {
        reg_t[k * 4 + j] = static_cast<float>(t.deltas[static_cast<std::size_t>(i)][j]);
        reg_w[k * 4 + j] = 1.f;
      }
    }
  }
  DetectionLoss loss;
  loss.cls = bce_with_logits(logits, Tensor::from(logits.shape(), std::move(cls_t)),
                             Tensor::from(logits.shape(), std::move(cls_w)));
  loss.reg = smooth_l1(deltas, Tensor::from(deltas.shape(), std::move(reg_t)), 1.0,
                       Tensor::from(deltas.shape(), std::move(reg_w)));
  loss.total = add(loss.cls, loss.reg);
  return loss;
}

std::vector<Detection> decode_and_nms(const Tensor& logits, const Tensor& deltas, const std::vector<Box>& anchors,
                                      std::int64_t n, double image_height, double image_width,
                                      const DecodeOptions& opts) {
  const std::int64_t m = logits.dim(1);
  if (static_cast<std::int64_t>(anchors.size()) != m)
    throw ShapeError("decode_and_nms: " + std::to_string(anchors.size()) + " anchors for " + std::to_string(m) +
                     " predictions");
  const float* lg = logits.data().data() + n * m;
  const float* dl = deltas.data().data() + n * m * 4;
  std::vector<std::int64_t> cand;
  std::vector<double> score(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    score[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-static_cast<double>(lg[i])));
    if (score[static_cast<std::size_t>(i)] > opts.score_thresh) cand.push_back(i);
  }
  std::stable_sort(cand.begin(), cand.end(), [&](std::int64_t a, std::int64_t b) {
    return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
  });
  if (opts.pre_nms_topk > 0 && cand.size() > static_cast<std::size_t>(opts.pre_nms_topk))
    cand.resize(static_cast<std::size_t>(opts.pre_nms_topk));
  std::vector<Detection> dets;
  for (std::int64_t i : cand) {
    const float* d = dl + i * 4;
    Box b = decode_box(anchors[static_cast<std::size_t>(i)], {d[0], d[1], d[2], d[3]});
    b = clip_box(b, image_width, image_height);
    if (!b.valid()) continue;
    dets.push_back({b, score[static_cast<std::size_t>(i)]});
  }
  std::vector<Detection> out;
  for (int k : nms(dets, opts.nms_iou)) {
    if (opts.max_dets > 0 && static_cast<int>(out.size()) >= opts.max_dets) break;
    out.push_back(dets[static_cast<std::size_t>(k)]);
  }
  return out;
}

void DetectorConfig::validate() const {
  backbone.validate();
  anchors.validate();
  if (anchors.strides.size() != 5) throw ConfigError("the FPN produces five levels (P2..P6); give five anchor scales");
  if (fpn_channels < 1) throw ConfigError("fpn_channels must be positive");
  if (!(0 <= iou_neg && iou_neg <= iou_pos && iou_pos <= 1))
    throw ConfigError("IoU thresholds must satisfy 0 <= iou_neg <= iou_pos <= 1");
  if (sample_size < 1) throw ConfigError("sample_size must be positive");
  if (!(pos_fraction > 0 && pos_fraction <= 1)) throw ConfigError("pos_fraction must be in (0, 1]");
  if (!(prior_prob > 0 && prior_prob < 1)) throw ConfigError("prior_prob must be in (0, 1)");
}

namespace {

int add_conv2d(ModelGraph& g, const std::string& name, const std::string& prefix, int x, int cout, int k,
               Init weight_init = {}, Init bias_init = {Init::Kind::kConstant, 0.0, 0}) {
  LayerSpec c;
  c.name = name;
  c.param_prefix = prefix;
  c.kind = LayerKind::kConv;
  c.inputs = {x};
  c.in_channels = g.channels(x);
  c.out_channels = cout;
  c.kernel = {1, k, k};
  c.pad = {0, k / 2, k / 2};
  c.bias = true;
  c.weight_init = weight_init;
  c.bias_init = bias_init;
  return g.add(std::move(c));
}

int add_op(ModelGraph& g, const std::string& name, LayerKind kind, std::vector<int> inputs) {
  LayerSpec s;
  s.name = name;
  s.kind = kind;
  s.inputs = std::move(inputs);
  return g.add(std::move(s));
}

const char* kLevelNames[] = {"P2", "P3", "P4", "P5", "P6"};

}  // namespace

std::vector<int> add_fpn_neck(ModelGraph& g, const std::array<int, 4>& stage_layers, int out_channels) {
  std::array<int, 4> lateral{};
  for (int s = 0; s < 4; ++s) {
    const std::string name = "fpn.lateral" + std::to_string(s + 2);
    lateral[static_cast<std::size_t>(s)] = add_conv2d(g, name, "", stage_layers[static_cast<std::size_t>(s)],
                                                      out_channels, 1);
  }
  std::array<int, 4> merged{};
  merged[3] = lateral[3];
  for (int s = 2; s >= 0; --s) {
    const std::string k = std::to_string(s + 2);
    int up = add_op(g, "fpn.upsample" + k, LayerKind::kUpsample2x, {merged[static_cast<std::size_t>(s + 1)]});
    merged[static_cast<std::size_t>(s)] =
        add_op(g, "fpn.merge" + k, LayerKind::kAdd, {lateral[static_cast<std::size_t>(s)], up});
  }
  std::vector<int> levels;
  for (int s = 0; s < 4; ++s)
    levels.push_back(add_conv2d(g, "fpn.output" + std::to_string(s + 2), "", merged[static_cast<std::size_t>(s)],
                                out_channels, 3));
  LayerSpec p6;
  p6.name = "fpn.p6";
  p6.kind = LayerKind::kMaxPool;
  p6.inputs = {levels[3]};
  p6.kernel = {1, 1, 1};
  p6.stride = {1, 2, 2};
  levels.push_back(g.add(std::move(p6)));
  return levels;
}

void add_head(ModelGraph& g, const std::vector<int>& levels, int channels, int anchors_per_location,
              double prior_prob) {
  const Init small{Init::Kind::kNormal, 0.01, 0};
  const Init prior{Init::Kind::kConstant, -std::log((1.0 - prior_prob) / prior_prob), 0};
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const std::string lv = kLevelNames[l];
    int x = add_conv2d(g, "head.conv." + lv, "head.conv", levels[l], channels, 3, small);
    x = add_op(g, "head.relu." + lv, LayerKind::kRelu, {x});
    int cls = add_conv2d(g, "head.cls." + lv, "head.cls", x, anchors_per_location, 1, small, prior);
    int reg = add_conv2d(g, "head.reg." + lv, "head.reg", x, 4 * anchors_per_location, 1, small);
    g.set_output("cls_" + lv, cls);
    g.set_output("reg_" + lv, reg);
  }
}

Detector::Detector(DetectorConfig cfg, std::uint64_t init_seed, bool materialize)
    : cfg_(std::move(cfg)), graph_(materialize, init_seed) {
  cfg_.validate();
  int in = graph_.add_input("volume", cfg_.backbone.input_channels);
  auto bb = add_backbone(graph_, in, cfg_.backbone);
  auto levels = add_fpn_neck(graph_, bb.converted, cfg_.fpn_channels);
  add_head(graph_, levels, cfg_.fpn_channels, cfg_.anchors.per_location(), cfg_.prior_prob);
}

Detector::Output Detector::forward(const Tensor& volume) const {
  if (volume.rank() != 5) throw ShapeError("detector input must be [N, C, D, H, W], got " + shape_str(volume.shape()));
  if (volume.dim(2) != cfg_.backbone.input_slices)
    throw ShapeError("detector built for " + std::to_string(cfg_.backbone.input_slices) + " slices, input has " +
                     std::to_string(volume.dim(2)));
  if (volume.dim(3) % 32 != 0 || volume.dim(4) % 32 != 0)
    throw ShapeError("stride mismatch: input height and width must be multiples of 32, got " +
                     shape_str(volume.shape()));
  std::vector<std::string> wanted;
  for (const char* lv : kLevelNames) wanted.push_back(std::string("cls_") + lv);
  for (const char* lv : kLevelNames) wanted.push_back(std::string("reg_") + lv);
  auto outs = graph_.forward({{"volume", volume}}, wanted);
  std::vector<Tensor> cls, reg;
  for (const char* lv : kLevelNames) {
    cls.push_back(outs.at(std::string("cls_") + lv));
    reg.push_back(outs.at(std::string("reg_") + lv));
  }
  return {concat_anchor_outputs(cls, 1), concat_anchor_outputs(reg, 4)};
}

AnchorSet Detector::anchors(std::int64_t height, std::int64_t width) const {
  return generate_anchors(cfg_.anchors, height, width);
}

std::vector<std::vector<Detection>> Detector::detect(const Tensor& volume) const {
  NoGradGuard guard;
  auto out = forward(volume);
  const auto h = volume.dim(3), w = volume.dim(4);
  auto set = anchors(h, w);
  std::vector<std::vector<Detection>> result;
  for (std::int64_t n = 0; n < volume.dim(0); ++n)
    result.push_back(decode_and_nms(out.logits, out.deltas, set.boxes, n, static_cast<double>(h),
                                    static_cast<double>(w), cfg_.decode));
  return result;
}

}  // namespace mp3d
