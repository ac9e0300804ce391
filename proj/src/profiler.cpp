#include "mp3d/profiler.hpp"

#include <cstdio>
#include <set>

namespace mp3d {

namespace {

std::int64_t layer_params(const ModelGraph& model, const LayerSpec& s, std::set<std::string>& seen) {
  if (s.kind == LayerKind::kLinear)
    return static_cast<std::int64_t>(s.in_channels) * s.out_channels + (s.bias ? s.out_channels : 0);
  if (!seen.insert(s.prefix()).second) return 0;
  std::int64_t n = 0;
  for (const char* suffix : {".weight", ".bias"}) {
    const std::string name = s.prefix() + suffix;
    if (model.params().contains(name)) n += shape_numel(model.params().shape(name));
  }
  return n;
}

}  // namespace

CostReport count_params(const ModelGraph& model) {
  CostReport r;
  std::set<std::string> seen;
  for (const auto& s : model.layers()) {
    if (s.kind == LayerKind::kInput) continue;
    CostRow row{s.name, layer_kind_name(s.kind), layer_params(model, s, seen), 0};
    r.total_params += row.params;
    r.rows.push_back(std::move(row));
  }
  return r;
}

CostReport count_flops(const ModelGraph& model, const Shape& input, const FlopConvention& conv) {
  std::string input_name;
  for (const auto& s : model.layers())
    if (s.kind == LayerKind::kInput) input_name = s.name;
  const auto shapes = model.infer_shapes({{input_name, input}});
  CostReport r;
  r.input = input;
  r.convention = conv.tag();
  std::set<std::string> seen;
  const std::int64_t mac = conv.mac_flops;
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    const auto& s = model.layers()[i];
    if (s.kind == LayerKind::kInput) continue;
    const Shape& out = shapes[i];
    const std::int64_t elems = shape_numel(out);
    std::int64_t f = 0;
    switch (s.kind) {
      case LayerKind::kConv: {
        const std::int64_t taps = static_cast<std::int64_t>(s.kernel[0]) * s.kernel[1] * s.kernel[2];
        f = mac * taps * (s.in_channels / s.groups) * elems;
        break;
      }
      case LayerKind::kGroupTransform: {
        const Shape& in = shapes[static_cast<std::size_t>(s.inputs[0])];
        f = mac * in[2] * elems;
        break;
      }
      case LayerKind::kLinear:
        f = mac * s.in_channels * s.out_channels * s.rows;
        break;
      case LayerKind::kGroupNorm:
        f = 2 * elems;
        break;
      case LayerKind::kRelu:
      case LayerKind::kAdd:
        f = elems;
        break;
      case LayerKind::kMaxPool:
      case LayerKind::kAvgPool: {
        const std::int64_t window = static_cast<std::int64_t>(s.kernel[0]) * s.kernel[1] * s.kernel[2];
        f = window * elems;
        break;
      }
      default:
        break;
    }
    CostRow row{s.name, layer_kind_name(s.kind), layer_params(model, s, seen), f};
    r.total_params += row.params;
    r.total_flops += row.flops;
    r.rows.push_back(std::move(row));
  }
  return r;
}

ModelGraph build_profile_graph(const DetectorConfig& cfg, const ProfileConfig& prof) {
  Detector det(cfg, 0, false);
  ModelGraph g = det.graph();
  if (prof.include_box_head) {
    const auto add_fc = [&](const std::string& name, int in, int out) {
      LayerSpec fc;
      fc.name = name;
      fc.kind = LayerKind::kLinear;
      fc.in_channels = in;
      fc.out_channels = out;
      fc.bias = true;
      fc.rows = prof.box_head_rois;
      g.add(std::move(fc));
    };
    add_fc("box_head.fc1", cfg.fpn_channels * 7 * 7, prof.box_head_fc);
    add_fc("box_head.fc2", prof.box_head_fc, prof.box_head_fc);
    add_fc("box_head.cls", prof.box_head_fc, 2);
    add_fc("box_head.reg", prof.box_head_fc, 8);
  }
  return g;
}

std::string report_table(const std::vector<ProfileVariant>& variants, const std::vector<int>& slices,
                         const ProfileConfig& prof) {
  std::string out = "variant,slices,params,flops,gflops\n";
  for (const auto& v : variants)
    for (int d : slices) {
      DetectorConfig cfg = v.detector;
      cfg.backbone.input_slices = d;
      const ModelGraph g = build_profile_graph(cfg, prof);
      const auto r = count_flops(g, {1, cfg.backbone.input_channels, d, prof.resolution, prof.resolution},
                                 prof.convention);
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%s,%d,%lld,%lld,%.2f\n", v.name.c_str(), d,
                    static_cast<long long>(r.total_params), static_cast<long long>(r.total_flops),
                    static_cast<double>(r.total_flops) / 1e9);
      out += buf;
    }
  return out;
}

DetectorConfig paper_detector_config(BackboneVariant variant, int slices) {
  DetectorConfig cfg;
  cfg.backbone.variant = variant;
  cfg.backbone.input_slices = slices;
  return cfg;
}

}  // namespace mp3d
