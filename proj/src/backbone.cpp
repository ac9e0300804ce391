#include "mp3d/backbone.hpp"

#include "mp3d/errors.hpp"

namespace mp3d {

const char* to_string(BackboneVariant v) { return v == BackboneVariant::kMP3D63 ? "MP3D63" : "MR3D50"; }
const char* to_string(PoolingPolicy p) { return p == PoolingPolicy::kAnisotropic ? "anisotropic" : "isotropic"; }
const char* to_string(Conversion c) { return c == Conversion::kGTM ? "GTM" : "CTM"; }

BackboneVariant parse_variant(const std::string& s) {
  if (s == "MP3D63") return BackboneVariant::kMP3D63;
  if (s == "MR3D50") return BackboneVariant::kMR3D50;
  throw ConfigError("unknown backbone variant '" + s + "' (expected MP3D63 or MR3D50)");
}

PoolingPolicy parse_pooling(const std::string& s) {
  if (s == "anisotropic") return PoolingPolicy::kAnisotropic;
  if (s == "isotropic") return PoolingPolicy::kIsotropic;
  throw ConfigError("unknown pooling policy '" + s + "' (expected anisotropic or isotropic)");
}

Conversion parse_conversion(const std::string& s) {
  if (s == "GTM") return Conversion::kGTM;
  if (s == "CTM") return Conversion::kCTM;
  throw ConfigError("unknown conversion '" + s + "' (expected GTM or CTM)");
}

void BackboneConfig::validate() const {
  if (input_slices < 1 || input_slices % 2 == 0)
    throw ConfigError("input_slices must be odd and positive, got " + std::to_string(input_slices));
  if (stem_channels < 1 || input_channels < 1 || norm_groups < 1) throw ConfigError("channel counts must be positive");
  for (int i = 0; i < 4; ++i) {
    if (stage_blocks[i] < 1) throw ConfigError("every stage needs at least one block");
    if (stage_channels[i] < 4 || stage_channels[i] % 4 != 0)
      throw ConfigError("stage channels must be positive multiples of 4");
  }
  if (conversion == Conversion::kGTM && input_slices > gtm_max_slices)
    throw ConfigError("input_slices " + std::to_string(input_slices) + " exceeds gtm_max_slices " +
                      std::to_string(gtm_max_slices));
  if (conversion == Conversion::kCTM)
    for (auto d : stage_depths(*this))
      if (d % 2 == 0)
        throw ConfigError("CTM needs an odd depth at every stage; " + std::string(to_string(pooling)) +
                          " pooling with input_slices " + std::to_string(input_slices) + " yields depth " +
                          std::to_string(d));
}

namespace {

struct Downsample {
  Triple window, stride, pad;
};

Downsample stem_pool(PoolingPolicy p) {
  if (p == PoolingPolicy::kAnisotropic) return {{1, 3, 3}, {1, 2, 2}, {0, 1, 1}};
  return {{3, 3, 3}, {2, 2, 2}, {1, 1, 1}};
}

std::int64_t after_depth_stride(std::int64_t d, int stride) { return window_output_extent(d, 3, stride, 1); }

LayerSpec conv_spec(const std::string& name, int x, int cin, int cout, Triple k, Triple s, Triple p) {
  LayerSpec c;
  c.name = name;
  c.kind = LayerKind::kConv;
  c.inputs = {x};
  c.in_channels = cin;
  c.out_channels = cout;
  c.kernel = k;
  c.stride = s;
  c.pad = p;
  return c;
}

int add_norm(ModelGraph& g, const std::string& name, int x, int preferred_groups, double gamma = 1.0) {
  LayerSpec n;
  n.name = name;
  n.kind = LayerKind::kGroupNorm;
  n.inputs = {x};
  n.norm_groups = norm_groups_for(g.channels(x), preferred_groups);
  n.gamma_init = gamma;
  return g.add(std::move(n));
}

int add_simple(ModelGraph& g, const std::string& name, LayerKind kind, std::vector<int> inputs) {
  LayerSpec s;
  s.name = name;
  s.kind = kind;
  s.inputs = std::move(inputs);
  return g.add(std::move(s));
}

}  // namespace

std::array<std::int64_t, 4> stage_depths(const BackboneConfig& cfg) {
  std::array<std::int64_t, 4> depths{};
  std::int64_t d = cfg.input_slices;
  if (cfg.pooling == PoolingPolicy::kIsotropic) {
    auto p = stem_pool(cfg.pooling);
    d = window_output_extent(d, p.window[0], p.stride[0], p.pad[0]);
  }
  for (int s = 0; s < 4; ++s) {
    if (s > 0 && cfg.pooling == PoolingPolicy::kIsotropic) d = after_depth_stride(d, 2);
    depths[static_cast<std::size_t>(s)] = d;
  }
  return depths;
}

int add_residual_block(ModelGraph& g, int x, const BlockSpec& b, const std::string& prefix, int norm_groups,
                       bool zero_init_residual) {
  const int cm = b.bottleneck_channels;
  const int rs = b.stride_in_reduce ? b.spatial_stride : 1, rd = b.stride_in_reduce ? b.depth_stride : 1;
  const int s = b.spatial_stride / rs, sd = b.depth_stride / rd;
  int y = g.add(conv_spec(prefix + ".conv_reduce", x, b.in_channels, cm, {1, 1, 1}, {rd, rs, rs}, {0, 0, 0}));
  y = add_norm(g, prefix + ".norm_reduce", y, norm_groups);
  y = add_simple(g, prefix + ".relu_reduce", LayerKind::kRelu, {y});
  if (b.kind == BlockKind::kPseudo3d) {
    y = g.add(conv_spec(prefix + ".conv_spatial", y, cm, cm, {1, 3, 3}, {1, s, s}, {0, 1, 1}));
    y = add_norm(g, prefix + ".norm_spatial", y, norm_groups);
    y = add_simple(g, prefix + ".relu_spatial", LayerKind::kRelu, {y});
    y = g.add(conv_spec(prefix + ".conv_depth", y, cm, cm, {3, 1, 1}, {sd, 1, 1}, {1, 0, 0}));
    y = add_norm(g, prefix + ".norm_depth", y, norm_groups);
    y = add_simple(g, prefix + ".relu_depth", LayerKind::kRelu, {y});
  } else {
    y = g.add(conv_spec(prefix + ".conv_full", y, cm, cm, {3, 3, 3}, {sd, s, s}, {1, 1, 1}));
    y = add_norm(g, prefix + ".norm_full", y, norm_groups);
    y = add_simple(g, prefix + ".relu_full", LayerKind::kRelu, {y});
  }
  y = g.add(conv_spec(prefix + ".conv_expand", y, cm, b.out_channels, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}));
  y = add_norm(g, prefix + ".norm_expand", y, norm_groups, zero_init_residual ? 0.0 : 1.0);
  int shortcut = x;
  if (!b.identity_shortcut()) {
    shortcut = g.add(
        conv_spec(prefix + ".shortcut", x, b.in_channels, b.out_channels, {1, 1, 1},
                  {b.depth_stride, b.spatial_stride, b.spatial_stride}, {0, 0, 0}));
    shortcut = add_norm(g, prefix + ".norm_shortcut", shortcut, norm_groups);
  }
  y = add_simple(g, prefix + ".add", LayerKind::kAdd, {y, shortcut});
  return add_simple(g, prefix + ".relu_out", LayerKind::kRelu, {y});
}

BackboneOutputs add_backbone(ModelGraph& g, int input, const BackboneConfig& cfg) {
  cfg.validate();
  const bool iso = cfg.pooling == PoolingPolicy::kIsotropic;
  const BlockKind kind = cfg.variant == BackboneVariant::kMP3D63 ? BlockKind::kPseudo3d : BlockKind::kFull3d;

  int x = g.add(conv_spec("backbone.stem.conv", input, cfg.input_channels, cfg.stem_channels, {1, 7, 7}, {1, 2, 2},
                          {0, 3, 3}));
  x = add_norm(g, "backbone.stem.norm", x, cfg.norm_groups);
  x = add_simple(g, "backbone.stem.relu", LayerKind::kRelu, {x});
  {
    auto p = stem_pool(cfg.pooling);
    LayerSpec pool;
    pool.name = "backbone.stem.pool";
    pool.kind = LayerKind::kMaxPool;
    pool.inputs = {x};
    pool.kernel = p.window;
    pool.stride = p.stride;
    pool.pad = p.pad;
    x = g.add(std::move(pool));
  }

  BackboneOutputs out;
  const auto depths = stage_depths(cfg);
  int channels = cfg.stem_channels;
  for (int s = 0; s < 4; ++s) {
    const std::string stage = "backbone.stage" + std::to_string(s + 2);
    for (int b = 0; b < cfg.stage_blocks[static_cast<std::size_t>(s)]; ++b) {
      BlockSpec spec;
      spec.in_channels = channels;
      spec.out_channels = cfg.stage_channels[static_cast<std::size_t>(s)];
      spec.bottleneck_channels = spec.out_channels / 4;
      spec.kind = kind;
      spec.spatial_stride = (b == 0 && s > 0) ? 2 : 1;
      spec.depth_stride = (iso && b == 0 && s > 0) ? 2 : 1;
      spec.stride_in_reduce = cfg.stride_in_reduce;
      x = add_residual_block(g, x, spec, stage + ".block" + std::to_string(b), cfg.norm_groups, cfg.zero_init_residual);
      channels = spec.out_channels;
    }
    out.stage3d[static_cast<std::size_t>(s)] = x;

    LayerSpec conv;
    conv.inputs = {x};
    if (cfg.conversion == Conversion::kGTM) {
      conv.name = "backbone.gtm" + std::to_string(s + 2);
      conv.kind = LayerKind::kGroupTransform;
      conv.max_slices = cfg.gtm_max_slices;
      conv.weight_init = {Init::Kind::kDepthMean, 0.0, static_cast<int>(depths[static_cast<std::size_t>(s)])};
    } else {
      conv.name = "backbone.ctm" + std::to_string(s + 2);
      conv.kind = LayerKind::kCenterCrop;
    }
    out.converted[static_cast<std::size_t>(s)] = g.add(std::move(conv));
  }
  return out;
}

ModelGraph build_backbone(const BackboneConfig& cfg, bool materialize, std::uint64_t init_seed) {
  ModelGraph g(materialize, init_seed);
  int in = g.add_input("volume", cfg.input_channels);
  auto out = add_backbone(g, in, cfg);
  for (int s = 0; s < 4; ++s) {
    g.set_output("C" + std::to_string(s + 2), out.converted[static_cast<std::size_t>(s)]);
    g.set_output("C" + std::to_string(s + 2) + "_3d", out.stage3d[static_cast<std::size_t>(s)]);
  }
  return g;
}

}  // namespace mp3d
