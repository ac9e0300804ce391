#include "mp3d/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mp3d/errors.hpp"

namespace mp3d {

using nlohmann::json;

void Volume::validate() const {
  if (slices < 1 || height < 1 || width < 1) throw ShapeError("volume extents must be positive");
  if (static_cast<std::int64_t>(data.size()) != slices * height * width)
    throw ShapeError("volume data size does not match its extents");
  if (!(z_spacing_mm > 0) || !(xy_spacing_mm > 0)) throw ConfigError("voxel spacing must be positive");
}

Volume clip_hu(const Volume& v) {
  if (v.units == Units::kNormalized) return v;
  Volume out = v;
  for (auto& x : out.data)
    x = static_cast<float>((std::clamp(static_cast<double>(x), kHuMin, kHuMax) - kHuMin) / (kHuMax - kHuMin));
  out.units = Units::kNormalized;
  return out;
}

Volume resample_z(const Volume& v, double target_mm) {
  v.validate();
  if (!(target_mm > 0)) throw ConfigError("target spacing must be positive");
  if (v.z_spacing_mm == target_mm) return v;
  if (v.slices == 1) {
    std::cerr << "warning: single-slice volume with spacing " << v.z_spacing_mm << " mm left unresampled\n";
    return v;
  }
  const double extent = static_cast<double>(v.slices - 1) * v.z_spacing_mm;
  const auto count = static_cast<std::int64_t>(std::floor(extent / target_mm + 1e-9)) + 1;
  Volume out(count, v.height, v.width);
  out.z_spacing_mm = target_mm;
  out.xy_spacing_mm = v.xy_spacing_mm;
  out.units = v.units;
  const std::int64_t plane = v.height * v.width;
  for (std::int64_t k = 0; k < count; ++k) {
    const double t = static_cast<double>(k) * target_mm / v.z_spacing_mm;
    auto i0 = std::min(static_cast<std::int64_t>(std::floor(t + 1e-9)), v.slices - 1);
    const double f = std::max(0.0, t - static_cast<double>(i0));
    const std::int64_t i1 = std::min(i0 + 1, v.slices - 1);
    const float* a = v.data.data() + i0 * plane;
    const float* b = v.data.data() + i1 * plane;
    float* o = out.data.data() + k * plane;
    for (std::int64_t p = 0; p < plane; ++p)
      o[p] = f < 1e-9 ? a[p] : static_cast<float>((1.0 - f) * a[p] + f * b[p]);
  }
  return out;
}

Tensor SliceSample::to_tensor() const { return Tensor::from({1, 1, depth, height, width}, window); }

SliceSample extract_window(const Volume& v, std::int64_t center, int depth) {
  if (depth < 1 || depth % 2 == 0) throw ConfigError("window depth must be odd, got " + std::to_string(depth));
  if (center < 0 || center >= v.slices)
    throw std::out_of_range("window center " + std::to_string(center) + " outside volume of " +
                            std::to_string(v.slices) + " slices");
  SliceSample s;
  s.depth = depth;
  s.height = v.height;
  s.width = v.width;
  s.center_index = center;
  const std::int64_t plane = v.height * v.width, half = (depth - 1) / 2;
  s.window.resize(static_cast<std::size_t>(depth * plane));
  for (std::int64_t d = 0; d < depth; ++d) {
    const std::int64_t src = std::clamp(center - half + d, std::int64_t{0}, v.slices - 1);
    std::copy_n(v.data.begin() + src * plane, plane, s.window.begin() + d * plane);
  }
  return s;
}

SliceSample hflip(const SliceSample& s) {
  SliceSample o = s;
  for (std::int64_t d = 0; d < s.depth; ++d)
    for (std::int64_t y = 0; y < s.height; ++y)
      for (std::int64_t x = 0; x < s.width; ++x)
        o.window[static_cast<std::size_t>((d * s.height + y) * s.width + x)] =
            s.window[static_cast<std::size_t>((d * s.height + y) * s.width + (s.width - 1 - x))];
  for (auto& b : o.gt_boxes) b = hflip_box(b, static_cast<double>(s.width));
  return o;
}

SliceSample vflip(const SliceSample& s) {
  SliceSample o = s;
  for (std::int64_t d = 0; d < s.depth; ++d)
    for (std::int64_t y = 0; y < s.height; ++y)
      std::copy_n(s.window.begin() + (d * s.height + (s.height - 1 - y)) * s.width, s.width,
                  o.window.begin() + (d * s.height + y) * s.width);
  for (auto& b : o.gt_boxes) b = vflip_box(b, static_cast<double>(s.height));
  return o;
}

SliceSample resize(const SliceSample& s, std::int64_t height, std::int64_t width) {
  if (height < 1 || width < 1) throw ShapeError("resize target must be positive");
  if (height == s.height && width == s.width) return s;
  SliceSample o = s;
  o.height = height;
  o.width = width;
  o.window.assign(static_cast<std::size_t>(s.depth * height * width), 0.f);
  const double ry = static_cast<double>(height) / static_cast<double>(s.height);
  const double rx = static_cast<double>(width) / static_cast<double>(s.width);
  struct Tap {
    std::int64_t i0, i1;
    double f;
  };
  auto taps = [](std::int64_t out, std::int64_t in, double ratio) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    for (std::int64_t i = 0; i < out; ++i) {
      double src = std::clamp((static_cast<double>(i) + 0.5) / ratio - 0.5, 0.0, static_cast<double>(in - 1));
      auto i0 = static_cast<std::int64_t>(std::floor(src));
      t[static_cast<std::size_t>(i)] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(height, s.height, ry), tx = taps(width, s.width, rx);
  for (std::int64_t d = 0; d < s.depth; ++d) {
    const float* src = s.window.data() + d * s.height * s.width;
    float* dst = o.window.data() + d * height * width;
    for (std::int64_t y = 0; y < height; ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      for (std::int64_t x = 0; x < width; ++x) {
        const auto& b = tx[static_cast<std::size_t>(x)];
        const double top = (1 - b.f) * src[a.i0 * s.width + b.i0] + b.f * src[a.i0 * s.width + b.i1];
        const double bot = (1 - b.f) * src[a.i1 * s.width + b.i0] + b.f * src[a.i1 * s.width + b.i1];
        dst[y * width + x] = static_cast<float>((1 - a.f) * top + a.f * bot);
      }
    }
  }
  for (auto& b : o.gt_boxes) b = {b.x1 * rx, b.y1 * ry, b.x2 * rx, b.y2 * ry};
  return o;
}

SliceSample pad_to_multiple(const SliceSample& s, int multiple) {
  const std::int64_t h = (s.height + multiple - 1) / multiple * multiple;
  const std::int64_t w = (s.width + multiple - 1) / multiple * multiple;
  if (h == s.height && w == s.width) return s;
  SliceSample o = s;
  o.height = h;
  o.width = w;
  o.window.assign(static_cast<std::size_t>(s.depth * h * w), 0.f);
  for (std::int64_t d = 0; d < s.depth; ++d)
    for (std::int64_t y = 0; y < s.height; ++y)
      std::copy_n(s.window.begin() + (d * s.height + y) * s.width, s.width, o.window.begin() + (d * h + y) * w);
  return o;
}

SliceSample augment(const SliceSample& s, const AugmentConfig& cfg, Rng& rng) {
  SliceSample o = s;
  if (rng.bernoulli(cfg.hflip_prob)) o = hflip(o);
  if (rng.bernoulli(cfg.vflip_prob)) o = vflip(o);
  if (!cfg.scales.empty()) {
    const int scale = cfg.scales[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(cfg.scales.size()) - 1))];
    const double f = static_cast<double>(scale) / cfg.base_size;
    o = resize(o, std::max<std::int64_t>(1, std::llround(static_cast<double>(o.height) * f)),
               std::max<std::int64_t>(1, std::llround(static_cast<double>(o.width) * f)));
  }
  return o;
}

// ---- synthetic generation ----

void SyntheticConfig::validate() const {
  auto range_ok = [](auto r) { return r[0] <= r[1]; };
  if (num_volumes < 1 || height < 8 || width < 8 || slices < 3) throw ConfigError("synthetic volume extents too small");
  if (!range_ok(lesions_per_volume) || !range_ok(lesion_semi_axis_xy) || !range_ok(lesion_semi_axis_z) ||
      !range_ok(confusers_per_volume) || !range_ok(confuser_semi_axis) || !range_ok(contrast_hu))
    throw ConfigError("synthetic ranges must satisfy min <= max");
  if (lesions_per_volume[0] < 0 || confusers_per_volume[0] < 0) throw ConfigError("object counts must be nonnegative");
  if (lesion_semi_axis_z[0] < 1.5) throw ConfigError("lesion depth semi-axis must be at least 1.5 slices");
  if (lesion_semi_axis_xy[0] <= 0 || confuser_semi_axis[0] <= 0) throw ConfigError("semi-axes must be positive");
  if (2 * lesion_semi_axis_xy[1] + 2 >= std::min(height, width) ||
      2 * confuser_semi_axis[1] + 2 >= std::min(height, width))
    throw ConfigError("in-plane semi-axes do not fit in a " + std::to_string(height) + "x" + std::to_string(width) +
                      " image");
  if (2 * lesion_semi_axis_z[1] + 1 >= slices)
    throw ConfigError("lesion depth extent does not fit in " + std::to_string(slices) + " slices");
  if (!(noise_sigma_hu >= 0) || !(z_spacing_mm > 0)) throw ConfigError("noise and spacing must be nonnegative/positive");
  if (!(train_fraction > 0 && train_fraction <= 1)) throw ConfigError("train_fraction must be in (0, 1]");
}

std::vector<int> VolumeRecord::image_slices() const {
  std::set<int> s;
  for (const auto& [z, b] : boxes)
    if (!b.empty()) s.insert(z);
  for (const auto& c : confusers) s.insert(c.slice);
  return {s.begin(), s.end()};
}

std::vector<std::size_t> SyntheticDataset::train_indices() const {
  const auto n = static_cast<std::size_t>(std::llround(config.train_fraction * static_cast<double>(volumes.size())));
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(n, volumes.size()); ++i) idx.push_back(i);
  return idx;
}

std::vector<std::size_t> SyntheticDataset::val_indices() const {
  const auto n = train_indices().size();
  std::vector<std::size_t> idx;
  for (std::size_t i = n; i < volumes.size(); ++i) idx.push_back(i);
  return idx;
}

namespace {

struct Extent {
  double z0, z1, y0, y1, x0, x1;
  bool overlaps(const Extent& o, double margin) const {
    return z0 - margin < o.z1 && o.z0 - margin < z1 && y0 - margin < o.y1 && o.y0 - margin < y1 &&
           x0 - margin < o.x1 && o.x0 - margin < x1;
  }
};

// Normalized squared radius of pixel (y, x) on slice z; pixel centres at +0.5.
// Slice z images the slab [z - 0.5, z + 0.5] and sees its widest section.
double lesion_r2(const LesionInfo& l, int z, std::int64_t y, std::int64_t x) {
  const double dz = std::max(0.0, std::abs(z - l.center[0]) - 0.5) / l.semi_axes[0];
  const double dy = (static_cast<double>(y) + 0.5 - l.center[1]) / l.semi_axes[1];
  const double dx = (static_cast<double>(x) + 0.5 - l.center[2]) / l.semi_axes[2];
  return dz * dz + dy * dy + dx * dx;
}

double confuser_r2(const ConfuserInfo& c, std::int64_t y, std::int64_t x) {
  const double dy = (static_cast<double>(y) + 0.5 - c.cy) / c.ry;
  const double dx = (static_cast<double>(x) + 0.5 - c.cx) / c.rx;
  return dy * dy + dx * dx;
}

template <typename Inside>
std::vector<std::pair<std::int64_t, std::int64_t>> footprint(std::int64_t h, std::int64_t w, Inside inside) {
  std::vector<std::pair<std::int64_t, std::int64_t>> px;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      if (inside(y, x)) px.emplace_back(y, x);
  return px;
}

double mean_over(const Volume& v, int z, const std::vector<std::pair<std::int64_t, std::int64_t>>& px) {
  double s = 0;
  for (auto [y, x] : px) s += v.at(z, y, x);
  return px.empty() ? 0.0 : s / static_cast<double>(px.size());
}

VolumeRecord make_volume(const SyntheticConfig& cfg, std::size_t index) {
  Rng rng = Rng::stream(cfg.seed, "synthetic.volume", index);
  VolumeRecord rec;
  char id[32];
  std::snprintf(id, sizeof(id), "vol_%04zu", index);
  rec.id = id;
  rec.volume = Volume(cfg.slices, cfg.height, cfg.width, static_cast<float>(cfg.background_hu));
  rec.volume.z_spacing_mm = cfg.z_spacing_mm;

  std::vector<Extent> taken;
  auto place = [&](auto sample_extent) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      auto [ok, e] = sample_extent();
      if (!ok) continue;
      bool clash = false;
      for (const auto& t : taken) clash = clash || e.overlaps(t, 2.0);
      if (!clash) {
        taken.push_back(e);
        return true;
      }
    }
    return false;
  };

  const auto n_les = rng.uniform_int(cfg.lesions_per_volume[0], cfg.lesions_per_volume[1]);
  for (std::int64_t i = 0; i < n_les; ++i) {
    LesionInfo l{};
    bool placed = place([&] {
      const double c = rng.uniform(cfg.lesion_semi_axis_z[0], cfg.lesion_semi_axis_z[1]);
      const double b = rng.uniform(cfg.lesion_semi_axis_xy[0], cfg.lesion_semi_axis_xy[1]);
      const double a = rng.uniform(cfg.lesion_semi_axis_xy[0], cfg.lesion_semi_axis_xy[1]);
      const double zc = static_cast<double>(rng.uniform_int(static_cast<std::int64_t>(std::ceil(c)),
                                                            cfg.slices - 1 - static_cast<std::int64_t>(std::ceil(c))));
      const double yc = rng.uniform(b + 1, cfg.height - b - 1);
      const double xc = rng.uniform(a + 1, cfg.width - a - 1);
      l = {{zc, yc, xc}, {c, b, a}, rng.uniform(cfg.contrast_hu[0], cfg.contrast_hu[1])};
      return std::pair{true, Extent{zc - c - 1, zc + c + 1, yc - b, yc + b, xc - a, xc + a}};
    });
    if (!placed) throw ConfigError("cannot place lesion " + std::to_string(i) + " in " + rec.id + " without overlap");
    rec.lesions.push_back(l);
  }
  const auto n_conf = rng.uniform_int(cfg.confusers_per_volume[0], cfg.confusers_per_volume[1]);
  for (std::int64_t i = 0; i < n_conf; ++i) {
    ConfuserInfo c{};
    bool placed = place([&] {
      const double ry = rng.uniform(cfg.confuser_semi_axis[0], cfg.confuser_semi_axis[1]);
      const double rx = rng.uniform(cfg.confuser_semi_axis[0], cfg.confuser_semi_axis[1]);
      const int z = static_cast<int>(rng.uniform_int(1, cfg.slices - 2));
      const double yc = rng.uniform(ry + 1, cfg.height - ry - 1);
      const double xc = rng.uniform(rx + 1, cfg.width - rx - 1);
      c = {z, yc, xc, ry, rx, rng.uniform(cfg.contrast_hu[0], cfg.contrast_hu[1])};
      return std::pair{true, Extent{z - 1.5, z + 1.5, yc - ry, yc + ry, xc - rx, xc + rx}};
    });
    if (!placed) throw ConfigError("cannot place confuser " + std::to_string(i) + " in " + rec.id + " without overlap");
    rec.confusers.push_back(c);
  }

  Volume& v = rec.volume;
  for (const auto& l : rec.lesions) {
    for (int z = 0; z < cfg.slices; ++z) {
      double x1 = 1e9, y1 = 1e9, x2 = -1e9, y2 = -1e9;
      for (std::int64_t y = 0; y < cfg.height; ++y)
        for (std::int64_t x = 0; x < cfg.width; ++x) {
          const double r2 = lesion_r2(l, z, y, x);
          if (r2 > 1) continue;
          v.at(z, y, x) += static_cast<float>(l.contrast_hu * (1 - r2));
          x1 = std::min(x1, static_cast<double>(x));
          y1 = std::min(y1, static_cast<double>(y));
          x2 = std::max(x2, static_cast<double>(x + 1));
          y2 = std::max(y2, static_cast<double>(y + 1));
        }
      if (x2 > x1 && x2 - x1 >= cfg.min_box_side && y2 - y1 >= cfg.min_box_side)
        rec.boxes[z].push_back({x1, y1, x2, y2});
    }
  }
  for (const auto& c : rec.confusers)
    for (std::int64_t y = 0; y < cfg.height; ++y)
      for (std::int64_t x = 0; x < cfg.width; ++x) {
        const double r2 = confuser_r2(c, y, x);
        if (r2 <= 1) v.at(c.slice, y, x) += static_cast<float>(c.contrast_hu * (1 - r2));
      }
  if (cfg.noise_sigma_hu > 0) {
    Rng noise = Rng::stream(cfg.seed, "synthetic.noise", index);
    for (auto& x : v.data) x += static_cast<float>(noise.normal(0.0, cfg.noise_sigma_hu));
  }
  return rec;
}

}  // namespace

SeparabilityStats measure_separability(const std::vector<VolumeRecord>& volumes, const SyntheticConfig& cfg) {
  std::vector<double> lesion_px, confuser_px;
  double les_center = 0, les_neighbor = 0, conf_center = 0, conf_neighbor = 0;
  const double bg = cfg.background_hu;
  for (const auto& rec : volumes) {
    const Volume& v = rec.volume;
    for (const auto& l : rec.lesions) {
      const int z = static_cast<int>(std::lround(l.center[0]));
      auto px = footprint(v.height, v.width, [&](auto y, auto x) { return lesion_r2(l, z, y, x) <= 1; });
      for (auto [y, x] : px) lesion_px.push_back(v.at(z, y, x));
      les_center += mean_over(v, z, px) - bg;
      les_neighbor += 0.5 * (mean_over(v, z - 1, px) + mean_over(v, z + 1, px)) - bg;
    }
    for (const auto& c : rec.confusers) {
      auto px = footprint(v.height, v.width, [&](auto y, auto x) { return confuser_r2(c, y, x) <= 1; });
      for (auto [y, x] : px) confuser_px.push_back(v.at(c.slice, y, x));
      conf_center += mean_over(v, c.slice, px) - bg;
      conf_neighbor += 0.5 * (mean_over(v, c.slice - 1, px) + mean_over(v, c.slice + 1, px)) - bg;
    }
  }
  SeparabilityStats st;
  if (lesion_px.empty() || confuser_px.empty()) {
    st.center_overlap = 1.0;
    st.lesion_neighbor_ratio = lesion_px.empty() ? 1.0 : les_neighbor / les_center;
    st.confuser_neighbor_ratio = confuser_px.empty() ? 0.0 : std::abs(conf_neighbor) / conf_center;
    return st;
  }
  const auto [lmin, lmax] = std::minmax_element(lesion_px.begin(), lesion_px.end());
  const auto [cmin, cmax] = std::minmax_element(confuser_px.begin(), confuser_px.end());
  const double lo = std::min(*lmin, *cmin), hi = std::max(*lmax, *cmax);
  constexpr int kBins = 32;
  auto hist = [&](const std::vector<double>& xs) {
    std::vector<double> h(kBins, 0.0);
    for (double x : xs) {
      auto b = static_cast<int>((x - lo) / (hi - lo + 1e-12) * kBins);
      h[static_cast<std::size_t>(std::clamp(b, 0, kBins - 1))] += 1.0 / static_cast<double>(xs.size());
    }
    return h;
  };
  const auto hl = hist(lesion_px), hc = hist(confuser_px);
  for (int b = 0; b < kBins; ++b) st.center_overlap += std::min(hl[static_cast<std::size_t>(b)], hc[static_cast<std::size_t>(b)]);
  st.lesion_neighbor_ratio = les_neighbor / les_center;
  st.confuser_neighbor_ratio = std::abs(conf_neighbor) / conf_center;
  return st;
}

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  SyntheticDataset ds;
  ds.config = cfg;
  for (int i = 0; i < cfg.num_volumes; ++i) ds.volumes.push_back(make_volume(cfg, static_cast<std::size_t>(i)));
  ds.separability = measure_separability(ds.volumes, cfg);
  if (!ds.separability.holds()) {
    std::ostringstream msg;
    msg << "synthetic separability premise violated: center overlap " << ds.separability.center_overlap
        << " (need >= 0.5), lesion neighbour ratio " << ds.separability.lesion_neighbor_ratio
        << " (need >= 0.25), confuser neighbour ratio " << ds.separability.confuser_neighbor_ratio
        << " (need <= 0.05)";
    throw ConfigError(msg.str());
  }
  return ds;
}

Tensor RgbImage::to_tensor() const { return Tensor::from({3, height, width}, pixels); }

std::vector<RgbImage> generate_rgb_synthetic(const RgbSyntheticConfig& cfg) {
  std::vector<RgbImage> out;
  for (int i = 0; i < cfg.num_images; ++i) {
    Rng rng = Rng::stream(cfg.seed, "rgb.image", static_cast<std::uint64_t>(i));
    RgbImage img;
    img.height = cfg.height;
    img.width = cfg.width;
    const std::int64_t plane = img.height * img.width;
    img.pixels.assign(static_cast<std::size_t>(3 * plane), static_cast<float>(cfg.background));
    std::vector<Box> taken;
    const auto n = rng.uniform_int(cfg.objects_per_image[0], cfg.objects_per_image[1]);
    for (std::int64_t k = 0; k < n; ++k) {
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double b = rng.uniform(cfg.semi_axis[0], cfg.semi_axis[1]);
        const double a = rng.uniform(cfg.semi_axis[0], cfg.semi_axis[1]);
        const double yc = rng.uniform(b + 1, cfg.height - b - 1), xc = rng.uniform(a + 1, cfg.width - a - 1);
        std::array<double, 3> colour;
        for (auto& c : colour) c = rng.uniform(cfg.contrast[0], cfg.contrast[1]);
        Box ext{xc - a - 2, yc - b - 2, xc + a + 2, yc + b + 2};
        if (std::any_of(taken.begin(), taken.end(), [&](const Box& t) { return iou(t, ext) > 0; })) continue;
        taken.push_back(ext);
        double x1 = 1e9, y1 = 1e9, x2 = -1e9, y2 = -1e9;
        for (std::int64_t y = 0; y < img.height; ++y)
          for (std::int64_t x = 0; x < img.width; ++x) {
            const double dy = (static_cast<double>(y) + 0.5 - yc) / b, dx = (static_cast<double>(x) + 0.5 - xc) / a;
            const double r2 = dy * dy + dx * dx;
            if (r2 > 1) continue;
            for (std::size_t ch = 0; ch < 3; ++ch)
              img.pixels[static_cast<std::size_t>(static_cast<std::int64_t>(ch) * plane + y * img.width + x)] +=
                  static_cast<float>(colour[ch] * (1 - r2));
            x1 = std::min(x1, static_cast<double>(x));
            y1 = std::min(y1, static_cast<double>(y));
            x2 = std::max(x2, static_cast<double>(x + 1));
            y2 = std::max(y2, static_cast<double>(y + 1));
          }
        if (x2 > x1) img.boxes.push_back({x1, y1, x2, y2});
        break;
      }
    }
    for (auto& p : img.pixels) p += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));
    out.push_back(std::move(img));
  }
  return out;
}

// ---- disk IO ----

std::string image_key(const std::string& volume_id, int slice) { return volume_id + ":" + std::to_string(slice); }

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + p.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + p.string());
}

std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

json box_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

}  // namespace

void write_gt_csv(const std::filesystem::path& path, const std::vector<VolumeRecord>& volumes) {
  std::string out = "image_id,slice,x1,y1,x2,y2\n";
  for (const auto& rec : volumes)
    for (const auto& [z, boxes] : rec.boxes)
      for (const auto& b : boxes)
        out += rec.id + "," + std::to_string(z) + "," + fmt4(b.x1) + "," + fmt4(b.y1) + "," + fmt4(b.x2) + "," +
               fmt4(b.y2) + "\n";
  write_file(path, out);
}

std::vector<GtRow> read_gt_csv(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  if (line.rfind("image_id,slice,x1,y1,x2,y2", 0) != 0) throw FormatError(path.string() + ": unexpected GT CSV header");
  std::vector<GtRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    try {
      rows.push_back({cells[0], std::stoi(cells[1]),
                      {std::stod(cells[2]), std::stod(cells[3]), std::stod(cells[4]), std::stod(cells[5])}});
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

std::string write_dataset(const std::filesystem::path& dir, const SyntheticDataset& ds, const std::string& config_json) {
  std::filesystem::create_directories(dir);
  json files = json::object();
  for (const auto& rec : ds.volumes) {
    std::string raw;
    raw.reserve(rec.volume.data.size() * 4);
    for (float f : rec.volume.data) {
      auto u = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) raw.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
    }
    json side;
    side["shape"] = {rec.volume.slices, rec.volume.height, rec.volume.width};
    side["z_spacing_mm"] = rec.volume.z_spacing_mm;
    side["xy_spacing_mm"] = rec.volume.xy_spacing_mm;
    side["units"] = "HU";
    json boxes = json::object();
    for (const auto& [z, bs] : rec.boxes) {
      json arr = json::array();
      for (const auto& b : bs) arr.push_back(box_json(b));
      boxes[std::to_string(z)] = arr;
    }
    side["boxes"] = boxes;
    json confusers = json::array();
    for (const auto& c : rec.confusers) confusers.push_back({{"slice", c.slice}, {"cy", c.cy}, {"cx", c.cx},
                                                             {"ry", c.ry}, {"rx", c.rx}, {"contrast_hu", c.contrast_hu}});
    side["confusers"] = confusers;
    json lesions = json::array();
    for (const auto& l : rec.lesions)
      lesions.push_back({{"center_zyx", l.center}, {"semi_axes_zyx", l.semi_axes}, {"contrast_hu", l.contrast_hu}});
    side["lesions"] = lesions;
    side["image_slices"] = rec.image_slices();
    const std::string side_text = side.dump(2) + "\n";
    write_file(dir / (rec.id + ".raw"), raw);
    write_file(dir / (rec.id + ".json"), side_text);
    files[rec.id + ".raw"] = hex64(fnv1a64(raw));
    files[rec.id + ".json"] = hex64(fnv1a64(side_text));
  }
  write_gt_csv(dir / "gt.csv", ds.volumes);
  files["gt.csv"] = hex64(fnv1a64(read_file(dir / "gt.csv")));

  json manifest;
  manifest["generator_seed"] = ds.config.seed;
  manifest["config_hash"] = hex64(fnv1a64(config_json));
  json ids = json::array(), train = json::array(), val = json::array();
  for (const auto& rec : ds.volumes) ids.push_back(rec.id);
  for (auto i : ds.train_indices()) train.push_back(ds.volumes[i].id);
  for (auto i : ds.val_indices()) val.push_back(ds.volumes[i].id);
  manifest["volumes"] = ids;
  manifest["splits"] = {{"train", train}, {"val", val}};
  manifest["files"] = files;
  manifest["separability"] = {{"center_overlap", ds.separability.center_overlap},
                              {"lesion_neighbor_ratio", ds.separability.lesion_neighbor_ratio},
                              {"confuser_neighbor_ratio", ds.separability.confuser_neighbor_ratio}};
  const std::string hash = hex64(fnv1a64(files.dump() + manifest["config_hash"].get<std::string>()));
  manifest["hash"] = hash;
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  write_file(dir / "config.json", config_json);
  return hash;
}

const VolumeRecord& DatasetOnDisk::volume(const std::string& id) const {
  for (const auto& v : volumes)
    if (v.id == id) return v;
  throw std::out_of_range("dataset has no volume " + id);
}

DatasetOnDisk read_dataset(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  DatasetOnDisk ds;
  ds.manifest_hash = manifest.at("hash").get<std::string>();
  ds.train = manifest.at("splits").at("train").get<std::vector<std::string>>();
  ds.val = manifest.at("splits").at("val").get<std::vector<std::string>>();
  for (const auto& id : manifest.at("volumes")) {
    VolumeRecord rec;
    rec.id = id.get<std::string>();
    const json side = json::parse(read_file(dir / (rec.id + ".json")));
    const auto shape = side.at("shape").get<std::vector<std::int64_t>>();
    if (shape.size() != 3) throw FormatError(rec.id + ".json: shape must have 3 extents");
    rec.volume = Volume(shape[0], shape[1], shape[2]);
    rec.volume.z_spacing_mm = side.at("z_spacing_mm").get<double>();
    rec.volume.xy_spacing_mm = side.value("xy_spacing_mm", 1.0);
    rec.volume.units = side.value("units", std::string("HU")) == "HU" ? Units::kHU : Units::kNormalized;
    const std::string raw = read_file(dir / (rec.id + ".raw"));
    if (raw.size() != rec.volume.data.size() * 4)
      throw FormatError(rec.id + ".raw: expected " + std::to_string(rec.volume.data.size() * 4) + " bytes, found " +
                        std::to_string(raw.size()));
    for (std::size_t i = 0; i < rec.volume.data.size(); ++i) {
      std::uint32_t u = 0;
      for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4 + k])) << (8 * k);
      rec.volume.data[i] = std::bit_cast<float>(u);
    }
    for (const auto& [z, arr] : side.at("boxes").items())
      for (const auto& b : arr) rec.boxes[std::stoi(z)].push_back({b[0], b[1], b[2], b[3]});
    for (const auto& c : side.value("confusers", json::array()))
      rec.confusers.push_back({c.at("slice"), c.at("cy"), c.at("cx"), c.at("ry"), c.at("rx"), c.at("contrast_hu")});
    for (const auto& l : side.value("lesions", json::array()))
      rec.lesions.push_back({l.at("center_zyx"), l.at("semi_axes_zyx"), l.at("contrast_hu")});
    ds.image_slices[rec.id] = side.at("image_slices").get<std::vector<int>>();
    ds.volumes.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace mp3d
