#pragma once

#include <array>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "mp3d/box.hpp"
#include "mp3d/rng.hpp"
#include "mp3d/tensor.hpp"

namespace mp3d {

enum class Units { kHU, kNormalized };

/// CT-like scalar field stored [S, H, W].
struct Volume {
  std::int64_t slices = 0, height = 0, width = 0;
  std::vector<float> data;
  double z_spacing_mm = 2.5;
  double xy_spacing_mm = 1.0;
  Units units = Units::kHU;

  Volume() = default;
  Volume(std::int64_t s, std::int64_t h, std::int64_t w, float fill = 0.f)
      : slices(s), height(h), width(w), data(static_cast<std::size_t>(s * h * w), fill) {}

  float& at(std::int64_t s, std::int64_t y, std::int64_t x) {
    return data[static_cast<std::size_t>((s * height + y) * width + x)];
  }
  float at(std::int64_t s, std::int64_t y, std::int64_t x) const {
    return data[static_cast<std::size_t>((s * height + y) * width + x)];
  }
  void validate() const;
};

inline constexpr double kHuMin = -1024.0;
inline constexpr double kHuMax = 1050.0;

/// Clamps HU to [-1024, 1050] and maps linearly to [0, 1]. Already-normalized
/// volumes are returned unchanged.
Volume clip_hu(const Volume& v);

/// Linear interpolation along z onto a target_mm grid starting at slice 0.
/// Single-slice volumes pass through (with a warning when spacing differs).
Volume resample_z(const Volume& v, double target_mm = 2.5);

struct SliceSample {
  std::int64_t depth = 0, height = 0, width = 0;
  std::vector<float> window;  // [D, H, W]
  std::int64_t center_index = 0;
  std::vector<Box> gt_boxes;

  /// [1, 1, D, H, W] tensor.
  Tensor to_tensor() const;
};

/// Slices center-(D-1)/2 .. center+(D-1)/2, edge-replicated past the ends.
SliceSample extract_window(const Volume& v, std::int64_t center, int depth);

struct AugmentConfig {
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  std::vector<int> scales{448, 512, 576};
  int base_size = 512;  // scale at which the stored image is taken to be
};

/// Random flips and rescale, applied identically to all slices and the boxes.
SliceSample augment(const SliceSample& s, const AugmentConfig& cfg, Rng& rng);

SliceSample hflip(const SliceSample& s);
SliceSample vflip(const SliceSample& s);
/// Bilinear resize (half-pixel centres); boxes scale by the exact extent ratio.
SliceSample resize(const SliceSample& s, std::int64_t height, std::int64_t width);
/// Zero-pads bottom/right so height and width are multiples of `multiple`.
SliceSample pad_to_multiple(const SliceSample& s, int multiple);

struct SyntheticConfig {
  int num_volumes = 200;
  int height = 64, width = 64, slices = 32;
  double z_spacing_mm = 2.5;
  std::array<int, 2> lesions_per_volume{1, 3};
  std::array<double, 2> lesion_semi_axis_xy{4.0, 8.0};  // pixels
  std::array<double, 2> lesion_semi_axis_z{1.5, 3.0};   // slices
  std::array<int, 2> confusers_per_volume{1, 3};
  std::array<double, 2> confuser_semi_axis{4.0, 8.0};  // pixels, in-plane
  std::array<double, 2> contrast_hu{150.0, 300.0};
  double background_hu = 40.0;
  double noise_sigma_hu = 20.0;
  /// GT boxes with a side shorter than this are not emitted.
  double min_box_side = 3.0;
  double train_fraction = 0.8;
  std::uint64_t seed = 1;

  void validate() const;
};

struct LesionInfo {
  std::array<double, 3> center;  // (z, y, x)
  std::array<double, 3> semi_axes;
  double contrast_hu;
};

struct ConfuserInfo {
  int slice;
  double cy, cx, ry, rx, contrast_hu;
};

struct VolumeRecord {
  std::string id;
  Volume volume;  // HU
  std::map<int, std::vector<Box>> boxes;  // slice -> lesion boxes
  std::vector<LesionInfo> lesions;
  std::vector<ConfuserInfo> confusers;

  /// Slices used as detection images: every slice with a GT box plus every
  /// confuser slice, ascending.
  std::vector<int> image_slices() const;
};

struct SeparabilityStats {
  double center_overlap = 0;        // overlap coefficient of center-slice intensity histograms
  double lesion_neighbor_ratio = 0;    // mean +-1 slice excess / center excess
  double confuser_neighbor_ratio = 0;
  bool holds() const { return center_overlap >= 0.5 && lesion_neighbor_ratio >= 0.25 && confuser_neighbor_ratio <= 0.05; }
};

struct SyntheticDataset {
  SyntheticConfig config;
  std::vector<VolumeRecord> volumes;
  SeparabilityStats separability;

  std::vector<std::size_t> train_indices() const;
  std::vector<std::size_t> val_indices() const;
};

/// Deterministic lesion/confuser volumes. Throws ConfigError when objects cannot
/// be placed or the separability premise fails.
SyntheticDataset generate_synthetic(const SyntheticConfig& cfg);

/// Measures the premise that lesions and confusers match in-slice but differ
/// across neighbouring slices.
SeparabilityStats measure_separability(const std::vector<VolumeRecord>& volumes, const SyntheticConfig& cfg);

/// 2D detection images with three colour channels, for simulated pre-training.
struct RgbImage {
  std::int64_t height = 0, width = 0;
  std::vector<float> pixels;  // [3, H, W], normalized intensities
  std::vector<Box> boxes;
  Tensor to_tensor() const;   // [3, H, W]
};

struct RgbSyntheticConfig {
  int num_images = 400;
  int height = 64, width = 64;
  std::array<int, 2> objects_per_image{1, 3};
  std::array<double, 2> semi_axis{4.0, 8.0};
  std::array<double, 2> contrast{0.07, 0.15};
  double background = 0.51;
  double noise_sigma = 0.01;
  std::uint64_t seed = 7;
};

std::vector<RgbImage> generate_rgb_synthetic(const RgbSyntheticConfig& cfg);

// ---- on-disk dataset ----

/// Writes vol_XXXX.raw (little-endian f32 HU) + vol_XXXX.json sidecars, gt.csv
/// and manifest.json. Returns the manifest hash.
std::string write_dataset(const std::filesystem::path& dir, const SyntheticDataset& ds, const std::string& config_json);

struct DatasetOnDisk {
  std::vector<VolumeRecord> volumes;
  std::vector<std::string> train, val;
  std::map<std::string, std::vector<int>> image_slices;
  std::string manifest_hash;

  const VolumeRecord& volume(const std::string& id) const;
};

DatasetOnDisk read_dataset(const std::filesystem::path& dir);

struct GtRow {
  std::string image_id;
  int slice;
  Box box;
};

void write_gt_csv(const std::filesystem::path& path, const std::vector<VolumeRecord>& volumes);
std::vector<GtRow> read_gt_csv(const std::filesystem::path& path);

/// Image key used by predictions and evaluation: "<volume id>:<slice>".
std::string image_key(const std::string& volume_id, int slice);

/// Bounded producer/consumer loader. Samples are computed by `produce(i)` on
/// worker threads and handed out strictly in index order, so the sequence does
/// not depend on the worker count. A producer error is rethrown when its index
/// comes up.
template <typename Sample>
class PrefetchLoader {
 public:
  PrefetchLoader(std::size_t count, std::function<Sample(std::size_t)> produce, int workers = 1,
                 std::size_t capacity = 8);
  ~PrefetchLoader();
  PrefetchLoader(const PrefetchLoader&) = delete;
  PrefetchLoader& operator=(const PrefetchLoader&) = delete;

  /// Next sample; false when exhausted.
  bool next(Sample& out);

 private:
  void work(int worker);

  std::size_t count_;
  std::function<Sample(std::size_t)> produce_;
  std::size_t capacity_;
  int workers_;
  std::map<std::size_t, Sample> ready_;
  std::size_t next_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
  std::size_t error_index_ = 0;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::thread> threads_;
};

template <typename Sample>
PrefetchLoader<Sample>::PrefetchLoader(std::size_t count, std::function<Sample(std::size_t)> produce, int workers,
                                       std::size_t capacity)
    : count_(count), produce_(std::move(produce)), capacity_(std::max<std::size_t>(1, capacity)),
      workers_(std::max(1, workers)) {
  for (int w = 0; w < workers_; ++w) threads_.emplace_back([this, w] { work(w); });
}

template <typename Sample>
PrefetchLoader<Sample>::~PrefetchLoader() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

template <typename Sample>
void PrefetchLoader<Sample>::work(int worker) {
  for (std::size_t i = static_cast<std::size_t>(worker); i < count_; i += static_cast<std::size_t>(workers_)) {
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stop_ || i < next_ + capacity_; });
      if (stop_) return;
    }
    Sample s;
    try {
      s = produce_(i);
    } catch (...) {
      std::lock_guard lock(mu_);
      if (!error_ || i < error_index_) {
        error_ = std::current_exception();
        error_index_ = i;
      }
      cv_.notify_all();
      return;
    }
    {
      std::lock_guard lock(mu_);
      ready_.emplace(i, std::move(s));
    }
    cv_.notify_all();
  }
}

template <typename Sample>
bool PrefetchLoader<Sample>::next(Sample& out) {
  std::unique_lock lock(mu_);
  if (next_ >= count_) return false;
  cv_.wait(lock, [&] { return (error_ && error_index_ == next_) || ready_.count(next_) > 0; });
  if (error_ && error_index_ == next_) std::rethrow_exception(error_);
  auto it = ready_.find(next_);
  out = std::move(it->second);
  ready_.erase(it);
  ++next_;
  lock.unlock();
  cv_.notify_all();
  return true;
}

}  // namespace mp3d
