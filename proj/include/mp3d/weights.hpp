#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mp3d/backbone.hpp"
#include "mp3d/model_graph.hpp"
#include "mp3d/tensor.hpp"

namespace mp3d {

struct WeightEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// Ordered name -> tensor map with a binary file format:
///   "MP3DW" | u32 version | u32 count | entries
///   entry: u16 name length | name | u8 rank | u32 extents | f32 data
/// All integers and floats little-endian. Names starting with "__meta__."
/// carry provenance scalars and are not model parameters.
class WeightStore {
 public:
  static constexpr std::uint32_t kVersion = 1;
  static constexpr const char* kMetaPrefix = "__meta__.";

  /// Snapshot of every parameter of `graph` in creation order.
  static WeightStore from_graph(const ModelGraph& graph);

  void put(const std::string& name, Shape shape, std::vector<float> data);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const WeightEntry& get(const std::string& name) const;
  const std::vector<WeightEntry>& entries() const { return entries_; }

  void set_meta(const std::string& key, double value);
  std::optional<double> meta(const std::string& key) const;

  /// Records variant, pooling policy, conversion and training slice count.
  void set_backbone_meta(const BackboneConfig& cfg);

  /// Parameters whose name starts with `prefix`, plus all metadata.
  WeightStore filtered(const std::string& prefix) const;

  std::string serialize() const;
  static WeightStore parse(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static WeightStore load(const std::filesystem::path& path);

 private:
  std::vector<WeightEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct LoadReport {
  std::vector<std::string> matched;
  std::vector<std::string> missing;     // in the model, absent from the store
  std::vector<std::string> unexpected;  // in the store, absent from the model

  bool exact() const { return missing.empty() && unexpected.empty(); }
};

/// Copies stored values into the model parameters. Any shape mismatch fails
/// before anything is written; strict mode also fails on missing/unexpected names.
LoadReport load_weights(ModelGraph& model, const WeightStore& store, bool strict);

/// Loads a store trained at one slice count into a model built for another.
/// Rejects stores whose metadata marks an isotropic pooling policy. With
/// backbone_only the head and neck are left at their initialization.
LoadReport transfer_depth(const WeightStore& store, ModelGraph& model, bool backbone_only = false);

/// [3, H, W] image -> [1, 3, H, W] volume (channels become slices).
Tensor rgb_to_volume(const Tensor& image);
/// Inverse of rgb_to_volume.
Tensor volume_to_rgb(const Tensor& volume);

}  // namespace mp3d
