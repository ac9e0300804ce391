#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mp3d/ops.hpp"
#include "mp3d/rng.hpp"
#include "mp3d/tensor.hpp"

namespace mp3d {

enum class LayerKind {
  kInput,
  kConv,
  kGroupNorm,
  kRelu,
  kAdd,
  kMaxPool,
  kAvgPool,
  kUpsample2x,
  kGroupTransform,
  kCenterCrop,
  kLinear,  // cost-only fully connected block (never executed)
};

const char* layer_kind_name(LayerKind kind);

/// Parameter initialization recipe.
struct Init {
  enum class Kind { kKaiming, kNormal, kConstant, kDepthMean } kind = Kind::kKaiming;
  double value = 0.0;  // stddev for kNormal, value for kConstant
  int active_slices = 0;  // kDepthMean: 1/active over the central window, 0 elsewhere
};

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::kInput;
  std::vector<int> inputs;
  /// Parameter namespace; layers sharing a prefix share weights. Empty means `name`.
  std::string param_prefix;

  // kConv / kLinear
  int in_channels = 0;
  int out_channels = 0;
  Triple kernel{1, 1, 1};  // also the pooling window
  Triple stride{1, 1, 1};
  Triple pad{0, 0, 0};
  int groups = 1;
  bool bias = false;
  Init weight_init{};
  Init bias_init{Init::Kind::kConstant, 0.0, 0};

  // kGroupNorm
  int norm_groups = 1;
  double gamma_init = 1.0;

  // kGroupTransform
  int max_slices = 0;

  // kLinear: number of rows pushed through the layer per image
  std::int64_t rows = 1;

  const std::string& prefix() const { return param_prefix.empty() ? name : param_prefix; }
};

struct ParamInfo {
  std::string name;
  Shape shape;
};

/// Named parameters in creation order. Values are absent in shape-only graphs.
class ParameterStore {
 public:
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  const Shape& shape(const std::string& name) const;
  void add(const std::string& name, Shape shape, Tensor value);
  const std::vector<ParamInfo>& infos() const { return infos_; }
  std::vector<Tensor> tensors() const;
  std::int64_t total_elements() const;
  bool materialized() const { return materialized_; }
  void set_materialized(bool m) { materialized_ = m; }

 private:
  std::vector<ParamInfo> infos_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
  bool materialized_ = true;
};

/// Ordered layer specs plus a named parameter store. Layers refer to earlier
/// layers by index, so creation order is a valid execution order.
class ModelGraph {
 public:
  /// materialize=false builds a shape-only graph for cost analysis.
  explicit ModelGraph(bool materialize = true, std::uint64_t init_seed = 0);

  int add_input(const std::string& name, int channels);
  int add(LayerSpec spec);
  void set_output(const std::string& name, int layer);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(int id) const { return layers_.at(static_cast<std::size_t>(id)); }
  int output_id(const std::string& name) const;
  const std::map<std::string, int>& outputs() const { return outputs_; }
  int channels(int id) const { return channels_.at(static_cast<std::size_t>(id)); }

  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  /// Executes every non-cost-only layer and returns the requested outputs
  /// (all registered outputs when `wanted` is empty).
  std::map<std::string, Tensor> forward(const std::map<std::string, Tensor>& inputs,
                                        const std::vector<std::string>& wanted = {}) const;

  /// Output shape of every layer (cost-only layers get [N, out_features]).
  std::vector<Shape> infer_shapes(const std::map<std::string, Shape>& inputs) const;

 private:
  void create_params(const LayerSpec& spec);
  Tensor init_tensor(const Shape& shape, const Init& init, std::int64_t fan_in);

  std::vector<LayerSpec> layers_;
  std::vector<int> channels_;
  std::map<std::string, int> inputs_;
  std::map<std::string, int> outputs_;
  std::unordered_map<std::string, int> names_;
  ParameterStore params_;
  bool materialize_;
  Rng init_rng_;
};

/// Largest divisor of `channels` not exceeding `preferred`.
int norm_groups_for(int channels, int preferred);

}  // namespace mp3d
