#include "mp3d/model_graph.hpp"

#include <cmath>
#include <numeric>

#include "mp3d/conversion.hpp"
#include "mp3d/errors.hpp"

namespace mp3d {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kInput: return "input";
    case LayerKind::kConv: return "conv";
    case LayerKind::kGroupNorm: return "group_norm";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kAdd: return "add";
    case LayerKind::kMaxPool: return "max_pool";
    case LayerKind::kAvgPool: return "avg_pool";
    case LayerKind::kUpsample2x: return "upsample2x";
    case LayerKind::kGroupTransform: return "group_transform";
    case LayerKind::kCenterCrop: return "center_crop";
    case LayerKind::kLinear: return "linear";
  }
  return "?";
}

int norm_groups_for(int channels, int preferred) {
  for (int g = std::min(channels, preferred); g >= 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

// --- ParameterStore --------------------------------------------------------

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return values_[it->second];
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return values_[it->second];
}

const Shape& ParameterStore::shape(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return infos_[it->second].shape;
}

void ParameterStore::add(const std::string& name, Shape shape, Tensor value) {
  if (contains(name)) throw ConfigError("duplicate parameter " + name);
  index_[name] = infos_.size();
  infos_.push_back({name, std::move(shape)});
  values_.push_back(std::move(value));
}

std::vector<Tensor> ParameterStore::tensors() const { return values_; }

std::int64_t ParameterStore::total_elements() const {
  std::int64_t total = 0;
  for (const auto& info : infos_) total += shape_numel(info.shape);
  return total;
}

// --- ModelGraph ------------------------------------------------------------

ModelGraph::ModelGraph(bool materialize, std::uint64_t init_seed)
    : materialize_(materialize), init_rng_(Rng::stream(init_seed, "init")) {
  params_.set_materialized(materialize);
}

int ModelGraph::add_input(const std::string& name, int channels) {
  LayerSpec spec;
  spec.name = name;
  spec.kind = LayerKind::kInput;
  spec.out_channels = channels;
  int id = add(std::move(spec));
  inputs_[name] = id;
  return id;
}

int ModelGraph::add(LayerSpec spec) {
  if (names_.count(spec.name)) throw ConfigError("duplicate layer name " + spec.name);
  const int id = static_cast<int>(layers_.size());
  for (int in : spec.inputs)
    if (in < 0 || in >= id) throw ConfigError("layer " + spec.name + " refers to a later or unknown layer");

  auto in_ch = [&](std::size_t i) { return channels_.at(static_cast<std::size_t>(spec.inputs.at(i))); };
  int out_ch = 0;
  switch (spec.kind) {
    case LayerKind::kInput:
      out_ch = spec.out_channels;
      break;
    case LayerKind::kConv:
      if (in_ch(0) != spec.in_channels)
        throw ConfigError("layer " + spec.name + ": expects " + std::to_string(spec.in_channels) +
                          " input channels, producer has " + std::to_string(in_ch(0)));
      out_ch = spec.out_channels;
      break;
    case LayerKind::kGroupTransform:
      spec.in_channels = spec.out_channels = in_ch(0);
      out_ch = in_ch(0);
      break;
    case LayerKind::kGroupNorm:
      spec.in_channels = spec.out_channels = in_ch(0);
      if (in_ch(0) % spec.norm_groups != 0) throw ConfigError("layer " + spec.name + ": channels not divisible by groups");
      out_ch = in_ch(0);
      break;
    case LayerKind::kAdd:
      if (spec.inputs.size() != 2 || in_ch(0) != in_ch(1))
        throw ConfigError("layer " + spec.name + ": add needs two inputs with equal channels");
      out_ch = in_ch(0);
      break;
    case LayerKind::kLinear:
      out_ch = spec.out_channels;
      break;
    default:
      out_ch = in_ch(0);
      break;
  }
  if (spec.kind != LayerKind::kInput && spec.kind != LayerKind::kLinear && spec.inputs.empty())
    throw ConfigError("layer " + spec.name + " has no input");

  create_params(spec);
  names_[spec.name] = id;
  channels_.push_back(out_ch);
  layers_.push_back(std::move(spec));
  return id;
}

void ModelGraph::set_output(const std::string& name, int layer) {
  if (layer < 0 || layer >= static_cast<int>(layers_.size())) throw ConfigError("output " + name + " refers to unknown layer");
  outputs_[name] = layer;
}

int ModelGraph::output_id(const std::string& name) const {
  auto it = outputs_.find(name);
  if (it == outputs_.end()) throw std::out_of_range("unknown graph output " + name);
  return it->second;
}

Tensor ModelGraph::init_tensor(const Shape& shape, const Init& init, std::int64_t fan_in) {
  const auto count = static_cast<std::size_t>(shape_numel(shape));
  std::vector<float> values(count, 0.0f);
  switch (init.kind) {
    case Init::Kind::kKaiming: {
      double std = std::sqrt(2.0 / static_cast<double>(std::max<std::int64_t>(1, fan_in)));
      for (auto& v : values) v = static_cast<float>(init_rng_.normal(0.0, std));
      break;
    }
    case Init::Kind::kNormal:
      for (auto& v : values) v = static_cast<float>(init_rng_.normal(0.0, init.value));
      break;
    case Init::Kind::kConstant:
      for (auto& v : values) v = static_cast<float>(init.value);
      break;
    case Init::Kind::kDepthMean: {
      const std::int64_t rows = shape[0], cols = shape[1], active = init.active_slices;
      const std::int64_t off = group_transform_offset(cols, active);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = off; j < off + active; ++j)
          values[static_cast<std::size_t>(r * cols + j)] = 1.0f / static_cast<float>(active);
      break;
    }
  }
  return Tensor::from(shape, std::move(values), true);
}

void ModelGraph::create_params(const LayerSpec& spec) {
  if (spec.kind == LayerKind::kLinear) return;  // cost-only, accounted by the profiler
  const std::string& pre = spec.prefix();
  auto ensure = [&](const std::string& name, const Shape& shape, const Init& init, std::int64_t fan_in) {
    if (params_.contains(name)) {
      if (params_.shape(name) != shape)
        throw ConfigError("shared parameter " + name + " reused with shape " + shape_str(shape));
      return;
    }
    params_.add(name, shape, materialize_ ? init_tensor(shape, init, fan_in) : Tensor{});
  };
  switch (spec.kind) {
    case LayerKind::kConv: {
      if (spec.in_channels % spec.groups || spec.out_channels % spec.groups)
        throw ConfigError("layer " + spec.name + ": channels not divisible by groups");
      const std::int64_t cig = spec.in_channels / spec.groups;
      Shape w{spec.out_channels, cig, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
      ensure(pre + ".weight", w, spec.weight_init, cig * spec.kernel[0] * spec.kernel[1] * spec.kernel[2]);
      if (spec.bias) ensure(pre + ".bias", {spec.out_channels}, spec.bias_init, 1);
      break;
    }
    case LayerKind::kGroupNorm:
      ensure(pre + ".weight", {spec.in_channels}, {Init::Kind::kConstant, spec.gamma_init, 0}, 1);
      ensure(pre + ".bias", {spec.in_channels}, {Init::Kind::kConstant, 0.0, 0}, 1);
      break;
    case LayerKind::kGroupTransform:
      ensure(pre + ".weight", {spec.in_channels, spec.max_slices}, spec.weight_init, 1);
      ensure(pre + ".bias", {spec.in_channels}, {Init::Kind::kConstant, 0.0, 0}, 1);
      break;
    default:
      break;
  }
}

std::map<std::string, Tensor> ModelGraph::forward(const std::map<std::string, Tensor>& inputs,
                                                  const std::vector<std::string>& wanted) const {
  if (!params_.materialized()) throw ConfigError("forward() on a shape-only graph");
  std::vector<Tensor> values(layers_.size());
  auto param = [&](const LayerSpec& s, const char* suffix) -> Tensor {
    std::string name = s.prefix() + suffix;
    return params_.contains(name) ? params_.get(name) : Tensor{};
  };
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    auto in = [&](std::size_t k) -> const Tensor& { return values[static_cast<std::size_t>(s.inputs[k])]; };
    switch (s.kind) {
      case LayerKind::kInput: {
        auto it = inputs.find(s.name);
        if (it == inputs.end()) throw ConfigError("missing graph input " + s.name);
        if (it->second.rank() < 2 || it->second.dim(1) != s.out_channels)
          throw ShapeError("input " + s.name + " must have " + std::to_string(s.out_channels) + " channels, got " +
                           shape_str(it->second.shape()));
        values[i] = it->second;
        break;
      }
      case LayerKind::kConv: {
        ConvOptions o;
        o.stride = s.stride;
        o.pad = s.pad;
        o.groups = s.groups;
        values[i] = conv3d(in(0), param(s, ".weight"), param(s, ".bias"), o);
        break;
      }
      case LayerKind::kGroupNorm:
        values[i] = group_norm(in(0), s.norm_groups, param(s, ".weight"), param(s, ".bias"));
        break;
      case LayerKind::kRelu:
        values[i] = relu(in(0));
        break;
      case LayerKind::kAdd:
        values[i] = mp3d::add(in(0), in(1));
        break;
      case LayerKind::kMaxPool:
        values[i] = pool3d(in(0), PoolMode::kMax, s.kernel, s.stride, s.pad);
        break;
      case LayerKind::kAvgPool:
        values[i] = pool3d(in(0), PoolMode::kAvg, s.kernel, s.stride, s.pad);
        break;
      case LayerKind::kUpsample2x:
        values[i] = upsample2x_nearest(in(0));
        break;
      case LayerKind::kGroupTransform:
        values[i] = group_transform(in(0), param(s, ".weight"), param(s, ".bias"));
        break;
      case LayerKind::kCenterCrop:
        values[i] = center_crop_transform(in(0));
        break;
      case LayerKind::kLinear:
        break;
    }
  }
  std::map<std::string, Tensor> result;
  if (wanted.empty()) {
    for (const auto& [name, id] : outputs_) result[name] = values[static_cast<std::size_t>(id)];
  } else {
    for (const auto& name : wanted) result[name] = values[static_cast<std::size_t>(output_id(name))];
  }
  return result;
}

std::vector<Shape> ModelGraph::infer_shapes(const std::map<std::string, Shape>& inputs) const {
  std::vector<Shape> shapes(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& s = layers_[i];
    auto in = [&](std::size_t k) -> const Shape& { return shapes[static_cast<std::size_t>(s.inputs[k])]; };
    auto windowed = [&](const Shape& x, int channels) {
      Shape out = x;
      out[1] = channels;
      const std::size_t first = 2;
      const int axis0 = x.size() == 5 ? 0 : 1;
      for (std::size_t d = first, a = static_cast<std::size_t>(axis0); d < x.size(); ++d, ++a) {
        std::int64_t e = window_output_extent(x[d], s.kernel[a], s.stride[a], s.pad[a]);
        if (e < 1) throw ShapeError("layer " + s.name + ": window larger than input " + shape_str(x));
        out[d] = e;
      }
      return out;
    };
    switch (s.kind) {
      case LayerKind::kInput: {
        auto it = inputs.find(s.name);
        if (it == inputs.end()) throw ConfigError("missing graph input " + s.name);
        shapes[i] = it->second;
        break;
      }
      case LayerKind::kConv:
        shapes[i] = windowed(in(0), s.out_channels);
        break;
      case LayerKind::kMaxPool:
      case LayerKind::kAvgPool:
        shapes[i] = windowed(in(0), static_cast<int>(in(0)[1]));
        break;
      case LayerKind::kUpsample2x:
        shapes[i] = {in(0)[0], in(0)[1], in(0)[2] * 2, in(0)[3] * 2};
        break;
      case LayerKind::kGroupTransform:
        if (in(0)[2] > s.max_slices) throw ShapeError("layer " + s.name + ": depth exceeds max_slices");
        shapes[i] = {in(0)[0], in(0)[1], in(0)[3], in(0)[4]};
        break;
      case LayerKind::kCenterCrop:
        if (in(0)[2] % 2 == 0) throw ShapeError("layer " + s.name + ": even depth has no center slice");
        shapes[i] = {in(0)[0], in(0)[1], in(0)[3], in(0)[4]};
        break;
      case LayerKind::kAdd:
        if (in(0) != in(1))
          throw ShapeError("layer " + s.name + ": add shape mismatch " + shape_str(in(0)) + " vs " + shape_str(in(1)));
        shapes[i] = in(0);
        break;
      case LayerKind::kLinear:
        shapes[i] = {s.rows, s.out_channels};
        break;
      default:
        shapes[i] = in(0);
        break;
    }
  }
  return shapes;
}

}  // namespace mp3d
