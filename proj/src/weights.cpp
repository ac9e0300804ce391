#include "mp3d/weights.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mp3d/errors.hpp"

namespace mp3d {

namespace {

constexpr char kMagic[5] = {'M', 'P', '3', 'D', 'W'};

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > b_.size())
      throw FormatError(std::string("weight file truncated while reading ") + what + " at byte " +
                        std::to_string(pos_));
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

bool is_meta(const std::string& name) { return name.rfind(WeightStore::kMetaPrefix, 0) == 0; }

}  // namespace

WeightStore WeightStore::from_graph(const ModelGraph& graph) {
  const auto& params = graph.params();
  if (!params.materialized()) throw ConfigError("cannot snapshot a shape-only graph");
  WeightStore store;
  for (const auto& info : params.infos()) {
    auto d = params.get(info.name).data();
    store.put(info.name, info.shape, std::vector<float>(d.begin(), d.end()));
  }
  return store;
}

void WeightStore::put(const std::string& name, Shape shape, std::vector<float> data) {
  if (name.empty() || name.size() > 0xFFFF) throw FormatError("weight name length out of range: '" + name + "'");
  if (shape.size() > 0xFF) throw FormatError("rank too large for " + name);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw ShapeError("weight " + name + ": shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  auto it = index_.find(name);
  if (it != index_.end()) {
    entries_[it->second] = {name, std::move(shape), std::move(data)};
    return;
  }
  index_[name] = entries_.size();
  entries_.push_back({name, std::move(shape), std::move(data)});
}

const WeightEntry& WeightStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw LoadError("weight store has no entry " + name);
  return entries_[it->second];
}

void WeightStore::set_meta(const std::string& key, double value) {
  put(kMetaPrefix + key, {1}, {static_cast<float>(value)});
}

std::optional<double> WeightStore::meta(const std::string& key) const {
  auto it = index_.find(kMetaPrefix + key);
  if (it == index_.end()) return std::nullopt;
  return entries_[it->second].data.at(0);
}

void WeightStore::set_backbone_meta(const BackboneConfig& cfg) {
  set_meta("variant", cfg.variant == BackboneVariant::kMP3D63 ? 0 : 1);
  set_meta("pooling", cfg.pooling == PoolingPolicy::kAnisotropic ? 0 : 1);
  set_meta("conversion", cfg.conversion == Conversion::kGTM ? 0 : 1);
  set_meta("train_slices", cfg.input_slices);
}

WeightStore WeightStore::filtered(const std::string& prefix) const {
  WeightStore out;
  for (const auto& e : entries_)
    if (is_meta(e.name) || e.name.rfind(prefix, 0) == 0) out.put(e.name, e.shape, e.data);
  return out;
}

std::string WeightStore::serialize() const {
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float f : e.data) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

WeightStore WeightStore::parse(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic)))
    throw FormatError("not a weight file: bad magic bytes");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw FormatError("unsupported weight file version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("entry count");
  WeightStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name = r.bytes(len, "name");
    if (store.contains(name)) throw FormatError("duplicate weight name " + name);
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape;
    for (int k = 0; k < rank; ++k) {
      const auto e = r.get<std::uint32_t>("extent");
      if (e == 0) throw FormatError("zero extent in " + name);
      shape.push_back(e);
    }
    std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& f : data) f = std::bit_cast<float>(r.get<std::uint32_t>("tensor data"));
    store.put(name, std::move(shape), std::move(data));
  }
  if (!r.done()) throw FormatError("trailing bytes after the last weight entry");
  return store;
}

void WeightStore::save(const std::filesystem::path& path) const {
  const std::string bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

WeightStore WeightStore::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open weight file " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

LoadReport load_weights(ModelGraph& model, const WeightStore& store, bool strict) {
  auto& params = model.params();
  LoadReport report;
  for (const auto& info : params.infos()) {
    if (!store.contains(info.name)) {
      report.missing.push_back(info.name);
      continue;
    }
    const auto& e = store.get(info.name);
    if (e.shape != info.shape)
      throw LoadError("shape mismatch for parameter " + info.name + ": model " + shape_str(info.shape) + ", store " +
                      shape_str(e.shape));
    report.matched.push_back(info.name);
  }
  for (const auto& e : store.entries())
    if (!is_meta(e.name) && !params.contains(e.name)) report.unexpected.push_back(e.name);
  if (strict && !report.exact()) {
    std::string msg = "strict load failed:";
    for (const auto& n : report.missing) msg += " missing " + n + ";";
    for (const auto& n : report.unexpected) msg += " unexpected " + n + ";";
    throw LoadError(msg);
  }
  for (const auto& name : report.matched) {
    auto dst = params.get(name).mutable_data();
    const auto& src = store.get(name).data;
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return report;
}

LoadReport transfer_depth(const WeightStore& store, ModelGraph& model, bool backbone_only) {
  if (auto pooling = store.meta("pooling"); pooling && *pooling != 0) {
    const auto d = store.meta("train_slices");
    throw LoadError("weight store comes from an isotropic-pooling model (trained at " +
                    (d ? std::to_string(static_cast<int>(*d)) : std::string("?")) +
                    " slices) whose depth axis collapses in deep stages; its weights do not transfer across "
                    "slice counts");
  }
  if (backbone_only) return load_weights(model, store.filtered("backbone."), false);
  return load_weights(model, store, true);
}

Tensor rgb_to_volume(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw ShapeError("rgb_to_volume expects [3, H, W], got " + shape_str(image.shape()));
  return reshape(image, {1, 3, image.dim(1), image.dim(2)});
}

Tensor volume_to_rgb(const Tensor& volume) {
  if (volume.rank() != 4 || volume.dim(0) != 1 || volume.dim(1) != 3)
    throw ShapeError("volume_to_rgb expects [1, 3, H, W], got " + shape_str(volume.shape()));
  return reshape(volume, {3, volume.dim(2), volume.dim(3)});
}

}  // namespace mp3d
