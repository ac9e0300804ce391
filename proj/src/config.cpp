#include "mp3d/config.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mp3d/errors.hpp"

namespace mp3d {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// Line of every object key, by dotted path. Assumes syntactically valid JSON.
std::map<std::string, int> key_lines(const std::string& text) {
  struct Frame {
    bool object;
    std::string path;
    std::string key;
  };
  std::map<std::string, int> lines;
  std::vector<Frame> stack;
  int line = 1;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '\n') {
      ++line;
    } else if (c == '"') {
      std::string s;
      std::size_t j = i + 1;
      for (; j < text.size() && text[j] != '"'; ++j) {
        if (text[j] == '\\') ++j;
        if (j < text.size()) s += text[j];
      }
      std::size_t k = j + 1;
      while (k < text.size() && std::isspace(static_cast<unsigned char>(text[k])) && text[k] != '\n') ++k;
      if (!stack.empty() && stack.back().object && k < text.size() && text[k] == ':') {
        stack.back().key = s;
        const std::string path = stack.back().path.empty() ? s : stack.back().path + "." + s;
        lines.emplace(path, line);
      }
      i = j;
    } else if (c == '{' || c == '[') {
      std::string path;
      if (!stack.empty()) {
        const auto& top = stack.back();
        path = top.object ? (top.path.empty() ? top.key : top.path + "." + top.key) : top.path + "[]";
      }
      stack.push_back({c == '{', path, {}});
    } else if (c == '}' || c == ']') {
      if (!stack.empty()) stack.pop_back();
    }
  }
  return lines;
}

struct Context {
  std::string origin;
  std::map<std::string, int> lines;

  [[noreturn]] void fail(const std::string& path, const std::string& what) const {
    std::string where = origin;
    auto it = lines.find(path);
    if (it != lines.end()) where += ":" + std::to_string(it->second);
    throw ConfigError(where + ": " + path + ": " + what);
  }
};

class Reader {
 public:
  Reader(const json* j, std::string path, const Context* ctx) : j_(j), path_(std::move(path)), ctx_(ctx) {}

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    if (!j_) return nullptr;
    auto it = j_->find(key);
    if (it == j_->end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) ctx_->fail(child(key), "expected a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) ctx_->fail(child(key), "expected an integer");
      const auto x = v->get<std::int64_t>();
      if (x < INT32_MIN || x > INT32_MAX) ctx_->fail(child(key), "integer out of range");
      out = static_cast<int>(x);
    }
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) ctx_->fail(child(key), "expected a nonnegative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) ctx_->fail(child(key), "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) ctx_->fail(child(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  template <typename T>
  void get(const std::string& key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) ctx_->fail(child(key), "expected an array");
      std::vector<T> r;
      for (const auto& e : *v) {
        if constexpr (std::is_same_v<T, std::string>) {
          if (!e.is_string()) ctx_->fail(child(key), "expected an array of strings");
        } else if constexpr (std::is_integral_v<T>) {
          if (!e.is_number_integer()) ctx_->fail(child(key), "expected an array of integers");
        } else {
          if (!e.is_number()) ctx_->fail(child(key), "expected an array of numbers");
        }
        r.push_back(e.get<T>());
      }
      out = std::move(r);
    }
  }
  template <typename T, std::size_t N>
  void get(const std::string& key, std::array<T, N>& out) {
    if (const json* v = find(key)) {
      std::vector<T> r;
      Reader tmp(j_, path_, ctx_);
      tmp.get(key, r);
      if (r.size() != N) ctx_->fail(child(key), "expected " + std::to_string(N) + " entries");
      std::copy(r.begin(), r.end(), out.begin());
    }
  }
  template <typename E>
  void get_enum(const std::string& key, E& out, E (*parse)(const std::string&)) {
    std::string s;
    if (!find(key)) return;
    get(key, s);
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      ctx_->fail(child(key), e.what());
    }
  }

  Reader section(const std::string& key) {
    const json* v = find(key);
    if (v && !v->is_object()) ctx_->fail(child(key), "expected an object");
    return Reader(v, child(key), ctx_);
  }

  void finish() const {
    if (!j_) return;
    for (const auto& [k, v] : j_->items())
      if (!used_.count(k)) ctx_->fail(child(k), "unknown key");
  }

 private:
  const json* j_;
  std::string path_;
  const Context* ctx_;
  std::set<std::string> used_;
};

void read_train(Reader r, TrainConfig& t) {
  r.get("lr", t.lr);
  r.get("momentum", t.momentum);
  r.get("weight_decay", t.weight_decay);
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("warmup_steps", t.warmup_steps);
  r.get("warmup_factor", t.warmup_factor);
  r.get("decay_at", t.decay_at);
  r.get("decay_factor", t.decay_factor);
  r.get("grad_clip", t.grad_clip);
  r.get("seed", t.seed);
  r.get("loader_workers", t.loader_workers);
  r.finish();
}

ojson train_json(const TrainConfig& t) {
  return ojson{{"lr", t.lr},
               {"momentum", t.momentum},
               {"weight_decay", t.weight_decay},
               {"epochs", t.epochs},
               {"batch_size", t.batch_size},
               {"warmup_steps", t.warmup_steps},
               {"warmup_factor", t.warmup_factor},
               {"decay_at", t.decay_at},
               {"decay_factor", t.decay_factor},
               {"grad_clip", t.grad_clip},
               {"seed", t.seed},
               {"loader_workers", t.loader_workers}};
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  auto& b = c.detector.backbone;
  b.stem_channels = 16;
  b.stage_channels = {32, 64, 128, 256};
  b.stage_blocks = {1, 1, 1, 1};
  b.input_slices = 9;
  c.detector.fpn_channels = 32;
  c.detector.anchors.scales = {8, 16, 32, 64, 128};
  c.detector.sample_size = 32;
  c.train.lr = 0.01;
  c.train.epochs = 20;
  c.pretrain.train.lr = 0.01;
  c.pretrain.train.epochs = 5;
  return c;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::string& origin) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    // nlohmann reports "line L, column C" inside the message.
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }
  Context ctx{origin, key_lines(text)};
  if (!root.is_object()) ctx.fail("<root>", "expected a JSON object");

  ExperimentConfig c = defaults();
  c.source = text;
  Reader top(&root, "", &ctx);
  {
    Reader d = top.section("data");
    auto& s = c.data.synthetic;
    d.get("num_volumes", s.num_volumes);
    d.get("height", s.height);
    d.get("width", s.width);
    d.get("slices", s.slices);
    d.get("z_spacing_mm", s.z_spacing_mm);
    d.get("lesions_per_volume", s.lesions_per_volume);
    d.get("lesion_semi_axis_xy", s.lesion_semi_axis_xy);
    d.get("lesion_semi_axis_z", s.lesion_semi_axis_z);
    d.get("confusers_per_volume", s.confusers_per_volume);
    d.get("confuser_semi_axis", s.confuser_semi_axis);
    d.get("contrast_hu", s.contrast_hu);
    d.get("background_hu", s.background_hu);
    d.get("noise_sigma_hu", s.noise_sigma_hu);
    d.get("min_box_side", s.min_box_side);
    d.get("train_fraction", s.train_fraction);
    d.get("seed", s.seed);
    d.get("target_mm", c.data.target_mm);
    d.get("train_subset_fraction", c.data.train_subset_fraction);
    {
      Reader a = d.section("augment");
      a.get("hflip_prob", c.data.augment.hflip_prob);
      a.get("vflip_prob", c.data.augment.vflip_prob);
      a.get("scales", c.data.augment.scales);
      a.get("base_size", c.data.augment.base_size);
      a.finish();
    }
    d.finish();
  }
  {
    Reader b = top.section("backbone");
    auto& k = c.detector.backbone;
    b.get_enum("variant", k.variant, &parse_variant);
    b.get_enum("pooling", k.pooling, &parse_pooling);
    b.get_enum("conversion", k.conversion, &parse_conversion);
    b.get("stage_blocks", k.stage_blocks);
    b.get("stage_channels", k.stage_channels);
    b.get("stem_channels", k.stem_channels);
    b.get("input_slices", k.input_slices);
    b.get("norm_groups", k.norm_groups);
    b.get("gtm_max_slices", k.gtm_max_slices);
    b.get("zero_init_residual", k.zero_init_residual);
    b.get("stride_in_reduce", k.stride_in_reduce);
    b.finish();
  }
  {
    Reader d = top.section("detector");
    auto& k = c.detector;
    d.get("fpn_channels", k.fpn_channels);
    d.get("anchor_scales", k.anchors.scales);
    d.get("aspect_ratios", k.anchors.aspect_ratios);
    d.get("anchor_strides", k.anchors.strides);
    d.get("iou_pos", k.iou_pos);
    d.get("iou_neg", k.iou_neg);
    d.get("sample_size", k.sample_size);
    d.get("pos_fraction", k.pos_fraction);
    d.get("prior_prob", k.prior_prob);
    d.get("score_thresh", k.decode.score_thresh);
    d.get("nms_iou", k.decode.nms_iou);
    d.get("max_dets", k.decode.max_dets);
    d.get("pre_nms_topk", k.decode.pre_nms_topk);
    d.finish();
  }
  read_train(top.section("train"), c.train);
  {
    Reader e = top.section("eval");
    e.get("iou", c.eval.iou);
    e.get("fp_rates", c.eval.fp_rates);
    e.get("batch_size", c.eval.batch_size);
    e.finish();
  }
  {
    Reader p = top.section("profile");
    auto& k = c.profile;
    p.get("resolution", k.config.resolution);
    p.get("mac_flops", k.config.convention.mac_flops);
    p.get("include_box_head", k.config.include_box_head);
    p.get("box_head_rois", k.config.box_head_rois);
    p.get("box_head_fc", k.config.box_head_fc);
    p.get("slices", k.slices);
    p.get("variants", k.variants);
    p.get("architecture", k.architecture);
    p.finish();
  }
  {
    Reader p = top.section("pretrain");
    auto& im = c.pretrain.images;
    p.get("num_images", im.num_images);
    p.get("height", im.height);
    p.get("width", im.width);
    p.get("objects_per_image", im.objects_per_image);
    p.get("semi_axis", im.semi_axis);
    p.get("contrast", im.contrast);
    p.get("background", im.background);
    p.get("noise_sigma", im.noise_sigma);
    p.get("seed", im.seed);
    read_train(p.section("train"), c.pretrain.train);
    p.finish();
  }
  top.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path.string());
}

void ExperimentConfig::validate() const {
  data.synthetic.validate();
  if (!(data.target_mm > 0)) throw ConfigError("data.target_mm must be positive");
  if (!(data.train_subset_fraction > 0 && data.train_subset_fraction <= 1))
    throw ConfigError("data.train_subset_fraction must be in (0, 1]");
  if (!(data.augment.hflip_prob >= 0 && data.augment.hflip_prob <= 1 && data.augment.vflip_prob >= 0 &&
        data.augment.vflip_prob <= 1))
    throw ConfigError("data.augment flip probabilities must be in [0, 1]");
  if (data.augment.base_size < 1) throw ConfigError("data.augment.base_size must be positive");
  for (int s : data.augment.scales)
    if (s < 1) throw ConfigError("data.augment.scales must be positive");
  detector.validate();
  train.validate();
  if (!(eval.iou > 0 && eval.iou <= 1)) throw ConfigError("eval.iou must be in (0, 1]");
  if (eval.fp_rates.empty()) throw ConfigError("eval.fp_rates must not be empty");
  for (double r : eval.fp_rates)
    if (!(r > 0)) throw ConfigError("eval.fp_rates must be positive");
  if (eval.batch_size < 1) throw ConfigError("eval.batch_size must be positive");
  if (profile.config.resolution < 32 || profile.config.resolution % 32 != 0)
    throw ConfigError("profile.resolution must be a positive multiple of 32");
  if (profile.config.convention.mac_flops != 1 && profile.config.convention.mac_flops != 2)
    throw ConfigError("profile.mac_flops must be 1 or 2");
  if (profile.architecture != "paper" && profile.architecture != "config")
    throw ConfigError("profile.architecture must be \"paper\" or \"config\"");
  for (const auto& v : profile.variants) parse_variant(v);
  for (int d : profile.slices)
    if (d < 1 || d % 2 == 0) throw ConfigError("profile.slices must be odd and positive");
  if (pretrain.images.num_images < 1) throw ConfigError("pretrain.num_images must be positive");
  pretrain.train.validate();
}

std::string ExperimentConfig::to_json() const {
  const auto& s = data.synthetic;
  const auto& b = detector.backbone;
  const auto& im = pretrain.images;
  ojson j;
  j["data"] = ojson{{"num_volumes", s.num_volumes},
                    {"height", s.height},
                    {"width", s.width},
                    {"slices", s.slices},
                    {"z_spacing_mm", s.z_spacing_mm},
                    {"lesions_per_volume", s.lesions_per_volume},
                    {"lesion_semi_axis_xy", s.lesion_semi_axis_xy},
                    {"lesion_semi_axis_z", s.lesion_semi_axis_z},
                    {"confusers_per_volume", s.confusers_per_volume},
                    {"confuser_semi_axis", s.confuser_semi_axis},
                    {"contrast_hu", s.contrast_hu},
                    {"background_hu", s.background_hu},
                    {"noise_sigma_hu", s.noise_sigma_hu},
                    {"min_box_side", s.min_box_side},
                    {"train_fraction", s.train_fraction},
                    {"seed", s.seed},
                    {"target_mm", data.target_mm},
                    {"train_subset_fraction", data.train_subset_fraction},
                    {"augment", ojson{{"hflip_prob", data.augment.hflip_prob},
                                      {"vflip_prob", data.augment.vflip_prob},
                                      {"scales", data.augment.scales},
                                      {"base_size", data.augment.base_size}}}};
  j["backbone"] = ojson{{"variant", to_string(b.variant)},
                        {"pooling", to_string(b.pooling)},
                        {"conversion", to_string(b.conversion)},
                        {"stage_blocks", b.stage_blocks},
                        {"stage_channels", b.stage_channels},
                        {"stem_channels", b.stem_channels},
                        {"input_slices", b.input_slices},
                        {"norm_groups", b.norm_groups},
                        {"gtm_max_slices", b.gtm_max_slices},
                        {"zero_init_residual", b.zero_init_residual},
                        {"stride_in_reduce", b.stride_in_reduce}};
  j["detector"] = ojson{{"fpn_channels", detector.fpn_channels},
                        {"anchor_scales", detector.anchors.scales},
                        {"aspect_ratios", detector.anchors.aspect_ratios},
                        {"anchor_strides", detector.anchors.strides},
                        {"iou_pos", detector.iou_pos},
                        {"iou_neg", detector.iou_neg},
                        {"sample_size", detector.sample_size},
                        {"pos_fraction", detector.pos_fraction},
                        {"prior_prob", detector.prior_prob},
                        {"score_thresh", detector.decode.score_thresh},
                        {"nms_iou", detector.decode.nms_iou},
                        {"max_dets", detector.decode.max_dets},
                        {"pre_nms_topk", detector.decode.pre_nms_topk}};
  j["train"] = train_json(train);
  j["eval"] = ojson{{"iou", eval.iou}, {"fp_rates", eval.fp_rates}, {"batch_size", eval.batch_size}};
  j["profile"] = ojson{{"resolution", profile.config.resolution},
                       {"mac_flops", profile.config.convention.mac_flops},
                       {"include_box_head", profile.config.include_box_head},
                       {"box_head_rois", profile.config.box_head_rois},
                       {"box_head_fc", profile.config.box_head_fc},
                       {"slices", profile.slices},
                       {"variants", profile.variants},
                       {"architecture", profile.architecture}};
  j["pretrain"] = ojson{{"num_images", im.num_images},
                        {"height", im.height},
                        {"width", im.width},
                        {"objects_per_image", im.objects_per_image},
                        {"semi_axis", im.semi_axis},
                        {"contrast", im.contrast},
                        {"background", im.background},
                        {"noise_sigma", im.noise_sigma},
                        {"seed", im.seed},
                        {"train", train_json(pretrain.train)}};
  return j.dump(2) + "\n";
}

std::string ExperimentConfig::echo() const { return source.empty() ? to_json() : source; }

std::string ExperimentConfig::hash() const { return hex64(fnv1a64(echo())); }

void write_config_echo(const std::filesystem::path& dir, const ExperimentConfig& cfg, const std::string& stem) {
  if (!dir.empty()) std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / (stem + ".json"), std::ios::binary);
    f << cfg.echo();
    if (!f) throw std::runtime_error("cannot write " + (dir / (stem + ".json")).string());
  }
  std::ofstream h(dir / (stem + ".hash"), std::ios::binary);
  h << cfg.hash() << "\n";
  if (!h) throw std::runtime_error("cannot write " + (dir / (stem + ".hash")).string());
}

bool verify_config_echo(const std::filesystem::path& dir, const std::string& stem) {
  std::ifstream f(dir / (stem + ".json"), std::ios::binary), h(dir / (stem + ".hash"));
  if (!f || !h) return false;
  std::stringstream ss;
  ss << f.rdbuf();
  std::string want;
  h >> want;
  return hex64(fnv1a64(ss.str())) == want;
}

}  // namespace mp3d
