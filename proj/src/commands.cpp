#include "mp3d/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "mp3d/errors.hpp"
#include "mp3d/profiler.hpp"
#include "mp3d/trainer.hpp"
#include "mp3d/weights.hpp"

namespace mp3d {

namespace {

using json = nlohmann::ordered_json;

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + p.string());
}

// Sections that must agree for two runs to be comparable.
json run_signature(const ExperimentConfig& cfg) {
  const json all = json::parse(cfg.to_json());
  json sig;
  sig["backbone"] = all["backbone"];
  sig["detector"] = all["detector"];
  sig["train"] = all["train"];
  sig["target_mm"] = all["data"]["target_mm"];
  sig["augment"] = all["data"]["augment"];
  return sig;
}

std::vector<const VolumeRecord*> volumes_of(const DatasetOnDisk& ds, const std::vector<std::string>& ids) {
  std::vector<const VolumeRecord*> out;
  for (const auto& id : ids) out.push_back(&ds.volume(id));
  return out;
}

json train_one(const ExperimentConfig& cfg, const TrainOptions& opts, const DatasetOnDisk& ds, double fraction,
               const fs::path& dir) {
  fs::create_directories(dir);
  const auto n_train = static_cast<std::size_t>(
      std::max(1.0, std::ceil(fraction * static_cast<double>(ds.train.size()) - 1e-9)));
  if (ds.train.empty()) throw ConfigError("dataset has no training volumes");
  const std::vector<std::string> ids(ds.train.begin(),
                                     ds.train.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, ds.train.size())));

  Detector det(cfg.detector, Rng::stream(cfg.train.seed, "init").next());
  json init = "scratch";
  if (opts.init) {
    const WeightStore store = WeightStore::load(*opts.init);
    const LoadReport rep = transfer_depth(store, det.graph(), opts.backbone_only);
    init = json{{"path", opts.init->string()},
                {"hash", hex64(fnv1a64(read_text(*opts.init)))},
                {"backbone_only", opts.backbone_only},
                {"source_slices", store.meta("train_slices").value_or(0)},
                {"matched", rep.matched.size()},
                {"missing", rep.missing.size()},
                {"unexpected", rep.unexpected.size()}};
    std::cerr << "init: loaded " << rep.matched.size() << " tensors from " << opts.init->string() << " ("
              << rep.missing.size() << " missing, " << rep.unexpected.size() << " unexpected)\n";
  }

  const auto source = make_volume_source(volumes_of(ds, ids), cfg.detector.backbone.input_slices, cfg.data.augment,
                                         cfg.data.target_mm);
  const TrainResult result = train_detector(det, source, cfg.train, opts.max_steps);
  result.final_weights.save(dir / "final.weights");
  result.best_weights.save(dir / "best.weights");
  write_text(dir / "loss.csv", loss_csv(result.curve));
  write_config_echo(dir, cfg);

  json run;
  run["config_hash"] = cfg.hash();
  run["data_manifest_hash"] = ds.manifest_hash;
  run["signature"] = run_signature(cfg);
  run["max_steps"] = opts.max_steps;
  run["fraction"] = fraction;
  run["train_volumes"] = ids.size();
  run["train_images"] = source.size;
  run["steps"] = result.steps;
  run["best_epoch"] = result.best_epoch;
  run["best_epoch_loss"] = result.best_epoch_loss;
  run["final_loss"] = final_loss(result.curve, 50);
  run["init"] = init;
  write_text(dir / "run.json", run.dump(2) + "\n");
  return run;
}

std::string fraction_dir(int percent) { return "fraction_" + std::to_string(percent); }

}  // namespace

std::string cmd_synth_gen(const ExperimentConfig& cfg, const fs::path& out) {
  const SyntheticDataset ds = generate_synthetic(cfg.data.synthetic);
  const std::string hash = write_dataset(out, ds, cfg.echo());
  write_config_echo(out, cfg);
  return hash;
}

void cmd_train(const ExperimentConfig& cfg, const TrainOptions& opts) {
  const DatasetOnDisk ds = read_dataset(opts.data);
  if (opts.fractions.empty()) {
    train_one(cfg, opts, ds, cfg.data.train_subset_fraction, opts.out);
    return;
  }
  json sweep;
  sweep["fractions"] = json::array();
  for (int p : opts.fractions) {
    if (p < 1 || p > 100) throw ConfigError("fractions are percentages in [1, 100], got " + std::to_string(p));
    train_one(cfg, opts, ds, p / 100.0, opts.out / fraction_dir(p));
    sweep["fractions"].push_back(p);
  }
  write_config_echo(opts.out, cfg);
  write_text(opts.out / "sweep.json", sweep.dump(2) + "\n");
}

ExperimentConfig config_for_weights(const fs::path& weights) {
  const fs::path p = weights.parent_path() / "config.json";
  if (!fs::exists(p))
    throw ConfigError("no --config given and no config.json next to " + weights.string());
  return ExperimentConfig::load(p);
}

EvalReport cmd_eval(const ExperimentConfig& cfg, const EvalOptions& opts) {
  const DatasetOnDisk ds = read_dataset(opts.data);
  std::vector<std::string> ids;
  if (opts.split == "val") {
    ids = ds.val;
  } else if (opts.split == "train") {
    ids = ds.train;
  } else if (opts.split == "all") {
    ids = ds.train;
    ids.insert(ids.end(), ds.val.begin(), ds.val.end());
  } else {
    throw ConfigError("unknown split '" + opts.split + "' (expected val, train or all)");
  }
  const int slices = cfg.detector.backbone.input_slices;
  const EvalSet set = make_eval_set(volumes_of(ds, ids), slices, cfg.data.target_mm);

  ImageDetections preds;
  if (opts.predictions) {
    preds = read_predictions_csv(*opts.predictions);
  } else {
    if (!opts.weights) throw ConfigError("eval needs --weights or --predictions");
    Detector det(cfg.detector, 0);
    load_weights(det.graph(), WeightStore::load(*opts.weights), true);
    preds = predict(det, set, cfg.eval.batch_size);
  }
  const EvalReport report = evaluate(preds, set.gt, set.keys, cfg.eval.iou, cfg.eval.fp_rates);
  const fs::path dir = opts.out.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  write_predictions_csv(dir / "predictions.csv", preds);
  write_text(opts.out, report.to_json());
  write_config_echo(dir, cfg, opts.out.stem().string() + ".config");
  return report;
}

std::string cmd_profile(const ExperimentConfig& cfg, const std::vector<int>& slices, const fs::path& out) {
  std::vector<ProfileVariant> variants;
  for (const auto& name : cfg.profile.variants) {
    const BackboneVariant v = parse_variant(name);
    DetectorConfig d = cfg.detector;
    if (cfg.profile.architecture == "paper") d = paper_detector_config(v, 9);
    d.backbone.variant = v;
    variants.push_back({name, d});
  }
  const std::string table = report_table(variants, slices.empty() ? cfg.profile.slices : slices, cfg.profile.config);
  write_text(out, table);
  write_config_echo(out.parent_path(), cfg, out.stem().string() + ".config");
  return table;
}

void cmd_pretrain_sim(const ExperimentConfig& cfg, const fs::path& out) {
  std::vector<LossRow> curve;
  const WeightStore store = simulate_pretraining(cfg.detector, cfg.pretrain, &curve);
  fs::create_directories(out);
  store.save(out / "pretrained.weights");
  write_text(out / "loss.csv", loss_csv(curve));
  write_config_echo(out, cfg);
}

namespace {

json read_run(const fs::path& dir) {
  const fs::path p = dir / "run.json";
  if (!fs::exists(p)) throw ConfigError(dir.string() + " is not a training run (no run.json)");
  return json::parse(read_text(p));
}

std::vector<int> sweep_fractions(const fs::path& dir) {
  const fs::path p = dir / "sweep.json";
  if (!fs::exists(p)) return {};
  return json::parse(read_text(p)).at("fractions").get<std::vector<int>>();
}

void check_comparable(const json& a, const json& b, const std::string& what) {
  for (const char* key : {"data_manifest_hash", "signature", "max_steps", "fraction"})
    if (a.at(key) != b.at(key))
      throw ConfigError("runs are not comparable" + what + ": '" + key + "' differs (" + a.at(key).dump() + " vs " +
                        b.at(key).dump() + ")");
}

}  // namespace

void cmd_compare(const fs::path& run_a, const fs::path& run_b, const fs::path& out) {
  const auto fa = sweep_fractions(run_a), fb = sweep_fractions(run_b);
  if (fa != fb) throw ConfigError("runs are not comparable: fraction sweeps differ");
  std::vector<std::pair<int, std::pair<fs::path, fs::path>>> pairs;
  if (fa.empty()) {
    pairs.push_back({100, {run_a, run_b}});
  } else {
    for (int p : fa) pairs.push_back({p, {run_a / fraction_dir(p), run_b / fraction_dir(p)}});
  }
  std::string csv = "fraction,step,a_loss_cls,a_loss_reg,a_loss_total,b_loss_cls,b_loss_reg,b_loss_total\n";
  for (const auto& [percent, dirs] : pairs) {
    const json ra = read_run(dirs.first), rb = read_run(dirs.second);
    check_comparable(ra, rb, fa.empty() ? "" : " at fraction " + std::to_string(percent));
    const auto ca = read_loss_csv(dirs.first / "loss.csv"), cb = read_loss_csv(dirs.second / "loss.csv");
    if (ca.size() != cb.size()) throw ConfigError("runs are not comparable: loss curves differ in length");
    const double frac = ra.at("fraction").get<double>();
    char buf[256];
    for (std::size_t i = 0; i < ca.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.4f,%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", frac,
                    static_cast<long long>(ca[i].step), ca[i].cls, ca[i].reg, ca[i].total, cb[i].cls, cb[i].reg,
                    cb[i].total);
      csv += buf;
    }
    const double la = final_loss(ca, 50), lb = final_loss(cb, 50);
    std::printf("fraction %.2f: final loss a=%.6f b=%.6f; a reaches b's final loss at step %lld, b reaches a's at %lld\n",
                frac, la, lb, static_cast<long long>(steps_to_reach(ca, lb, 50)),
                static_cast<long long>(steps_to_reach(cb, la, 50)));
  }
  write_text(out, csv);
}

}  // namespace mp3d
