#include "mp3d/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mp3d/errors.hpp"

namespace mp3d {

std::vector<MatchedPrediction> match_detections(const ImageDetections& preds, const ImageBoxes& gts,
                                                double iou_thresh) {
  std::vector<MatchedPrediction> all;
  for (const auto& [image, dets] : preds)
    for (std::size_t i = 0; i < dets.size(); ++i) {
      MatchedPrediction m;
      m.image = image;
      m.index = static_cast<int>(i);
      m.score = dets[i].score;
      all.push_back(m);
    }
  // `preds` is name-ordered, so a stable sort realizes the documented tie order.
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::map<std::string, std::vector<char>> used;
  for (auto& m : all) {
    auto git = gts.find(m.image);
    if (git == gts.end()) continue;
    auto& u = used[m.image];
    u.resize(git->second.size(), 0);
    const Box& box = preds.at(m.image)[static_cast<std::size_t>(m.index)].box;
    int best = -1;
    double best_iou = -1;
    for (std::size_t g = 0; g < git->second.size(); ++g) {
      if (u[g]) continue;
      const double v = iou(box, git->second[g]);
      if (v >= iou_thresh && v > best_iou) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      u[static_cast<std::size_t>(best)] = 1;
      m.tp = true;
      m.gt = best;
      m.iou = best_iou;
    }
  }
  return all;
}

namespace {

struct Step {
  std::int64_t tp, fp;
};

// Cumulative (TP, FP) after each group of equal scores, highest scores first.
std::vector<Step> threshold_steps(const std::vector<bool>& tp, const std::vector<double>& scores) {
  if (tp.size() != scores.size()) throw ShapeError("flags and scores differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  std::vector<Step> steps;
  Step cur{0, 0};
  for (std::size_t k = 0; k < order.size(); ++k) {
    (tp[order[k]] ? cur.tp : cur.fp) += 1;
    if (k + 1 == order.size() || scores[order[k + 1]] != scores[order[k]]) steps.push_back(cur);
  }
  return steps;
}

}  // namespace

std::vector<double> froc_sensitivity(const std::vector<bool>& tp, const std::vector<double>& scores,
                                     std::int64_t num_images, std::int64_t num_gts,
                                     const std::vector<double>& fp_rates) {
  if (num_images < 1) throw ConfigError("FROC needs at least one image");
  std::vector<double> out(fp_rates.size(), 0.0);
  if (num_gts < 1) return out;
  const auto steps = threshold_steps(tp, scores);
  for (std::size_t r = 0; r < fp_rates.size(); ++r) {
    std::int64_t best = 0;
    for (const auto& s : steps)
      if (static_cast<double>(s.fp) / static_cast<double>(num_images) <= fp_rates[r]) best = std::max(best, s.tp);
    out[r] = static_cast<double>(best) / static_cast<double>(num_gts);
  }
  return out;
}

double average_precision(const std::vector<bool>& tp, const std::vector<double>& scores, std::int64_t num_gts) {
  if (num_gts < 1) return 0.0;
  const auto steps = threshold_steps(tp, scores);
  std::vector<double> recall, precision;
  for (const auto& s : steps) {
    recall.push_back(static_cast<double>(s.tp) / static_cast<double>(num_gts));
    precision.push_back(static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev = 0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return ap;
}

EvalReport evaluate(const ImageDetections& preds, const ImageBoxes& gts, const std::vector<std::string>& images,
                    double iou_thresh, const std::vector<double>& fp_rates) {
  const std::set<std::string> listed(images.begin(), images.end());
  if (listed.empty()) throw ConfigError("evaluation needs at least one image");
  for (const auto& [image, dets] : preds)
    if (!dets.empty() && !listed.count(image)) throw ConfigError("prediction for unknown image " + image);
  ImageBoxes gt_listed;
  EvalReport r;
  r.fp_rates = fp_rates;
  for (const auto& image : listed) {
    auto it = gts.find(image);
    if (it == gts.end()) continue;
    gt_listed[image] = it->second;
    r.num_gts += static_cast<std::int64_t>(it->second.size());
  }
  r.num_images = static_cast<std::int64_t>(listed.size());
  r.matches = match_detections(preds, gt_listed, iou_thresh);
  std::vector<bool> flags;
  std::vector<double> scores;
  for (const auto& m : r.matches) {
    flags.push_back(m.tp);
    scores.push_back(m.score);
    r.num_tp += m.tp ? 1 : 0;
  }
  r.num_predictions = static_cast<std::int64_t>(r.matches.size());
  r.sensitivity = froc_sensitivity(flags, scores, r.num_images, r.num_gts, r.fp_rates);
  r.ap50 = average_precision(flags, scores, r.num_gts);
  return r;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  nlohmann::ordered_json sens = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < fp_rates.size(); ++i) {
    char key[32];
    std::snprintf(key, sizeof(key), "%g", fp_rates[i]);
    sens[key] = sensitivity[i];
  }
  j["sensitivity_at_fps"] = sens;
  j["ap_at_05"] = ap50;
  j["num_images"] = num_images;
  j["num_gts"] = num_gts;
  j["num_predictions"] = num_predictions;
  j["num_tp"] = num_tp;
  auto details = nlohmann::ordered_json::array();
  for (const auto& m : matches)
    details.push_back({{"image", m.image}, {"index", m.index}, {"score", m.score}, {"tp", m.tp}, {"gt", m.gt},
                       {"iou", m.iou}});
  j["matches"] = details;
  return j.dump(2) + "\n";
}

std::string EvalReport::csv_header() const {
  std::string h;
  char buf[32];
  for (double r : fp_rates) {
    std::snprintf(buf, sizeof(buf), "sens@%g,", r);
    h += buf;
  }
  return h + "ap50\n";
}

std::string EvalReport::csv_row() const {
  std::string row;
  char buf[32];
  for (double s : sensitivity) {
    std::snprintf(buf, sizeof(buf), "%.4f,", s);
    row += buf;
  }
  std::snprintf(buf, sizeof(buf), "%.4f\n", ap50);
  return row + buf;
}

void write_predictions_csv(const std::filesystem::path& path, const ImageDetections& preds) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << "image_id,x1,y1,x2,y2,score\n";
  char buf[160];
  for (const auto& [image, dets] : preds)
    for (const auto& d : dets) {
      std::snprintf(buf, sizeof(buf), ",%.4f,%.4f,%.4f,%.4f,%.4f\n", d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.score);
      f << image << buf;
    }
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

ImageDetections read_predictions_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open predictions " + path.string());
  std::string line;
  if (!std::getline(f, line) || line.rfind("image_id,x1,y1,x2,y2,score", 0) != 0)
    throw FormatError(path.string() + ": expected header image_id,x1,y1,x2,y2,score");
  ImageDetections out;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (cells.size() != 6) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    try {
      out[cells[0]].push_back(
          {{std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3]), std::stod(cells[4])}, std::stod(cells[5])});
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

}  // namespace mp3d
