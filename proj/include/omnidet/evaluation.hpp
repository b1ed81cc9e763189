#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnidet/core.hpp"
#include "omnidet/data.hpp"

namespace omnidet::eval {

// AP at IoU 0.40..0.75 step 0.05, averaged over thresholds then classes;
// size buckets at the COCO 32^2 / 96^2 cutoffs.
inline constexpr std::array<double, 8> kIouThresholds = {0.40, 0.45, 0.50, 0.55,
                                                         0.60, 0.65, 0.70, 0.75};
inline constexpr double kSmallArea = 32.0 * 32.0;
inline constexpr double kMediumArea = 96.0 * 96.0;

inline double iou(const GroundTruthBox& a, const GroundTruthBox& b) {
  if (!a.well_ordered() || !b.well_ordered())
    throw std::invalid_argument("iou: degenerate box");
  double ix0 = std::max(a.x_min, b.x_min), iy0 = std::max(a.y_min, b.y_min);
  double ix1 = std::min(a.x_max, b.x_max), iy1 = std::min(a.y_max, b.y_max);
  double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
  double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

inline GroundTruthBox det_box(const Detection& d) {
  return {d.x_min, d.y_min, d.x_max, d.y_max, d.class_id};
}

// Greedy matching within one image and one class: detections in descending
// score order each claim the unmatched GT with highest IoU >= thresh.
// Flags are returned aligned with the internally sorted detections.
struct MatchResult {
  std::vector<Detection> sorted_dets;
  std::vector<char> tp;
};

inline MatchResult match_detections(std::vector<Detection> dets,
                                    const std::vector<GroundTruthBox>& gts,
                                    double iou_thresh) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  MatchResult res;
  res.tp.assign(dets.size(), 0);
  std::vector<char> used(gts.size(), 0);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = iou_thresh;
    int best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].class_id != dets[d].class_id) continue;
      double v = iou(det_box(dets[d]), gts[g]);
      if (v >= best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      used[best_g] = 1;
      res.tp[d] = 1;
    }
  }
  res.sorted_dets = std::move(dets);
  return res;
}

// Area under the precision-recall curve with all-point interpolation
// (precision envelope). Returns 1 for the vacuous zero-GT, zero-detection
// case; callers exclude such classes from averaging.
inline double average_precision(std::vector<char> flags, std::vector<double> scores,
                                int n_gt) {
  if (flags.size() != scores.size())
    throw std::invalid_argument("average_precision: flag/score size mismatch");
  if (n_gt == 0) return flags.empty() ? 1.0 : 0.0;
  std::vector<std::size_t> order(flags.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> precision, recall;
  double tp = 0, fp = 0;
  for (std::size_t i : order) {
    if (flags[i])
      ++tp;
    else
      ++fp;
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / n_gt);
  }
  // Envelope: precision at recall r is the max precision at recall >= r.
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[i] = std::max(precision[i], precision[i + 1]);
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct EvalResult {
  int num_classes = 0;
  // per class, per threshold; -1 marks a class with no GT at that restriction
  std::vector<std::array<double, 8>> per_class_ap;
  double map = 0;
  double ap_small = -1, ap_medium = -1, ap_large = -1;
  long long n_gt = 0, n_det = 0;

  double ap_at(double thresh) const {
    for (std::size_t t = 0; t < kIouThresholds.size(); ++t)
      if (std::fabs(kIouThresholds[t] - thresh) < 1e-9) {
        double sum = 0;
        int cnt = 0;
        for (const auto& row : per_class_ap)
          if (row[t] >= 0) {
            sum += row[t];
            ++cnt;
          }
        return cnt ? sum / cnt : 0.0;
      }
    throw std::invalid_argument("ap_at: unknown threshold");
  }
};

namespace detail {

enum class Bucket { ALL, SMALL, MEDIUM, LARGE };

inline bool in_bucket(double area, Bucket b) {
  switch (b) {
    case Bucket::ALL: return true;
    case Bucket::SMALL: return area < kSmallArea;
    case Bucket::MEDIUM: return area >= kSmallArea && area < kMediumArea;
    default: return area >= kMediumArea;
  }
}

// Per class x threshold AP pooled over images. In a size bucket, in-bucket
// GTs are matched first; a detection whose only match is an out-of-bucket GT
// is ignored rather than counted as a false positive.
inline double class_ap(const std::vector<std::vector<Detection>>& dets_per_image,
                       const std::vector<std::vector<GroundTruthBox>>& gts_per_image,
                       int class_id, double thresh, Bucket bucket, int* out_ngt) {
  std::vector<double> scores;
  std::vector<char> flags;
  int n_gt = 0;
  for (std::size_t img = 0; img < dets_per_image.size(); ++img) {
    std::vector<GroundTruthBox> in_b, out_b;
    for (const auto& g : gts_per_image[img]) {
      if (g.class_id != class_id) continue;
      (in_bucket(g.area(), bucket) ? in_b : out_b).push_back(g);
    }
    n_gt += static_cast<int>(in_b.size());
    std::vector<Detection> dets;
    for (const auto& d : dets_per_image[img])
      if (d.class_id == class_id) dets.push_back(d);
    MatchResult primary = match_detections(dets, in_b, thresh);
    // Second pass for ignores: unmatched detections tried against
    // out-of-bucket GTs.
    std::vector<Detection> unmatched;
    for (std::size_t i = 0; i < primary.sorted_dets.size(); ++i)
      if (!primary.tp[i]) unmatched.push_back(primary.sorted_dets[i]);
    MatchResult secondary = match_detections(unmatched, out_b, thresh);
    std::size_t u = 0;
    for (std::size_t i = 0; i < primary.sorted_dets.size(); ++i) {
      if (primary.tp[i]) {
        scores.push_back(primary.sorted_dets[i].score);
        flags.push_back(1);
      } else {
        if (!secondary.tp[u]) {  // matched-to-ignored detections drop out
          scores.push_back(primary.sorted_dets[i].score);
          flags.push_back(0);
        }
        ++u;
      }
    }
  }
  if (out_ngt) *out_ngt = n_gt;
  if (n_gt == 0) return -1.0;  // class absent at this restriction
  return average_precision(flags, scores, n_gt);
}

}  // namespace detail

inline EvalResult evaluate(const std::vector<std::vector<Detection>>& dets_per_image,
                           const std::vector<std::vector<GroundTruthBox>>& gts_per_image,
                           int num_classes) {
  if (dets_per_image.size() != gts_per_image.size())
    throw std::invalid_argument("evaluate: image count mismatch");
  for (const auto& img : dets_per_image)
    for (const auto& d : img)
      if (d.class_id < 0 || d.class_id >= num_classes)
        throw std::invalid_argument("evaluate: unknown class id");
  for (const auto& img : gts_per_image)
    for (const auto& g : img)
      if (g.class_id < 0 || g.class_id >= num_classes)
        throw std::invalid_argument("evaluate: unknown class id");

  EvalResult res;
  res.num_classes = num_classes;
  res.per_class_ap.assign(num_classes, {});
  for (const auto& img : gts_per_image) res.n_gt += static_cast<long long>(img.size());
  for (const auto& img : dets_per_image) res.n_det += static_cast<long long>(img.size());

  double map_sum = 0;
  int map_classes = 0;
  for (int c = 0; c < num_classes; ++c) {
    double class_sum = 0;
    bool present = false;
    for (std::size_t t = 0; t < kIouThresholds.size(); ++t) {
      double ap = detail::class_ap(dets_per_image, gts_per_image, c, kIouThresholds[t],
                                   detail::Bucket::ALL, nullptr);
      res.per_class_ap[c][t] = ap;
      if (ap >= 0) {
        present = true;
        class_sum += ap;
      }
    }
    if (present) {
      map_sum += class_sum / kIouThresholds.size();
      ++map_classes;
    }
  }
  res.map = map_classes ? map_sum / map_classes : 0.0;

  for (auto bucket : {detail::Bucket::SMALL, detail::Bucket::MEDIUM, detail::Bucket::LARGE}) {
    double sum = 0;
    int cnt = 0;
    for (int c = 0; c < num_classes; ++c) {
      double class_sum = 0;
      int class_cnt = 0;
      for (double t : kIouThresholds) {
        double ap = detail::class_ap(dets_per_image, gts_per_image, c, t, bucket, nullptr);
        if (ap >= 0) {
          class_sum += ap;
          ++class_cnt;
        }
      }
      if (class_cnt) {
        sum += class_sum / class_cnt;
        ++cnt;
      }
    }
    double v = cnt ? sum / cnt : -1.0;
    if (bucket == detail::Bucket::SMALL)
      res.ap_small = v;
    else if (bucket == detail::Bucket::MEDIUM)
      res.ap_medium = v;
    else
      res.ap_large = v;
  }
  return res;
}

// One row per class x threshold plus summary rows.
inline std::string to_csv(const EvalResult& r) {
  std::ostringstream os;
  os << "class,threshold,ap\n";
  for (int c = 0; c < r.num_classes; ++c)
    for (std::size_t t = 0; t < kIouThresholds.size(); ++t)
      os << c << "," << kIouThresholds[t] << "," << r.per_class_ap[c][t] << "\n";
  os << "summary,mAP," << r.map << "\n";
  os << "summary,AP_S," << r.ap_small << "\n";
  os << "summary,AP_M," << r.ap_medium << "\n";
  os << "summary,AP_L," << r.ap_large << "\n";
  os << "summary,n_gt," << r.n_gt << "\n";
  os << "summary,n_det," << r.n_det << "\n";
  return os.str();
}

// Detections file: one JSON record per line.
inline void write_detections(const std::string& path,
                             const std::map<int, std::vector<Detection>>& per_image) {
  std::ofstream f(path);
  for (const auto& [image_id, dets] : per_image)
    for (const auto& d : dets)
      f << nlohmann::json{{"image_id", image_id}, {"class_id", d.class_id},
                          {"x_min", d.x_min},    {"y_min", d.y_min},
                          {"x_max", d.x_max},    {"y_max", d.y_max},
                          {"score", d.score}}
               .dump()
        << "\n";
}

inline std::map<int, std::vector<Detection>> read_detections(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open detections file: " + path);
  std::map<int, std::vector<Detection>> per_image;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    Detection d{j.at("x_min"), j.at("y_min"), j.at("x_max"),
                j.at("y_max"), j.at("class_id"), j.at("score")};
    per_image[j.at("image_id").get<int>()].push_back(d);
  }
  return per_image;
}

// RAII gate opening hidden-sidecar access for evaluation code only.
struct SidecarGate {
  SidecarGate() { data::sidecar_access_allowed() = true; }
  ~SidecarGate() { data::sidecar_access_allowed() = false; }
  SidecarGate(const SidecarGate&) = delete;
};

// Assembles the full ground truth of a split (manifest FULL boxes plus the
// hidden sidecar of WEAK/UNLABELED samples). Evaluation-only by construction.
inline std::map<int, std::vector<GroundTruthBox>> load_eval_ground_truth(
    const std::string& dir) {
  SidecarGate gate;
  data::DatasetManifest manifest = data::load_manifest(dir);
  data::HiddenSidecar hidden = data::load_hidden_sidecar(dir);
  std::map<int, std::vector<GroundTruthBox>> gt;
  for (const auto& rec : manifest.records) {
    if (rec.granularity == Granularity::FULL)
      gt[rec.id] = rec.boxes;
    else if (auto it = hidden.find(rec.id); it != hidden.end())
      gt[rec.id] = it->second;
    else
      gt[rec.id] = {};
  }
  return gt;
}

}  // namespace omnidet::eval
