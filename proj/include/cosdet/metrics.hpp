#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cosdet/boxes.hpp"
#include "cosdet/detector.hpp"

namespace cosdet {

inline constexpr double kMatchIou = 0.5;

// per-image, per-class greedy matching outcome
struct MatchResult {
  std::vector<bool> true_positive;  // per detection, in the given (ranked) order
  std::vector<bool> gt_matched;     // per ground-truth box
};

// detections must be sorted by descending score; each matches the
// highest-IoU unmatched ground truth at IoU >= threshold, else counts FP
inline MatchResult match_detections(const std::vector<Detection>& dets,
                                    const std::vector<Box>& gts, double iou_thresh = kMatchIou) {
  MatchResult res;
  res.true_positive.assign(dets.size(), false);
  res.gt_matched.assign(gts.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = 0.0;
    std::ptrdiff_t best_g = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (res.gt_matched[g]) continue;
      const double v = iou(dets[d].box, gts[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (best_g >= 0 && best >= iou_thresh) {
      res.true_positive[d] = true;
      res.gt_matched[static_cast<std::size_t>(best_g)] = true;
    }
  }
  return res;
}

// detections and ground truth pooled across all evaluated images/episodes;
// images are keyed so matching stays per image
struct EvalAccumulator {
  struct Entry {
    double score;
    bool tp;
    std::size_t order;  // global insertion order, the ranking tie-break
  };
  std::map<int, std::vector<Entry>> per_class;  // class id -> pooled detections
  std::map<int, int> gt_count;

  // one image's worth of detections for one class, already score-ranked
  void add(int class_id, const std::vector<Detection>& dets, const std::vector<Box>& gts) {
    gt_count[class_id] += static_cast<int>(gts.size());
    const MatchResult m = match_detections(dets, gts);
    auto& list = per_class[class_id];
    for (std::size_t d = 0; d < dets.size(); ++d)
      list.push_back(Entry{dets[d].score, m.true_positive[d], order_++});
  }

 private:
  std::size_t order_ = 0;
};

// 101-point interpolated average precision (COCO convention)
inline double ap_from_pr(const std::vector<double>& precision, const std::vector<double>& recall) {
  double ap = 0.0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    double best = 0.0;
    for (std::size_t k = 0; k < recall.size(); ++k)
      if (recall[k] >= r) best = std::max(best, precision[k]);
    ap += best;
  }
  return ap / 101.0;
}

struct ApReport {
  std::map<int, double> per_class_ap;
  std::vector<int> excluded_classes;  // evaluated classes with zero ground truth
  double mean_ap50 = 0.0;
};

inline ApReport ap50(const EvalAccumulator& acc) {
  ApReport report;
  double sum = 0.0;
  int counted = 0;
  std::set<int> classes;
  for (const auto& [c, _] : acc.gt_count) classes.insert(c);
  for (const auto& [c, _] : acc.per_class) classes.insert(c);
  for (int c : classes) {
    const auto itg = acc.gt_count.find(c);
    const int gts = itg == acc.gt_count.end() ? 0 : itg->second;
    if (gts == 0) {
      report.excluded_classes.push_back(c);
      continue;
    }
    std::vector<EvalAccumulator::Entry> entries;
    const auto itd = acc.per_class.find(c);
    if (itd != acc.per_class.end()) entries = itd->second;
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.order < b.order;
    });
    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const auto& e : entries) {
      e.tp ? ++tp : ++fp;
      precision.push_back(static_cast<double>(tp) / (tp + fp));
      recall.push_back(static_cast<double>(tp) / gts);
    }
    const double ap = entries.empty() ? 0.0 : ap_from_pr(precision, recall);
    report.per_class_ap[c] = ap;
    sum += ap;
    ++counted;
  }
  report.mean_ap50 = counted > 0 ? sum / counted : 0.0;
  return report;
}

struct MetricReport {
  ApReport ap;
  int num_episodes = 0;
  int way = 0;
  int shot = 0;
  std::string aggregation_mode;
};

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [c, ap] : r.ap.per_class_ap) per_class[std::to_string(c)] = ap;
  return nlohmann::json{{"per_class_ap", per_class},
                        {"mean_ap50", r.ap.mean_ap50},
                        {"excluded_classes", r.ap.excluded_classes},
                        {"num_episodes", r.num_episodes},
                        {"way", r.way},
                        {"shot", r.shot},
                        {"aggregation_mode", r.aggregation_mode}};
}

}  // namespace cosdet
