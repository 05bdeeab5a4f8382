#pragma once

#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsd/geometry.hpp"

TSD_NAMESPACE_BEGIN

inline const std::vector<double> kReportThresholds{0.5, 0.6, 0.7, 0.8, 0.9};

// One class on one image. Detections are taken by descending score (ties in
// input order); each claims the unclaimed ground truth of highest IoU (ties
// to the lowest index) when that IoU reaches the threshold. Returns the
// claimed ground-truth index per detection, in input order, or -1.
std::vector<int> greedy_match(std::span<const Box> dets, std::span<const double> scores, std::span<const Box> gts,
                              double threshold);

struct RankedHit {
  double score = 0;
  bool true_positive = false;
};

// Area under the all-points interpolated precision/recall curve. Hits are
// ranked by descending score, ties in input order. Zero ground truths give 0.
double average_precision(std::vector<RankedHit> hits, std::size_t num_gt);

struct EvalReport {
  int num_classes = 0;
  std::vector<double> thresholds;
  // ap[c][t]; empty for classes without ground truth, which are left out of mAP.
  std::vector<std::vector<std::optional<double>>> ap;
  std::vector<double> map;  // per threshold
  double coco_map = 0;      // mean mAP over 0.50:0.05:0.95

  double map_at(double threshold) const;
  nlohmann::json to_json() const;
};

EvalReport evaluate(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<Instance>>& ground_truth, int num_classes,
                    const std::vector<double>& thresholds = kReportThresholds);

TSD_NAMESPACE_END
