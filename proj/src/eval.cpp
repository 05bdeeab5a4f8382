#include "tsd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

TSD_NAMESPACE_BEGIN

namespace {

std::vector<std::size_t> by_score(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

}  // namespace

std::vector<int> greedy_match(std::span<const Box> dets, std::span<const double> scores, std::span<const Box> gts,
                              double threshold) {
  if (dets.size() != scores.size()) throw std::invalid_argument("greedy_match: one score per detection");
  std::vector<int> match(dets.size(), -1);
  std::vector<bool> claimed(gts.size(), false);
  for (std::size_t d : by_score(scores)) {
    int best = -1;
    double best_iou = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g]) continue;
      const double v = iou(dets[d], gts[g]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= threshold) {
      match[d] = best;
      claimed[best] = true;
    }
  }
  return match;
}

double average_precision(std::vector<RankedHit> hits, std::size_t num_gt) {
  if (num_gt == 0) return 0;
  std::stable_sort(hits.begin(), hits.end(), [](const RankedHit& a, const RankedHit& b) { return a.score > b.score; });
  std::vector<double> precision(hits.size());
  std::size_t tp = 0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    if (hits[k].true_positive) ++tp;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  // Precision envelope from the right. Recall grows by exactly 1/num_gt at
  // each true positive, so the area is the envelope summed over those ranks.
  for (std::size_t k = hits.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double area = 0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    if (hits[k].true_positive) area += precision[k];
  }
  return area / static_cast<double>(num_gt);
}

double EvalReport::map_at(double threshold) const {
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (std::abs(thresholds[i] - threshold) < 1e-9) return map[i];
  }
  throw std::out_of_range("EvalReport: threshold not evaluated");
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per_class = nlohmann::json::array();
  for (int c = 0; c < num_classes; ++c) {
    nlohmann::json entry{{"class", c}};
    if (ap[c].empty()) {
      entry["absent"] = true;
    } else {
      nlohmann::json v = nlohmann::json::object();
      for (std::size_t t = 0; t < thresholds.size(); ++t) v[std::to_string(thresholds[t]).substr(0, 4)] = *ap[c][t];
      entry["ap"] = v;
    }
    per_class.push_back(entry);
  }
  nlohmann::json maps = nlohmann::json::object();
  for (std::size_t t = 0; t < thresholds.size(); ++t) maps[std::to_string(thresholds[t]).substr(0, 4)] = map[t];
  return {{"thresholds", thresholds}, {"map", maps}, {"coco_map", coco_map}, {"per_class", per_class}};
}

EvalReport evaluate(const std::vector<std::vector<Detection>>& detections,
                    const std::vector<std::vector<Instance>>& ground_truth, int num_classes,
                    const std::vector<double>& thresholds) {
  if (detections.size() != ground_truth.size()) throw std::invalid_argument("evaluate: one detection list per image");
  for (double t : thresholds) {
    if (!(t > 0 && t < 1)) throw std::invalid_argument("evaluate: thresholds must lie in (0, 1)");
  }

  // mAP for one threshold, filling per-class APs when `ap` is given.
  auto run = [&](double thr, std::vector<std::optional<double>>* ap) {
    double total = 0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
      std::vector<RankedHit> hits;
      std::size_t num_gt = 0;
      for (std::size_t img = 0; img < detections.size(); ++img) {
        std::vector<Box> boxes, gts;
        std::vector<double> scores;
        for (const auto& d : detections[img]) {
          if (d.label != c) continue;
          boxes.push_back(d.box);
          scores.push_back(d.score);
        }
        for (const auto& g : ground_truth[img]) {
          if (g.label == c) gts.push_back(g.box);
        }
        num_gt += gts.size();
        const auto match = greedy_match(boxes, scores, gts, thr);
        for (std::size_t i : by_score(scores)) hits.push_back({scores[i], match[i] >= 0});
      }
      if (num_gt == 0) continue;
      const double v = average_precision(std::move(hits), num_gt);
      if (ap) (*ap)[c] = v;
      total += v;
      ++present;
    }
    return present ? total / present : 0.0;
  };

  EvalReport r;
  r.num_classes = num_classes;
  r.thresholds = thresholds;
  std::vector<std::vector<std::optional<double>>> by_threshold;
  for (double t : thresholds) {
    std::vector<std::optional<double>> ap(num_classes);
    r.map.push_back(run(t, &ap));
    by_threshold.push_back(std::move(ap));
  }
  r.ap.assign(num_classes, {});
  for (int c = 0; c < num_classes; ++c) {
    if (by_threshold.empty() || !by_threshold[0][c]) continue;
    for (std::size_t t = 0; t < thresholds.size(); ++t) r.ap[c].push_back(by_threshold[t][c]);
  }
  double coco = 0;
  const auto ct = coco_thresholds();
  for (double t : ct) coco += run(t, nullptr);
  r.coco_map = coco / static_cast<double>(ct.size());
  return r;
}

TSD_NAMESPACE_END
