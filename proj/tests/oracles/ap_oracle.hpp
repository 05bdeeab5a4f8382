#pragma once

// Exhaustive reference for one class on one image. Enumerates every one-to-one
// assignment of detections to ground truths and keeps the one that satisfies
// the greedy rule stated declaratively: taking detections by descending score
// (ties by index), each takes the unclaimed ground truth of highest IoU (ties
// by lowest index) when that IoU reaches the threshold, and stays unmatched
// otherwise.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace oracle {

struct OBox {
  double x1, y1, x2, y2;
};

inline double box_iou(const OBox& a, const OBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline std::vector<std::size_t> score_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// True when `assign` (per detection: gt index or -1) obeys the greedy rule.
inline bool satisfies_greedy(const std::vector<OBox>& dets, const std::vector<double>& scores,
                             const std::vector<OBox>& gts, double thr, const std::vector<int>& assign) {
  std::vector<bool> claimed(gts.size(), false);
  for (std::size_t d : score_order(scores)) {
    int best = -1;
    double best_iou = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g]) continue;
      const double v = box_iou(dets[d], gts[g]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    const int expected = (best >= 0 && best_iou >= thr) ? best : -1;
    if (assign[d] != expected) return false;
    if (expected >= 0) claimed[expected] = true;
  }
  return true;
}

// All injective partial maps detections → ground truths.
inline void enumerate_assignments(std::size_t n_det, std::size_t n_gt, std::vector<int>& cur, std::vector<bool>& used,
                                  std::vector<std::vector<int>>& out) {
  if (cur.size() == n_det) {
    out.push_back(cur);
    return;
  }
  cur.push_back(-1);
  enumerate_assignments(n_det, n_gt, cur, used, out);
  cur.pop_back();
  for (std::size_t g = 0; g < n_gt; ++g) {
    if (used[g]) continue;
    used[g] = true;
    cur.push_back(static_cast<int>(g));
    enumerate_assignments(n_det, n_gt, cur, used, out);
    cur.pop_back();
    used[g] = false;
  }
}

struct BruteForceResult {
  std::vector<int> assignment;  // per detection, input order
  double ap = 0;
  std::size_t candidates = 0;  // assignments enumerated
};

// AP as (1/G)·Σ over true positives at rank k of max precision at ranks ≥ k,
// the all-points interpolated area written as a sum over recall steps.
inline double ap_from_flags(const std::vector<bool>& tp_in_rank_order, std::size_t num_gt) {
  if (num_gt == 0) return 0;
  const std::size_t n = tp_in_rank_order.size();
  std::vector<double> precision(n);
  std::size_t tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (tp_in_rank_order[k]) ++tp;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  double ap = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!tp_in_rank_order[k]) continue;
    double best = 0;
    for (std::size_t j = k; j < n; ++j) best = std::max(best, precision[j]);
    ap += best;
  }
  return ap / static_cast<double>(num_gt);
}

inline BruteForceResult brute_force_ap(const std::vector<OBox>& dets, const std::vector<double>& scores,
                                       const std::vector<OBox>& gts, double thr) {
  std::vector<std::vector<int>> all;
  std::vector<int> cur;
  std::vector<bool> used(gts.size(), false);
  enumerate_assignments(dets.size(), gts.size(), cur, used, all);
  BruteForceResult r;
  r.candidates = all.size();
  int valid = 0;
  for (const auto& a : all) {
    if (satisfies_greedy(dets, scores, gts, thr, a)) {
      r.assignment = a;
      ++valid;
    }
  }
  if (valid != 1) throw std::logic_error("brute_force_ap: greedy rule must single out one assignment");
  std::vector<bool> flags;
  for (std::size_t d : score_order(scores)) flags.push_back(r.assignment[d] >= 0);
  r.ap = ap_from_flags(flags, gts.size());
  return r;
}

}  // namespace oracle
