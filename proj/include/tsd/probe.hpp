#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsd/train.hpp"

TSD_NAMESPACE_BEGIN

// Square grid of translation responses, row-major, row = y offset. Cell (r, c)
// holds the response at ε = ((c − h)·stride_x, (r − h)·stride_y) with
// h = (n − 1)/2, so the unshifted proposal is the centre cell and the grid
// spans ±0.5·(w, h) of the instance.
struct SensitivityMap {
  int n = 0;
  double stride_x = 0, stride_y = 0;
  Box center;
  int label = 0;
  std::vector<double> raw;     // unnormalized responses
  std::vector<double> values;  // min-max normalized to [0, 1]
};

// Min-max normalization. A constant grid maps to all zeros, except a single
// cell, which maps to 1.
std::vector<double> normalize_min_max(std::span<const double> values);

struct ProbeResult {
  SensitivityMap cls_map;  // probability of the gt class
  SensitivityMap loc_map;  // IoU of the regressed gt-class box with the gt
  std::vector<bool> iou_mask;  // IoU(P + ε, gt) ≥ iou_threshold per cell
  double iou_threshold = kPositiveIou;
};

// Sweeps a gt-sized proposal over the translation grid around instance
// `instance` of `scene`. grid_n must be odd and positive; a bad instance index
// throws std::out_of_range.
ProbeResult sensitivity_scan(const Model& model, const Scene& scene, int instance, int grid_n);

struct GridCell {
  int row = 0, col = 0;
};
// First maximum in row-major order.
GridCell argmax_cell(const SensitivityMap& map);

struct Divergence {
  GridCell cls_argmax, loc_argmax;
  double argmax_distance = 0;  // pixels
  double rank_correlation = 0;  // Spearman, average ranks on ties; 0 if a map is constant
};

// Both maps must share n and strides, else ShapeError.
Divergence divergence(const SensitivityMap& cls_map, const SensitivityMap& loc_map);

// Ranks starting at 1, tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> values);
double spearman(std::span<const double> a, std::span<const double> b);

// PREFIX.cls.pgm, PREFIX.loc.pgm and PREFIX.stats.json.
nlohmann::json probe_stats(const ProbeResult& result, const Divergence& d);
void write_probe(const std::filesystem::path& prefix, const ProbeResult& result, const nlohmann::json& stats);

TSD_NAMESPACE_END
