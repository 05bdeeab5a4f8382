#include "tsd/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

TSD_NAMESPACE_BEGIN

std::vector<double> normalize_min_max(std::span<const double> values) {
  if (values.size() == 1) return {1.0};
  std::vector<double> out(values.size(), 0.0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double min = *lo, range = *hi - *lo;
  if (!(range > 0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - min) / range;
  return out;
}

ProbeResult sensitivity_scan(const Model& model, const Scene& scene, int instance, int grid_n) {
  if (grid_n < 1 || grid_n % 2 == 0) throw std::invalid_argument("sensitivity_scan: grid size must be odd and positive");
  if (instance < 0 || instance >= static_cast<int>(scene.instances.size())) {
    throw std::out_of_range("sensitivity_scan: instance " + std::to_string(instance) + " out of range (scene has " +
                            std::to_string(scene.instances.size()) + ")");
  }
  const Instance& gt = scene.instances[instance];
  if (gt.label < 0 || gt.label >= model.head.config.num_classes) {
    throw std::out_of_range("sensitivity_scan: instance label outside the model's classes");
  }
  const int half = (grid_n - 1) / 2;
  const double sx = half > 0 ? 0.5 * gt.box.width() / half : 0.0;
  const double sy = half > 0 ? 0.5 * gt.box.height() / half : 0.0;

  ProbeResult result;
  std::vector<Box> proposals;
  for (int r = 0; r < grid_n; ++r) {
    for (int c = 0; c < grid_n; ++c) {
      const double ex = (c - half) * sx, ey = (r - half) * sy;
      const Box p{gt.box.x1 + ex, gt.box.y1 + ey, gt.box.x2 + ex, gt.box.y2 + ey};
      proposals.push_back(p);
      result.iou_mask.push_back(iou(p, gt.box) >= result.iou_threshold);
    }
  }
  const auto preds = predict(model, scene.image, proposals);
  for (auto* m : {&result.cls_map, &result.loc_map}) {
    m->n = grid_n;
    m->stride_x = sx;
    m->stride_y = sy;
    m->center = gt.box;
    m->label = gt.label;
  }
  for (const auto& p : preds) {
    result.cls_map.raw.push_back(p.probs[gt.label]);
    result.loc_map.raw.push_back(iou(p.boxes[gt.label], gt.box));
  }
  result.cls_map.values = normalize_min_max(result.cls_map.raw);
  result.loc_map.values = normalize_min_max(result.loc_map.raw);
  return result;
}

GridCell argmax_cell(const SensitivityMap& map) {
  if (map.values.empty()) throw ShapeError("argmax_cell: empty map");
  const auto it = std::max_element(map.values.begin(), map.values.end());
  const auto i = static_cast<int>(it - map.values.begin());
  return {i / map.n, i % map.n};
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("spearman: length mismatch");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(ra.size());
  if (n == 0) return 0;
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (!(saa > 0) || !(sbb > 0)) return 0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

Divergence divergence(const SensitivityMap& cls_map, const SensitivityMap& loc_map) {
  const auto cells = static_cast<std::size_t>(cls_map.n) * cls_map.n;
  if (cls_map.n != loc_map.n || cls_map.stride_x != loc_map.stride_x || cls_map.stride_y != loc_map.stride_y ||
      cls_map.values.size() != cells || loc_map.values.size() != cells) {
    throw ShapeError("divergence: maps do not share grid geometry");
  }
  Divergence d;
  d.cls_argmax = argmax_cell(cls_map);
  d.loc_argmax = argmax_cell(loc_map);
  const double dx = (d.cls_argmax.col - d.loc_argmax.col) * cls_map.stride_x;
  const double dy = (d.cls_argmax.row - d.loc_argmax.row) * cls_map.stride_y;
  d.argmax_distance = std::hypot(dx, dy);
  d.rank_correlation = spearman(cls_map.values, loc_map.values);
  return d;
}

nlohmann::json probe_stats(const ProbeResult& result, const Divergence& d) {
  const auto& cm = result.cls_map;
  auto cell = [](const GridCell& c) { return nlohmann::json{{"row", c.row}, {"col", c.col}}; };
  std::vector<int> mask(result.iou_mask.begin(), result.iou_mask.end());
  auto range = [](const std::vector<double>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return nlohmann::json{{"min", *lo}, {"max", *hi}};
  };
  return {{"grid", cm.n},
          {"stride_x", cm.stride_x},
          {"stride_y", cm.stride_y},
          {"label", cm.label},
          {"gt_box", {cm.center.x1, cm.center.y1, cm.center.x2, cm.center.y2}},
          {"cls_argmax", cell(d.cls_argmax)},
          {"loc_argmax", cell(d.loc_argmax)},
          {"argmax_distance", d.argmax_distance},
          {"rank_correlation", d.rank_correlation},
          {"cls_raw_range", range(cm.raw)},
          {"loc_raw_range", range(result.loc_map.raw)},
          {"iou_threshold", result.iou_threshold},
          {"iou_mask", mask},
          {"cls_map", cm.values},
          {"loc_map", result.loc_map.values}};
}

void write_probe(const std::filesystem::path& prefix, const ProbeResult& result, const nlohmann::json& stats) {
  const std::string base = prefix.string();
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  write_pgm(base + ".cls.pgm", result.cls_map.values, result.cls_map.n, result.cls_map.n);
  write_pgm(base + ".loc.pgm", result.loc_map.values, result.loc_map.n, result.loc_map.n);
  std::ofstream f(base + ".stats.json");
  if (!f) throw std::runtime_error("cannot write " + base + ".stats.json");
  f << stats.dump(2) << "\n";
}

TSD_NAMESPACE_END
