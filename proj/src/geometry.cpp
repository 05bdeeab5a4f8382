#include "tsd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

TSD_NAMESPACE_BEGIN

double iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

BoxDeltas encode_deltas(const Box& proposal, const Box& target) {
  if (!(proposal.width() > 0 && proposal.height() > 0)) throw DegenerateBoxError("encode_deltas: degenerate proposal");
  if (!(target.width() > 0 && target.height() > 0)) throw DegenerateBoxError("encode_deltas: degenerate target");
  return {(target.cx() - proposal.cx()) / proposal.width(), (target.cy() - proposal.cy()) / proposal.height(),
          std::log(target.width() / proposal.width()), std::log(target.height() / proposal.height())};
}

Box decode_deltas(const Box& proposal, const BoxDeltas& d) {
  const double w = proposal.width() * std::exp(d[2]);
  const double h = proposal.height() * std::exp(d[3]);
  const double cx = proposal.cx() + d[0] * proposal.width();
  const double cy = proposal.cy() + d[1] * proposal.height();
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box clip_box(const Box& b, double image_w, double image_h) {
  if (!(image_w > 0 && image_h > 0)) throw std::invalid_argument("clip_box: image size must be positive");
  auto clamp = [](double v, double hi) { return std::clamp(v, 0.0, hi); };
  Box c{clamp(b.x1, image_w), clamp(b.y1, image_h), clamp(b.x2, image_w), clamp(b.y2, image_h)};
  c.x2 = std::max(c.x1, c.x2);
  c.y2 = std::max(c.y1, c.y2);
  return c;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  if (!(iou_threshold > 0 && iou_threshold <= 1)) throw std::invalid_argument("nms: threshold must be in (0, 1]");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const Detection& d = dets[i];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.label == d.label && iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

TSD_NAMESPACE_END
