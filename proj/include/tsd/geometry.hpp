#pragma once

#include <array>
#include <stdexcept>
#include <vector>

#include "tsd/precision.hpp"

TSD_NAMESPACE_BEGIN

class DegenerateBoxError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Axis-aligned box in continuous pixel coordinates, corners (x1, y1)-(x2, y2).
// No +1 pixel convention: width is x2 − x1.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 >= x1 && y2 >= y1; }

  friend bool operator==(const Box&, const Box&) = default;
};

// (dx, dy, dw, dh) in the usual center/log-size parameterization.
using BoxDeltas = std::array<double, 4>;

// Ground-truth object.
struct Instance {
  Box box;
  int label = 0;
};

struct Detection {
  Box box;
  int label = 0;
  double score = 0;
};

double iou(const Box& a, const Box& b);

// Throws DegenerateBoxError when either box has non-positive width or height.
BoxDeltas encode_deltas(const Box& proposal, const Box& target);
Box decode_deltas(const Box& proposal, const BoxDeltas& deltas);

Box clip_box(const Box& b, double image_w, double image_h);

// Greedy per-class suppression. Output is score-descending with ties kept in
// input order; a box is dropped when its IoU with a kept box of the same
// class exceeds the threshold.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold = 0.5);

TSD_NAMESPACE_END
