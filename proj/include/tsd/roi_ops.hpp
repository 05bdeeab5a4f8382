#pragma once

#include <span>
#include <vector>

#include "tsd/geometry.hpp"
#include "tsd/tensor.hpp"

TSD_NAMESPACE_BEGIN

inline constexpr int kDefaultPoolSize = 7;
inline constexpr int kDefaultSamplesPerBin = 2;

// Pooled k×k×C grid for one proposal.
struct RoiFeature {
  Tensor grid;
  Box source_proposal;
};

// Proposal-wise translation in feature-map pixels, tensor shape [2] = (dx, dy).
struct DeltaR {
  Tensor value;
};

// Per-bin sample offsets in feature-map pixels, tensor shape [k×k×2] with
// (dx, dy) in the last axis.
struct DeltaC {
  Tensor offsets;
};

// Constant [N×4] tensor of (x1, y1, x2, y2) rows.
Tensor boxes_tensor(std::span<const Box> boxes);

// Core pooling kernel. Each of the k×k bins of every box averages
// samples_per_bin² bilinear reads at regular sub-positions, shifted by that
// bin's offset when `offsets` ([N×k×k×2]) is given. Reads outside the map are
// zero. Output is [N×k×k×C]. Differentiable w.r.t. the map, the box
// coordinates and the offsets. Boxes of non-positive width or height throw
// DegenerateBoxError.
Tensor roi_pool(const Tensor& map, const Tensor& boxes, const Tensor* offsets, int k, int samples_per_bin);

Tensor roi_align(const Tensor& map, std::span<const Box> boxes, int k = kDefaultPoolSize,
                 int samples_per_bin = kDefaultSamplesPerBin);
Tensor deformable_pool(const Tensor& map, std::span<const Box> boxes, const Tensor& offsets,
                       int k = kDefaultPoolSize, int samples_per_bin = kDefaultSamplesPerBin);

RoiFeature roi_align(const Tensor& map, const Box& p, int k = kDefaultPoolSize,
                     int samples_per_bin = kDefaultSamplesPerBin);
RoiFeature deformable_pool(const Tensor& map, const Box& p, const DeltaC& dc, int k = kDefaultPoolSize,
                           int samples_per_bin = kDefaultSamplesPerBin);

// P + (dx, dy) applied to both corners; width and height are unchanged.
Box translate_proposal(const Box& p, double dx, double dy);
// Differentiable variant: rows (x1+dx, y1+dy, x2+dx, y2+dy) from dr [N×2].
Tensor translate_boxes(std::span<const Box> boxes, const Tensor& dr);

// Pools P + ΔR; gradients reach ΔR through the bilinear reads.
RoiFeature translate_and_pool(const Tensor& map, const Box& p, const DeltaR& dr, int k = kDefaultPoolSize,
                              int samples_per_bin = kDefaultSamplesPerBin);

TSD_NAMESPACE_END
