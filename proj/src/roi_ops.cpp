#include "tsd/roi_ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tsd/bilinear.hpp"
#include "tsd/ops.hpp"

TSD_NAMESPACE_BEGIN

using detail::Node;

Tensor boxes_tensor(std::span<const Box> boxes) {
  if (boxes.empty()) throw ShapeError("boxes_tensor: no boxes");
  std::vector<Real> v;
  v.reserve(boxes.size() * 4);
  for (const Box& b : boxes) {
    v.insert(v.end(), {static_cast<Real>(b.x1), static_cast<Real>(b.y1), static_cast<Real>(b.x2),
                       static_cast<Real>(b.y2)});
  }
  return Tensor::from({static_cast<int>(boxes.size()), 4}, std::move(v));
}

Tensor roi_pool(const Tensor& map, const Tensor& boxes, const Tensor* offsets, int k, int samples_per_bin) {
  if (map.rank() != 3) throw ShapeError("roi_pool: map must be H×W×C, got " + shape_str(map.shape()));
  if (boxes.rank() != 2 || boxes.dim(1) != 4) throw ShapeError("roi_pool: boxes must be N×4");
  if (k < 1 || samples_per_bin < 1) throw std::invalid_argument("roi_pool: k and samples_per_bin must be >= 1");
  const int n_rois = boxes.dim(0);
  if (offsets && offsets->shape() != Shape{n_rois, k, k, 2}) {
    throw ShapeError("roi_pool: offsets " + shape_str(offsets->shape()) + " do not match " +
                     shape_str({n_rois, k, k, 2}));
  }
  const int height = map.dim(0), width = map.dim(1), channels = map.dim(2);
  const int s = samples_per_bin;
  const Real inv_count = Real(1) / static_cast<Real>(s * s);
  const auto box = boxes.data();
  for (int n = 0; n < n_rois; ++n) {
    if (!std::all_of(box.begin() + 4 * n, box.begin() + 4 * n + 4, [](Real v) { return std::isfinite(v); })) {
      throw NonFiniteError("roi_pool: proposal " + std::to_string(n) + " has a non-finite coordinate");
    }
    if (!(box[4 * n + 2] > box[4 * n] && box[4 * n + 3] > box[4 * n + 1])) {
      throw DegenerateBoxError("roi_pool: proposal " + std::to_string(n) + " has non-positive area");
    }
  }

  // Relative sample position inside the box for bin b, sub-sample q.
  auto frac = [k, s](int b, int q) { return (static_cast<Real>(b) + (static_cast<Real>(q) + Real(0.5)) / s) / k; };
  auto offset_at = [offsets, k](const Buffer* off, int n, int i, int j, int axis) -> Real {
    if (!offsets) return Real(0);
    return (*off)[((static_cast<std::size_t>(n) * k + i) * k + j) * 2 + axis];
  };

  const Buffer& mv = map.node()->value;
  const Buffer* ov = offsets ? &offsets->node()->value : nullptr;
  Buffer out(static_cast<std::size_t>(n_rois) * k * k * channels, Real(0));
  for (int n = 0; n < n_rois; ++n) {
    const Real x1 = box[4 * n], y1 = box[4 * n + 1];
    const Real bw = box[4 * n + 2] - x1, bh = box[4 * n + 3] - y1;
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        const Real ox = offset_at(ov, n, i, j, 0);
        const Real oy = offset_at(ov, n, i, j, 1);
        Real* acc = out.data() + ((static_cast<std::size_t>(n) * k + i) * k + j) * channels;
        for (int sy = 0; sy < s; ++sy) {
          const Real y = y1 + frac(i, sy) * bh + oy;
          for (int sx = 0; sx < s; ++sx) {
            const Real x = x1 + frac(j, sx) * bw + ox;
            const BilinearTaps taps = bilinear_taps(height, width, x, y);
            for (int c4 = 0; c4 < 4; ++c4) {
              if (taps.index[c4] < 0) continue;
              const Real* v = mv.data() + taps.index[c4] * channels;
              const Real w = taps.weight[c4];
              for (int c = 0; c < channels; ++c) acc[c] += w * v[c];
            }
          }
        }
        for (int c = 0; c < channels; ++c) acc[c] *= inv_count;
      }
    }
  }

  std::vector<Tensor> parents{map, boxes};
  if (offsets) parents.push_back(*offsets);
  const bool has_offsets = offsets != nullptr;
  return detail::make_result(
      {n_rois, k, k, channels}, std::move(out), std::move(parents),
      [=](Node& self) {
        Node& pm = *self.parents[0];
        Node& pbox = *self.parents[1];
        Node* poff = has_offsets ? self.parents[2].get() : nullptr;
        const bool want_coords = pbox.requires_grad || (poff && poff->requires_grad);
        for (int n = 0; n < n_rois; ++n) {
          const Real x1 = pbox.value[4 * n], y1 = pbox.value[4 * n + 1];
          const Real bw = pbox.value[4 * n + 2] - x1, bh = pbox.value[4 * n + 3] - y1;
          for (int i = 0; i < k; ++i) {
            for (int j = 0; j < k; ++j) {
              const std::size_t cell = (static_cast<std::size_t>(n) * k + i) * k + j;
              const Real ox = poff ? poff->value[cell * 2] : Real(0);
              const Real oy = poff ? poff->value[cell * 2 + 1] : Real(0);
              const Real* g = self.grad.data() + cell * channels;
              Real d_ox = 0, d_oy = 0, d_x1 = 0, d_x2 = 0, d_y1 = 0, d_y2 = 0;
              for (int sy = 0; sy < s; ++sy) {
                const Real ty = frac(i, sy);
                const Real y = y1 + ty * bh + oy;
                for (int sx = 0; sx < s; ++sx) {
                  const Real tx = frac(j, sx);
                  const Real x = x1 + tx * bw + ox;
                  const BilinearTaps taps = bilinear_taps(height, width, x, y);
                  Real dx = 0, dy = 0;
                  for (int c4 = 0; c4 < 4; ++c4) {
                    if (taps.index[c4] < 0) continue;
                    const std::size_t base = static_cast<std::size_t>(taps.index[c4]) * channels;
                    if (pm.requires_grad) {
                      const Real w = taps.weight[c4] * inv_count;
                      for (int c = 0; c < channels; ++c) pm.grad[base + c] += w * g[c];
                    }
                    if (want_coords) {
                      Real dot = 0;
                      for (int c = 0; c < channels; ++c) dot += g[c] * pm.value[base + c];
                      dx += taps.dweight_dx[c4] * dot;
                      dy += taps.dweight_dy[c4] * dot;
                    }
                  }
                  dx *= inv_count;
                  dy *= inv_count;
                  d_ox += dx;
                  d_oy += dy;
                  d_x1 += dx * (1 - tx);
                  d_x2 += dx * tx;
                  d_y1 += dy * (1 - ty);
                  d_y2 += dy * ty;
                }
              }
              if (poff && poff->requires_grad) {
                poff->grad[cell * 2] += d_ox;
                poff->grad[cell * 2 + 1] += d_oy;
              }
              if (pbox.requires_grad) {
                pbox.grad[4 * n] += d_x1;
                pbox.grad[4 * n + 1] += d_y1;
                pbox.grad[4 * n + 2] += d_x2;
                pbox.grad[4 * n + 3] += d_y2;
              }
            }
          }
        }
      });
}

Tensor roi_align(const Tensor& map, std::span<const Box> boxes, int k, int samples_per_bin) {
  return roi_pool(map, boxes_tensor(boxes), nullptr, k, samples_per_bin);
}

Tensor deformable_pool(const Tensor& map, std::span<const Box> boxes, const Tensor& offsets, int k,
                       int samples_per_bin) {
  return roi_pool(map, boxes_tensor(boxes), &offsets, k, samples_per_bin);
}

RoiFeature roi_align(const Tensor& map, const Box& p, int k, int samples_per_bin) {
  Tensor pooled = roi_align(map, std::span<const Box>(&p, 1), k, samples_per_bin);
  return {reshape(pooled, {k, k, map.dim(2)}), p};
}

RoiFeature deformable_pool(const Tensor& map, const Box& p, const DeltaC& dc, int k, int samples_per_bin) {
  if (dc.offsets.shape() != Shape{k, k, 2}) {
    throw ShapeError("deformable_pool: offsets " + shape_str(dc.offsets.shape()) + " for pool size " +
                     std::to_string(k));
  }
  Tensor pooled = deformable_pool(map, std::span<const Box>(&p, 1), reshape(dc.offsets, {1, k, k, 2}), k,
                                  samples_per_bin);
  return {reshape(pooled, {k, k, map.dim(2)}), p};
}

Box translate_proposal(const Box& p, double dx, double dy) { return {p.x1 + dx, p.y1 + dy, p.x2 + dx, p.y2 + dy}; }

Tensor translate_boxes(std::span<const Box> boxes, const Tensor& dr) {
  const int n = static_cast<int>(boxes.size());
  if (dr.shape() != Shape{n, 2}) throw ShapeError("translate_boxes: dr must be [N×2], got " + shape_str(dr.shape()));
  Buffer out(static_cast<std::size_t>(n) * 4);
  const auto d = dr.data();
  for (int i = 0; i < n; ++i) {
    out[4 * i] = static_cast<Real>(boxes[i].x1) + d[2 * i];
    out[4 * i + 1] = static_cast<Real>(boxes[i].y1) + d[2 * i + 1];
    out[4 * i + 2] = static_cast<Real>(boxes[i].x2) + d[2 * i];
    out[4 * i + 3] = static_cast<Real>(boxes[i].y2) + d[2 * i + 1];
  }
  return detail::make_result({n, 4}, std::move(out), {dr}, [n](Node& self) {
    Node& p = *self.parents[0];
    for (int i = 0; i < n; ++i) {
      p.grad[2 * i] += self.grad[4 * i] + self.grad[4 * i + 2];
      p.grad[2 * i + 1] += self.grad[4 * i + 1] + self.grad[4 * i + 3];
    }
  });
}

RoiFeature translate_and_pool(const Tensor& map, const Box& p, const DeltaR& dr, int k, int samples_per_bin) {
  Tensor moved = translate_boxes(std::span<const Box>(&p, 1), reshape(dr.value, {1, 2}));
  Tensor pooled = roi_pool(map, moved, nullptr, k, samples_per_bin);
  const auto d = dr.value.data();
  return {reshape(pooled, {k, k, map.dim(2)}), translate_proposal(p, d[0], d[1])};
}

TSD_NAMESPACE_END
