#include "tsd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "tsd/kink.hpp"
#include "tsd/ops.hpp"

TSD_NAMESPACE_BEGIN

using detail::Node;

std::string to_string(HeadMode mode) {
  switch (mode) {
    case HeadMode::sibling: return "sibling";
    case HeadMode::tsd: return "tsd";
    case HeadMode::tsd_pc: return "tsd+pc";
  }
  return "?";
}

HeadMode parse_head_mode(const std::string& s) {
  if (s == "sibling") return HeadMode::sibling;
  if (s == "tsd") return HeadMode::tsd;
  if (s == "tsd+pc") return HeadMode::tsd_pc;
  throw std::invalid_argument("unknown mode '" + s + "' (expected sibling, tsd or tsd+pc)");
}

std::vector<LabeledProposal> assign_labels(std::span<const Box> proposals, std::span<const Instance> gts,
                                           double threshold, int background_label) {
  if (!(threshold > 0 && threshold < 1)) throw std::invalid_argument("assign_labels: threshold must be in (0, 1)");
  std::vector<LabeledProposal> out;
  out.reserve(proposals.size());
  for (const Box& p : proposals) {
    LabeledProposal lp{p, std::nullopt, background_label, false, 0.0};
    int best = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(p, gts[g].box);
      if (best < 0 || v > lp.max_iou) {
        best = static_cast<int>(g);
        lp.max_iou = v;
      }
    }
    if (best >= 0 && lp.max_iou >= threshold) {
      lp.is_positive = true;
      lp.matched_gt = gts[best].box;
      lp.label = gts[best].label;
    }
    out.push_back(lp);
  }
  return out;
}

Tensor loc_loss(const Tensor& pred_deltas, std::span<const LocTarget> targets) {
  if (targets.empty()) return Tensor::scalar(0);
  std::vector<LocSlot> slots;
  std::vector<Real> values;
  for (const LocTarget& t : targets) {
    slots.push_back({t.row, t.label});
    for (double d : t.deltas) values.push_back(static_cast<Real>(d));
  }
  return loc_loss(pred_deltas, slots, Tensor::from({static_cast<int>(targets.size()), 4}, std::move(values)));
}

Tensor loc_loss(const Tensor& pred_deltas, std::span<const LocSlot> slots, const Tensor& targets) {
  if (slots.empty()) return Tensor::scalar(0);
  if (pred_deltas.rank() != 2 || pred_deltas.dim(1) % 4 != 0) {
    throw ShapeError("loc_loss: predictions must be [N×4C], got " + shape_str(pred_deltas.shape()));
  }
  if (targets.shape() != Shape{static_cast<int>(slots.size()), 4}) {
    throw ShapeError("loc_loss: targets " + shape_str(targets.shape()) + " for " + std::to_string(slots.size()) +
                     " slots");
  }
  const int cols = pred_deltas.dim(1);
  std::vector<std::size_t> idx;
  for (const LocSlot& t : slots) {
    if (t.row >= static_cast<std::size_t>(pred_deltas.dim(0)) || t.label < 0 || 4 * t.label >= cols) {
      throw std::out_of_range("loc_loss: target row/label out of range");
    }
    for (int j = 0; j < 4; ++j) idx.push_back(t.row * cols + 4 * t.label + j);
  }
  Tensor diff = sub(gather(pred_deltas, idx), reshape(targets, {static_cast<int>(idx.size())}));
  return scale(sum(smooth_l1(diff, 1)), Real(1) / static_cast<Real>(slots.size()));
}

Tensor margin_cls(const Tensor& sibling_score_y, const Tensor& tsd_score_y, double m_c) {
  return mean(relu(add_scalar(sub(sibling_score_y, tsd_score_y), static_cast<Real>(m_c))));
}

Tensor margin_loc(const Tensor& iou_sibling, const Tensor& iou_tsd, double m_r, std::span<const bool> is_positive) {
  if (iou_sibling.shape() != iou_tsd.shape() || is_positive.size() != iou_sibling.numel()) {
    throw ShapeError("margin_loc: IoU tensors and positive mask disagree");
  }
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < is_positive.size(); ++i) {
    if (is_positive[i]) pos.push_back(i);
  }
  if (pos.empty()) return Tensor::scalar(0);
  return mean(relu(add_scalar(sub(gather(iou_sibling, pos), gather(iou_tsd, pos)), static_cast<Real>(m_r))));
}

Tensor encode_boxes(const Tensor& boxes, std::span<const Box> gts) {
  if (boxes.rank() != 2 || boxes.dim(1) != 4 || gts.size() != static_cast<std::size_t>(boxes.dim(0))) {
    throw ShapeError("encode_boxes: need [N×4] boxes and N ground truths");
  }
  const int n = boxes.dim(0);
  std::vector<Box> gt(gts.begin(), gts.end());
  Buffer out(boxes.numel());
  const auto b = boxes.data();
  for (int i = 0; i < n; ++i) {
    const BoxDeltas d = encode_deltas({b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]}, gt[i]);
    for (int j = 0; j < 4; ++j) out[4 * i + j] = static_cast<Real>(d[j]);
  }
  return detail::make_result({n, 4}, std::move(out), {boxes}, [n, gt = std::move(gt)](Node& self) {
    Node& pb = *self.parents[0];
    for (int i = 0; i < n; ++i) {
      for (int axis = 0; axis < 2; ++axis) {
        const double lo = pb.value[4 * i + axis], hi = pb.value[4 * i + 2 + axis];
        const double size = hi - lo;
        const double offset = (axis == 0 ? gt[i].cx() : gt[i].cy()) - 0.5 * (lo + hi);
        const double g_shift = self.grad[4 * i + axis];
        const double g_log = self.grad[4 * i + 2 + axis];
        // shift = offset / size, log = ln(gt_size / size)
        pb.grad[4 * i + axis] += static_cast<Real>(g_shift * (-0.5 / size + offset / (size * size)) + g_log / size);
        pb.grad[4 * i + 2 + axis] +=
            static_cast<Real>(g_shift * (-0.5 / size - offset / (size * size)) - g_log / size);
      }
    }
  });
}

Tensor decode_boxes(const Tensor& boxes, const Tensor& deltas) {
  if (boxes.rank() != 2 || boxes.dim(1) != 4 || boxes.shape() != deltas.shape()) {
    throw ShapeError("decode_boxes: need matching [N×4] boxes and deltas");
  }
  const int n = boxes.dim(0);
  Buffer out(boxes.numel());
  const auto b = boxes.data();
  const auto d = deltas.data();
  for (int i = 0; i < n; ++i) {
    for (int axis = 0; axis < 2; ++axis) {  // 0: x, 1: y
      const Real lo = b[4 * i + axis], hi = b[4 * i + 2 + axis];
      const Real size = hi - lo;
      const Real center = lo + Real(0.5) * size + d[4 * i + axis] * size;
      const Real half = Real(0.5) * size * std::exp(d[4 * i + 2 + axis]);
      out[4 * i + axis] = center - half;
      out[4 * i + 2 + axis] = center + half;
    }
  }
  return detail::make_result({n, 4}, std::move(out), {boxes, deltas}, [n](Node& self) {
    Node& pb = *self.parents[0];
    Node& pd = *self.parents[1];
    for (int i = 0; i < n; ++i) {
      for (int axis = 0; axis < 2; ++axis) {
        const Real size = pb.value[4 * i + 2 + axis] - pb.value[4 * i + axis];
        const Real shift = pd.value[4 * i + axis];
        const Real e = std::exp(pd.value[4 * i + 2 + axis]);
        const Real g_lo = self.grad[4 * i + axis];
        const Real g_hi = self.grad[4 * i + 2 + axis];
        if (pb.requires_grad) {
          pb.grad[4 * i + axis] += g_lo * (Real(0.5) - shift + Real(0.5) * e) + g_hi * (Real(0.5) - shift - Real(0.5) * e);
          pb.grad[4 * i + 2 + axis] +=
              g_lo * (Real(0.5) + shift - Real(0.5) * e) + g_hi * (Real(0.5) + shift + Real(0.5) * e);
        }
        if (pd.requires_grad) {
          pd.grad[4 * i + axis] += (g_lo + g_hi) * size;
          pd.grad[4 * i + 2 + axis] += (g_hi - g_lo) * Real(0.5) * size * e;
        }
      }
    }
  });
}

Tensor box_iou(const Tensor& boxes, std::span<const Box> gts) {
  if (boxes.rank() != 2 || boxes.dim(1) != 4 || gts.size() != static_cast<std::size_t>(boxes.dim(0))) {
    throw ShapeError("box_iou: need [N×4] boxes and N ground truths");
  }
  const int n = boxes.dim(0);
  std::vector<Box> gt(gts.begin(), gts.end());
  Buffer out(n);
  const auto b = boxes.data();
  for (int i = 0; i < n; ++i) {
    const Box pred{b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]};
    const Box& g = gt[i];
    for (double d : {pred.x1 - g.x1, pred.y1 - g.y1, pred.x2 - g.x2, pred.y2 - g.y2, pred.x2 - g.x1, g.x2 - pred.x1,
                     pred.y2 - g.y1, g.y2 - pred.y1}) {
      KinkMonitor::note(d, d > 0);
    }
    out[i] = static_cast<Real>(iou(pred, g));
  }
  return detail::make_result({n}, std::move(out), {boxes}, [n, gt = std::move(gt)](Node& self) {
    Node& pb = *self.parents[0];
    for (int i = 0; i < n; ++i) {
      const double x1 = pb.value[4 * i], y1 = pb.value[4 * i + 1], x2 = pb.value[4 * i + 2], y2 = pb.value[4 * i + 3];
      const Box& g = gt[i];
      const double iw = std::min(x2, g.x2) - std::max(x1, g.x1);
      const double ih = std::min(y2, g.y2) - std::max(y1, g.y1);
      if (iw <= 0 || ih <= 0) continue;  // no overlap: IoU is flat at 0
      const double inter = iw * ih;
      const double uni = (x2 - x1) * (y2 - y1) + g.area() - inter;
      // d inter / d coord
      const double di_x1 = x1 > g.x1 ? -ih : 0.0;
      const double di_x2 = x2 < g.x2 ? ih : 0.0;
      const double di_y1 = y1 > g.y1 ? -iw : 0.0;
      const double di_y2 = y2 < g.y2 ? iw : 0.0;
      // d area / d coord
      const double da_x1 = -(y2 - y1), da_x2 = y2 - y1, da_y1 = -(x2 - x1), da_y2 = x2 - x1;
      auto d_iou = [&](double di, double da) { return (di * uni - inter * (da - di)) / (uni * uni); };
      const double g_out = self.grad[i];
      pb.grad[4 * i] += static_cast<Real>(g_out * d_iou(di_x1, da_x1));
      pb.grad[4 * i + 1] += static_cast<Real>(g_out * d_iou(di_y1, da_y1));
      pb.grad[4 * i + 2] += static_cast<Real>(g_out * d_iou(di_x2, da_x2));
      pb.grad[4 * i + 3] += static_cast<Real>(g_out * d_iou(di_y2, da_y2));
    }
  });
}

Tensor class_scores(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || labels.size() != static_cast<std::size_t>(logits.dim(0))) {
    throw ShapeError("class_scores: need [N×C] logits and N labels");
  }
  const std::size_t cols = logits.dim(1);
  std::vector<std::size_t> idx;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) throw std::out_of_range("class_scores: label");
    idx.push_back(r * cols + labels[r]);
  }
  return gather(softmax_rows(logits), idx);
}

namespace {

BoxDeltas normalized_target(const Box& proposal, const Box& gt, const BoxDeltas& std_dev) {
  BoxDeltas d = encode_deltas(proposal, gt);
  for (int j = 0; j < 4; ++j) d[j] /= std_dev[j];
  return d;
}

// Raw (unnormalized) [P×4] deltas of each positive row's class slice.
Tensor positive_raw_deltas(const Tensor& deltas, std::span<const std::size_t> rows,
                           std::span<const LabeledProposal> labels, const BoxDeltas& std_dev) {
  const std::size_t cols = deltas.dim(1);
  std::vector<std::size_t> idx;
  Buffer factors;
  for (std::size_t r : rows) {
    for (int j = 0; j < 4; ++j) {
      idx.push_back(r * cols + 4 * labels[r].label + j);
      factors.push_back(static_cast<Real>(std_dev[j]));
    }
  }
  return reshape(mul_const(gather(deltas, idx), factors), {static_cast<int>(rows.size()), 4});
}

}  // namespace

LossTerms total_loss(const HeadOutput& out, std::span<const LabeledProposal> labels, const HeadConfig& head,
                     HeadMode mode, const PcConfig& pc) {
  if (pc.m_c < 0 || pc.m_r < 0) throw std::invalid_argument("total_loss: margins must be non-negative");
  std::vector<int> cls_labels;
  std::vector<std::size_t> positives;
  std::vector<Box> proposals, gts;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    cls_labels.push_back(labels[i].label);
    if (labels[i].is_positive) {
      positives.push_back(i);
      proposals.push_back(labels[i].box);
      gts.push_back(*labels[i].matched_gt);
    }
  }

  LossTerms t;
  const Tensor zero = Tensor::scalar(0);
  t.cls = mean(softmax_cross_entropy(out.sibling_logits, cls_labels));
  std::vector<LocTarget> sib_targets;
  for (std::size_t r : positives) {
    sib_targets.push_back({r, labels[r].label, normalized_target(labels[r].box, *labels[r].matched_gt, head.delta_std)});
  }
  t.loc = loc_loss(out.sibling_deltas, sib_targets);
  t.tsd_cls = t.tsd_loc = t.margin_cls = t.margin_loc = zero;

  if (uses_tsd(mode)) {
    t.tsd_cls = mean(softmax_cross_entropy(out.tsd_logits, cls_labels));
    // TSD regression targets are encoded against the translated proposal
    // P̂_r and stay differentiable in ΔR.
    if (!positives.empty()) {
      std::vector<LocSlot> slots;
      std::vector<std::size_t> p_hat_idx;
      Buffer inv_std;
      for (std::size_t r : positives) {
        slots.push_back({r, labels[r].label});
        for (int j = 0; j < 4; ++j) {
          p_hat_idx.push_back(4 * r + j);
          inv_std.push_back(static_cast<Real>(1.0 / head.delta_std[j]));
        }
      }
      Tensor p_hat = reshape(gather(out.p_hat_r_tensor, p_hat_idx), {static_cast<int>(positives.size()), 4});
      t.tsd_loc = loc_loss(out.tsd_deltas, slots, mul_const(encode_boxes(p_hat, gts), inv_std));
    }
  }

  if (mode == HeadMode::tsd_pc && !positives.empty()) {
    std::vector<int> pos_labels;
    for (std::size_t r : positives) pos_labels.push_back(labels[r].label);
    std::vector<std::size_t> rows_sib, rows_tsd;
    const std::size_t cls_cols = out.sibling_logits.dim(1);
    for (std::size_t r : positives) rows_sib.push_back(r * cls_cols + labels[r].label);
    Tensor sib_prob = gather(softmax_rows(out.sibling_logits), rows_sib);
    Tensor tsd_prob = gather(softmax_rows(out.tsd_logits), rows_sib);
    t.margin_cls = margin_cls(sib_prob, tsd_prob, pc.m_c);

    std::vector<std::size_t> p_hat_rows;
    for (std::size_t r : positives) {
      for (int j = 0; j < 4; ++j) p_hat_rows.push_back(4 * r + j);
    }
    const int n_pos = static_cast<int>(positives.size());
    Tensor p_hat = reshape(gather(out.p_hat_r_tensor, p_hat_rows), {n_pos, 4});
    Tensor iou_sib = box_iou(decode_boxes(boxes_tensor(proposals),
                                          positive_raw_deltas(out.sibling_deltas, positives, labels, head.delta_std)),
                             gts);
    Tensor iou_tsd =
        box_iou(decode_boxes(p_hat, positive_raw_deltas(out.tsd_deltas, positives, labels, head.delta_std)), gts);
    auto pos_mask = std::make_unique<bool[]>(positives.size());
    std::fill_n(pos_mask.get(), positives.size(), true);
    t.margin_loc = margin_loc(iou_sib, iou_tsd, pc.m_r, std::span<const bool>(pos_mask.get(), positives.size()));
  }

  t.total = add(add(add(t.cls, t.loc), add(t.tsd_cls, t.tsd_loc)), add(t.margin_cls, t.margin_loc));
  return t;
}

TSD_NAMESPACE_END
