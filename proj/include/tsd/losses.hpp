#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tsd/geometry.hpp"
#include "tsd/heads.hpp"

TSD_NAMESPACE_BEGIN

inline constexpr double kPositiveIou = 0.5;

struct LabeledProposal {
  Box box;
  std::optional<Box> matched_gt;  // set for positives
  int label = 0;                  // foreground class, or the background index
  bool is_positive = false;
  double max_iou = 0;
};

// Progressive-constraint margins.
struct PcConfig {
  double m_c = 0.2;
  double m_r = 0.2;
};

// sibling: L_cls + L_loc. tsd: adds L^D_cls + L^D_loc (joint training).
// tsd_pc: adds the two margin terms as well.
enum class HeadMode { sibling, tsd, tsd_pc };

std::string to_string(HeadMode mode);
HeadMode parse_head_mode(const std::string& s);
inline bool uses_tsd(HeadMode m) { return m != HeadMode::sibling; }

// Matches each proposal to its highest-IoU ground truth (lowest index on
// ties); positive iff that IoU >= threshold.
std::vector<LabeledProposal> assign_labels(std::span<const Box> proposals, std::span<const Instance> gts,
                                           double threshold, int background_label);

// Regression target for one positive row: class slice to compare and the
// normalized target deltas.
struct LocTarget {
  std::size_t row = 0;
  int label = 0;
  BoxDeltas deltas{};
};

struct LocSlot {
  std::size_t row = 0;
  int label = 0;
};

// Smooth-L1 (transition 1) summed over the 4 coordinates of the matched
// class slice, averaged over targets. No targets gives a constant 0.
Tensor loc_loss(const Tensor& pred_deltas, std::span<const LocTarget> targets);
// Same, with normalized targets [P×4] given as a (possibly differentiable) tensor.
Tensor loc_loss(const Tensor& pred_deltas, std::span<const LocSlot> slots, const Tensor& targets);

// mean(relu(sibling − tsd + m_c)) over the given positive rows.
Tensor margin_cls(const Tensor& sibling_score_y, const Tensor& tsd_score_y, double m_c);

// mean over positives of relu(iou_sibling − iou_tsd + m_r). Negative rows are
// never read, so they carry no value and no gradient. No positives gives 0.
Tensor margin_loc(const Tensor& iou_sibling, const Tensor& iou_tsd, double m_r, std::span<const bool> is_positive);

// Differentiable encode of each ground truth against boxes [N×4]; gradient
// w.r.t. the boxes.
Tensor encode_boxes(const Tensor& boxes, std::span<const Box> gts);
// Differentiable decode of raw deltas [N×4] against boxes [N×4].
Tensor decode_boxes(const Tensor& boxes, const Tensor& deltas);
// IoU of each row of boxes [N×4] against its ground truth; gradient w.r.t. the
// boxes (zero where they do not overlap).
Tensor box_iou(const Tensor& boxes, std::span<const Box> gts);

// Softmax probability of each row's label: [N].
Tensor class_scores(const Tensor& logits, std::span<const int> labels);

struct LossTerms {
  Tensor cls, loc, tsd_cls, tsd_loc, margin_cls, margin_loc;
  Tensor total;
};

// Unit-weighted sum of the terms the mode enables; the rest are constant 0.
// Classification terms average over all proposals, the others over positives.
// Proposals, matched boxes and outputs must share one coordinate frame.
LossTerms total_loss(const HeadOutput& out, std::span<const LabeledProposal> labels, const HeadConfig& head,
                     HeadMode mode, const PcConfig& pc);

TSD_NAMESPACE_END
