#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsd/geometry.hpp"
#include "tsd/nn.hpp"
#include "tsd/roi_ops.hpp"

TSD_NAMESPACE_BEGIN

struct HeadConfig {
  int num_classes = 3;  // foreground classes; logits carry one extra background slot
  int pool_size = kDefaultPoolSize;
  int samples_per_bin = kDefaultSamplesPerBin;
  int feature_channels = 64;
  int hidden = 1024;           // width of f, f_c and f_r
  int estimator_hidden = 256;  // hidden width of the offset estimators
  double gamma = 0.1;
  // Regression targets are divided by these before the loss, the usual
  // Faster R-CNN normalization; predictors emit normalized deltas.
  BoxDeltas delta_std{0.1, 0.1, 0.2, 0.2};

  int roi_dim() const { return pool_size * pool_size * feature_channels; }
  int background() const { return num_classes; }
};

void to_json(nlohmann::json& j, const HeadConfig& c);
void from_json(const nlohmann::json& j, HeadConfig& c);

// Two ReLU fully connected layers.
struct Mlp2 {
  LinearLayer fc0, fc1;
  Tensor forward(const Tensor& x) const { return relu(fc1.forward(relu(fc0.forward(x)))); }
};

struct HeadParams {
  HeadConfig config;
  // Offset estimators. The first layer is shared by F_r and F_c.
  LinearLayer estimator_shared;
  LinearLayer fr_rest[2];  // -> 256 -> 2
  LinearLayer fc_rest[2];  // -> 256 -> k·k·2
  // Sibling head: f, then 𝓒 and 𝓡 on the same hidden feature.
  Mlp2 sibling_extractor;
  LinearLayer sibling_cls, sibling_loc;
  // TSD head: f_c/𝓒 on the deformed proposal, f_r/𝓡 on the translated one.
  Mlp2 tsd_cls_extractor, tsd_loc_extractor;
  LinearLayer tsd_cls, tsd_loc;

  // Estimator output layers start at zero so the first pass has ΔR = ΔC = 0.
  static HeadParams create(const HeadConfig& config, Rng& rng);
  void register_params(ParamSet& params) const;
};

// Which branches a forward pass evaluates.
struct Branches {
  bool sibling = true;
  bool tsd = true;
};

// Batched outputs for N proposals of one feature map. Undefined tensors mark
// branches that were not evaluated.
struct HeadOutput {
  Tensor sibling_logits;  // [N×(C+1)]
  Tensor sibling_deltas;  // [N×4C], normalized
  Tensor tsd_logits;
  Tensor tsd_deltas;
  Tensor delta_r;             // [N×2]
  Tensor delta_c;             // [N×k×k×2]
  Tensor p_hat_r_tensor;      // [N×4], differentiable in ΔR
  std::vector<Box> p_hat_r;  // values of p_hat_r_tensor
};

// Row-wise concatenation of per-image outputs into one batch.
HeadOutput concat_outputs(const std::vector<HeadOutput>& parts);

// Flattens pooled [N×k×k×C] features to [N×k·k·C].
Tensor flatten_rois(const Tensor& pooled);

// ΔR = γ·F_r(F)·(w, h) for N flattened RoI features, proposals in the feature
// frame. `shared_hidden` is relu(estimator_shared(F)).
Tensor estimate_delta_r(const Tensor& shared_hidden, const HeadParams& params, std::span<const Box> proposals);
// ΔC = γ·F_c(F)·(w, h), reshaped to [N×k×k×2].
Tensor estimate_delta_c(const Tensor& shared_hidden, const HeadParams& params, std::span<const Box> proposals);
Tensor estimator_hidden(const Tensor& flat_features, const HeadParams& params);

DeltaR estimate_delta_r(const RoiFeature& feature, const HeadParams& params, const Box& p);
DeltaC estimate_delta_c(const RoiFeature& feature, const HeadParams& params, const Box& p);

struct SiblingOutput {
  Tensor logits;
  Tensor deltas;
};
SiblingOutput sibling_forward(const Tensor& flat_features, const HeadParams& params);
SiblingOutput sibling_forward(const RoiFeature& feature, const HeadParams& params);

// Pools P, estimates ΔR and ΔC, pools P̂_r = P + ΔR and the deformed P̂_c,
// and runs the requested branches. Proposals are in the feature frame.
HeadOutput tsd_forward(const Tensor& map, std::span<const Box> proposals, const HeadParams& params,
                       Branches branches = {});
HeadOutput tsd_forward(const Tensor& map, const Box& p, const HeadParams& params, Branches branches = {});

TSD_NAMESPACE_END
