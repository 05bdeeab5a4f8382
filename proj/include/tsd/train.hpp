#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsd/eval.hpp"
#include "tsd/heads.hpp"
#include "tsd/losses.hpp"
#include "tsd/synth.hpp"

TSD_NAMESPACE_BEGIN

struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double base_lr = 0.01;
  double warmup_start_lr = 0.0003125;  // base_lr / 32, the ratio of 0.00125 → 0.04
  double warmup_epochs = 1;
  std::vector<int> decay_epochs{12, 17};
  double momentum = 0.9;
  double weight_decay = 1e-4;
  PcConfig pc;
  HeadMode mode = HeadMode::tsd_pc;
  std::uint64_t seed = 0;
  int proposals_per_image = 128;
  double positive_fraction = 0.25;
  int jitter_per_gt = 16;
  bool flip = false;
  int backbone_channels = 64;
  HeadConfig head;

  // Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  // Decay epochs at 60% and 85% of the run.
  static std::vector<int> default_decay(int epochs);
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Per-parameter momentum buffers, created on first use.
struct SgdState {
  std::vector<std::vector<Real>> velocity;
};

// v ← momentum·v + grad + weight_decay·param; param ← param − lr·v. Every
// gradient is checked before anything is updated; a non-finite one throws
// NonFiniteError naming the parameter and step.
void sgd_step(ParamSet& params, SgdState& state, double lr, double momentum, double weight_decay, long step);

int steps_per_epoch(std::size_t num_images, int batch_size);
// Linear warmup from warmup_start_lr to base_lr, then base_lr·0.1 per passed
// decay epoch.
double lr_at(long step, const TrainConfig& cfg, int steps_per_epoch);

struct Model {
  TinyBackbone backbone;
  HeadParams head;
  HeadMode mode = HeadMode::sibling;

  static Model create(const HeadConfig& head, int backbone_channels, HeadMode mode, Rng& rng);
  void register_params(ParamSet& params) const;
};

// Checkpoint directory with the mode, head config and backbone width in the
// manifest metadata; load_model rebuilds the model from them.
void save_model(const std::filesystem::path& dir, const Model& model, const nlohmann::json& extra = {});
Model load_model(const std::filesystem::path& dir);

// Training proposals for one scene in the image frame: jittered boxes and
// random background boxes, labelled at T = 0.5, redrawn until both a positive
// and a negative exist, then subsampled to at most proposals_per_image with at
// most positive_fraction positives. Empty when the scene has no usable
// ground truth.
std::vector<LabeledProposal> sample_proposals(const Scene& scene, const TrainConfig& cfg, Rng& rng);

// Moves proposals and matched boxes into the stride-8 feature frame.
std::vector<LabeledProposal> to_feature_frame(std::span<const LabeledProposal> labels);

struct EpochMetrics {
  int epoch = 0;
  double lcls = 0, lloc = 0, ldcls = 0, ldloc = 0, mcls = 0, mloc = 0;
  double lr = 0;
};
nlohmann::json to_json(const EpochMetrics& m);

struct TrainResult {
  Model model;
  std::vector<EpochMetrics> metrics;
};

// Deterministic in (scenes, cfg). With an output directory, metrics.jsonl is
// appended after every epoch and the checkpoint is written at the end; a
// non-finite loss or gradient saves the last good parameters there and
// rethrows as NonFiniteError.
TrainResult train(std::span<const Scene> scenes, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const std::function<void(const EpochMetrics&)>& on_epoch = {});

struct InferConfig {
  double score_threshold = 0.05;
  double nms_threshold = 0.5;
  int max_detections = 100;
  int chunk = 256;  // proposals per forward pass
};

// Per-proposal head readout in the image frame: softmax over the C+1 classes
// and the regressed, clipped box for every foreground class.
struct ProposalPrediction {
  std::vector<double> probs;
  std::vector<Box> boxes;
};
std::vector<ProposalPrediction> predict(const Model& model, const Tensor& image, std::span<const Box> proposals,
                                        int chunk = 256);

// Detections in the image frame. TSD modes score with the P̂_c branch and
// regress from P̂_r; sibling mode uses the sibling head. Proposals default to
// the multi-scale grid.
std::vector<Detection> infer(const Model& model, const Tensor& image, const InferConfig& cfg = {});
std::vector<Detection> infer(const Model& model, const Tensor& image, std::span<const Box> proposals,
                             const InferConfig& cfg = {});

EvalReport evaluate_model(const Model& model, std::span<const Scene> scenes, const InferConfig& cfg = {});

TSD_NAMESPACE_END
