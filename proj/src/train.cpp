#include "tsd/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tsd/checkpoint.hpp"

TSD_NAMESPACE_BEGIN

namespace {

// Caps exp() of predicted log-size deltas.
const double kMaxLogScale = std::log(1000.0 / 16.0);

enum Stream : std::uint64_t { kInitStream, kOrderStream, kProposalStream, kFlipStream };

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: epochs and batch_size must be positive");
  if (!(warmup_start_lr < base_lr)) throw std::invalid_argument("TrainConfig: warmup_start_lr must be below base_lr");
  if (warmup_epochs < 0) throw std::invalid_argument("TrainConfig: warmup_epochs must be non-negative");
  for (std::size_t i = 1; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] <= decay_epochs[i - 1]) throw std::invalid_argument("TrainConfig: decay epochs must increase");
  }
  if (pc.m_c < 0 || pc.m_r < 0) throw std::invalid_argument("TrainConfig: margins must be non-negative");
  if (proposals_per_image < 2 || !(positive_fraction > 0 && positive_fraction < 1) || jitter_per_gt < 1) {
    throw std::invalid_argument("TrainConfig: bad proposal sampling settings");
  }
}

std::vector<int> TrainConfig::default_decay(int epochs) {
  std::vector<int> d;
  for (double f : {0.6, 0.85}) {
    const int e = static_cast<int>(std::lround(f * epochs));
    if (e >= 1 && e < epochs && (d.empty() || e > d.back())) d.push_back(e);
  }
  return d;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"base_lr", c.base_lr},
       {"warmup_start_lr", c.warmup_start_lr},
       {"warmup_epochs", c.warmup_epochs},
       {"decay_epochs", c.decay_epochs},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"m_c", c.pc.m_c},
       {"m_r", c.pc.m_r},
       {"mode", to_string(c.mode)},
       {"seed", c.seed},
       {"proposals_per_image", c.proposals_per_image},
       {"positive_fraction", c.positive_fraction},
       {"jitter_per_gt", c.jitter_per_gt},
       {"flip", c.flip},
       {"backbone_channels", c.backbone_channels},
       {"head", c.head}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.base_lr = j.value("base_lr", d.base_lr);
  c.warmup_start_lr = j.value("warmup_start_lr", d.warmup_start_lr);
  c.warmup_epochs = j.value("warmup_epochs", d.warmup_epochs);
  c.decay_epochs = j.value("decay_epochs", d.decay_epochs);
  c.momentum = j.value("momentum", d.momentum);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.pc.m_c = j.value("m_c", d.pc.m_c);
  c.pc.m_r = j.value("m_r", d.pc.m_r);
  c.mode = parse_head_mode(j.value("mode", to_string(d.mode)));
  c.seed = j.value("seed", d.seed);
  c.proposals_per_image = j.value("proposals_per_image", d.proposals_per_image);
  c.positive_fraction = j.value("positive_fraction", d.positive_fraction);
  c.jitter_per_gt = j.value("jitter_per_gt", d.jitter_per_gt);
  c.flip = j.value("flip", d.flip);
  c.backbone_channels = j.value("backbone_channels", d.backbone_channels);
  c.head = j.value("head", d.head);
}

void sgd_step(ParamSet& params, SgdState& state, double lr, double momentum, double weight_decay, long step) {
  auto& items = params.items();
  for (const auto& p : items) {
    for (Real g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        std::ostringstream os;
        os << "non-finite gradient in " << p.name << " at step " << step;
        throw NonFiniteError(os.str());
      }
    }
  }
  if (state.velocity.empty()) {
    for (const auto& p : items) state.velocity.emplace_back(p.tensor.numel(), Real(0));
  }
  if (state.velocity.size() != items.size()) throw std::logic_error("sgd_step: optimizer state does not match parameters");
  const Real mu = static_cast<Real>(momentum), wd = static_cast<Real>(weight_decay), eta = static_cast<Real>(lr);
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor& t = items[i].tensor;
    auto v = std::span<Real>(state.velocity[i]);
    auto w = t.mutable_data();
    const auto g = t.grad();
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = mu * v[k] + g[k] + wd * w[k];
      w[k] -= eta * v[k];
    }
  }
}

int steps_per_epoch(std::size_t num_images, int batch_size) {
  return static_cast<int>((num_images + batch_size - 1) / batch_size);
}

double lr_at(long step, const TrainConfig& cfg, int steps_per_epoch) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  const double warmup_steps = cfg.warmup_epochs * steps_per_epoch;
  if (step < warmup_steps) return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * (step / warmup_steps);
  double lr = cfg.base_lr;
  for (int e : cfg.decay_epochs) {
    if (step >= static_cast<long>(e) * steps_per_epoch) lr *= 0.1;
  }
  return lr;
}

Model Model::create(const HeadConfig& head, int backbone_channels, HeadMode mode, Rng& rng) {
  HeadConfig h = head;
  h.feature_channels = backbone_channels;
  Model m;
  m.backbone = TinyBackbone::create(backbone_channels, rng);
  m.head = HeadParams::create(h, rng);
  m.mode = mode;
  return m;
}

void Model::register_params(ParamSet& params) const {
  backbone.register_params(params);
  head.register_params(params);
}

void save_model(const std::filesystem::path& dir, const Model& model, const nlohmann::json& extra) {
  ParamSet params;
  model.register_params(params);
  nlohmann::json meta = extra.is_object() ? extra : nlohmann::json::object();
  meta["mode"] = to_string(model.mode);
  meta["head"] = model.head.config;
  meta["backbone_channels"] = static_cast<int>(model.backbone.layers.back().weight.dim(0));
  save_checkpoint(dir, params, meta);
}

Model load_model(const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  const auto& meta = manifest.at("meta");
  Rng rng(0);
  Model m = Model::create(meta.at("head").get<HeadConfig>(), meta.at("backbone_channels").get<int>(),
                          parse_head_mode(meta.at("mode").get<std::string>()), rng);
  ParamSet params;
  m.register_params(params);
  load_checkpoint(dir, params);
  return m;
}

std::vector<LabeledProposal> sample_proposals(const Scene& scene, const TrainConfig& cfg, Rng& rng) {
  std::vector<Box> gts;
  for (const auto& inst : scene.instances) gts.push_back(inst.box);
  if (gts.empty()) return {};
  JitterConfig jc;
  jc.image_w = scene.image.dim(1);
  jc.image_h = scene.image.dim(0);
  std::vector<LabeledProposal> labels;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const auto boxes = jitter_proposals(gts, cfg.jitter_per_gt, rng, jc);
    labels = assign_labels(boxes, scene.instances, kPositiveIou, cfg.head.num_classes);
    const auto pos = std::count_if(labels.begin(), labels.end(), [](const auto& l) { return l.is_positive; });
    if (pos > 0 && pos < static_cast<long>(labels.size())) break;
    labels.clear();
  }
  if (labels.empty()) return {};

  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i].is_positive ? pos : neg).push_back(i);
  rng.shuffle(pos);
  rng.shuffle(neg);
  const auto max_pos = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.positive_fraction * cfg.proposals_per_image));
  pos.resize(std::min(pos.size(), max_pos));
  neg.resize(std::min(neg.size(), cfg.proposals_per_image - pos.size()));
  std::vector<std::size_t> keep(pos);
  keep.insert(keep.end(), neg.begin(), neg.end());
  std::sort(keep.begin(), keep.end());
  std::vector<LabeledProposal> out;
  for (std::size_t i : keep) out.push_back(labels[i]);
  return out;
}

std::vector<LabeledProposal> to_feature_frame(std::span<const LabeledProposal> labels) {
  std::vector<LabeledProposal> out(labels.begin(), labels.end());
  for (auto& l : out) {
    l.box = image_to_feature(l.box);
    if (l.matched_gt) l.matched_gt = image_to_feature(*l.matched_gt);
  }
  return out;
}

nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"lcls", m.lcls}, {"lloc", m.lloc}, {"ldcls", m.ldcls}, {"ldloc", m.ldloc},
          {"mcls", m.mcls},   {"mloc", m.mloc}, {"lr", m.lr}};
}

TrainResult train(std::span<const Scene> scenes, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& out_dir,
                  const std::function<void(const EpochMetrics&)>& on_epoch) {
  cfg.validate();
  if (scenes.empty()) throw std::invalid_argument("train: empty corpus");
  Rng init_rng(Rng::derive(cfg.seed, kInitStream));
  Rng order_rng(Rng::derive(cfg.seed, kOrderStream));
  Rng proposal_rng(Rng::derive(cfg.seed, kProposalStream));
  Rng flip_rng(Rng::derive(cfg.seed, kFlipStream));

  TrainResult result;
  result.model = Model::create(cfg.head, cfg.backbone_channels, cfg.mode, init_rng);
  Model& model = result.model;
  ParamSet params;
  model.register_params(params);
  SgdState state;
  const HeadConfig& head_cfg = model.head.config;
  const Branches branches{true, uses_tsd(cfg.mode)};

  std::ofstream metrics_log;
  nlohmann::json meta{{"train", cfg}};
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    metrics_log.open(*out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics_log) throw std::runtime_error("cannot write " + (*out_dir / "metrics.jsonl").string());
  }
  auto abort_with = [&](const std::string& why) {
    if (out_dir) save_model(*out_dir, model, meta);
    throw NonFiniteError(why);
  };

  const int spe = steps_per_epoch(scenes.size(), cfg.batch_size);
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = lr_at(step, cfg, spe);
    int images = 0;
    for (int b = 0; b < spe; ++b) {
      const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch_size;
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      params.zero_grad();
      const Real inv_batch = Real(1) / static_cast<Real>(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        const Scene* scene = &scenes[order[i]];
        Scene flipped;
        if (cfg.flip && flip_rng.uniform() < 0.5) {
          flipped = flip_horizontal(*scene);
          scene = &flipped;
        }
        const auto labels = to_feature_frame(sample_proposals(*scene, cfg, proposal_rng));
        if (labels.empty()) continue;
        std::vector<Box> boxes;
        for (const auto& l : labels) boxes.push_back(l.box);
        std::optional<LossTerms> terms;
        try {
          const Tensor map = model.backbone.forward(scene->image);
          const HeadOutput out = tsd_forward(map, boxes, model.head, branches);
          terms = total_loss(out, labels, head_cfg, cfg.mode, cfg.pc);
        } catch (const NonFiniteError& e) {
          abort_with(std::string(e.what()) + " at step " + std::to_string(step));
        } catch (const DegenerateBoxError& e) {
          // Sampled proposals are never degenerate, so a collapsed box here is a
          // translated one whose offset has outgrown float precision.
          abort_with("training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        const LossTerms& t = *terms;
        if (!std::isfinite(t.total.item())) {
          std::ostringstream os;
          os << "non-finite loss at step " << step << " (epoch " << epoch + 1 << ")";
          abort_with(os.str());
        }
        scale(t.total, inv_batch).backward();
        m.lcls += t.cls.item();
        m.lloc += t.loc.item();
        m.ldcls += t.tsd_cls.item();
        m.ldloc += t.tsd_loc.item();
        m.mcls += t.margin_cls.item();
        m.mloc += t.margin_loc.item();
        ++images;
      }
      try {
        sgd_step(params, state, lr_at(step, cfg, spe), cfg.momentum, cfg.weight_decay, step);
      } catch (const NonFiniteError& e) {
        abort_with(e.what());
      }
      ++step;
    }
    if (images > 0) {
      for (double* v : {&m.lcls, &m.lloc, &m.ldcls, &m.ldloc, &m.mcls, &m.mloc}) *v /= images;
    }
    result.metrics.push_back(m);
    if (metrics_log) metrics_log << to_json(m).dump() << "\n" << std::flush;
    if (on_epoch) on_epoch(m);
  }
  if (out_dir) save_model(*out_dir, model, meta);
  return result;
}

std::vector<ProposalPrediction> predict(const Model& model, const Tensor& image, std::span<const Box> proposals,
                                        int chunk) {
  NoGradGuard no_grad;
  const HeadConfig& hc = model.head.config;
  const double img_w = image.dim(1), img_h = image.dim(0);
  const bool tsd = uses_tsd(model.mode);
  const int cols = hc.num_classes + 1;
  std::vector<ProposalPrediction> preds;
  if (proposals.empty()) return preds;
  const Tensor map = model.backbone.forward(image);
  for (std::size_t begin = 0; begin < proposals.size(); begin += chunk) {
    const std::size_t end = std::min(proposals.size(), begin + static_cast<std::size_t>(chunk));
    std::vector<Box> feat;
    for (std::size_t i = begin; i < end; ++i) feat.push_back(image_to_feature(proposals[i]));
    const HeadOutput out = tsd_forward(map, feat, model.head, Branches{!tsd, tsd});
    const Tensor probs = softmax_rows(tsd ? out.tsd_logits : out.sibling_logits);
    const Tensor& deltas = tsd ? out.tsd_deltas : out.sibling_deltas;
    for (std::size_t r = 0; r < feat.size(); ++r) {
      const Box& base = tsd ? out.p_hat_r[r] : feat[r];
      ProposalPrediction p;
      for (int c = 0; c < cols; ++c) p.probs.push_back(probs.at(r * cols + c));
      for (int c = 0; c < hc.num_classes; ++c) {
        BoxDeltas d;
        for (int j = 0; j < 4; ++j) d[j] = deltas.at(r * 4 * hc.num_classes + 4 * c + j) * hc.delta_std[j];
        d[2] = std::min(d[2], kMaxLogScale);
        d[3] = std::min(d[3], kMaxLogScale);
        p.boxes.push_back(clip_box(feature_to_image(decode_deltas(base, d)), img_w, img_h));
      }
      preds.push_back(std::move(p));
    }
  }
  return preds;
}

std::vector<Detection> infer(const Model& model, const Tensor& image, std::span<const Box> proposals,
                             const InferConfig& cfg) {
  std::vector<Detection> dets;
  for (const auto& p : predict(model, image, proposals, cfg.chunk)) {
    for (std::size_t c = 0; c < p.boxes.size(); ++c) {
      if (p.probs[c] < cfg.score_threshold) continue;
      const Box& box = p.boxes[c];
      if (!(box.width() > 0 && box.height() > 0)) continue;
      dets.push_back({box, static_cast<int>(c), p.probs[c]});
    }
  }
  auto kept = nms(dets, cfg.nms_threshold);
  if (kept.size() > static_cast<std::size_t>(cfg.max_detections)) kept.resize(cfg.max_detections);
  return kept;
}

std::vector<Detection> infer(const Model& model, const Tensor& image, const InferConfig& cfg) {
  const auto grid = grid_proposals(image.dim(1), image.dim(0));
  return infer(model, image, grid, cfg);
}

EvalReport evaluate_model(const Model& model, std::span<const Scene> scenes, const InferConfig& cfg) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Instance>> gts;
  for (const Scene& s : scenes) {
    dets.push_back(infer(model, s.image, cfg));
    gts.push_back(s.instances);
  }
  return evaluate(dets, gts, model.head.config.num_classes);
}

TSD_NAMESPACE_END
