#include "tsd/heads.hpp"

#include <stdexcept>

TSD_NAMESPACE_BEGIN

void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = {{"num_classes", c.num_classes},
       {"pool_size", c.pool_size},
       {"samples_per_bin", c.samples_per_bin},
       {"feature_channels", c.feature_channels},
       {"hidden", c.hidden},
       {"estimator_hidden", c.estimator_hidden},
       {"gamma", c.gamma},
       {"delta_std", c.delta_std}};
}

void from_json(const nlohmann::json& j, HeadConfig& c) {
  j.at("num_classes").get_to(c.num_classes);
  j.at("pool_size").get_to(c.pool_size);
  j.at("samples_per_bin").get_to(c.samples_per_bin);
  j.at("feature_channels").get_to(c.feature_channels);
  j.at("hidden").get_to(c.hidden);
  j.at("estimator_hidden").get_to(c.estimator_hidden);
  j.at("gamma").get_to(c.gamma);
  j.at("delta_std").get_to(c.delta_std);
}

namespace {

Mlp2 make_mlp(int in, int width, Rng& rng) {
  return {LinearLayer::uniform(in, width, relu_bound(in), rng), LinearLayer::uniform(width, width, relu_bound(width), rng)};
}

void register_mlp(const Mlp2& m, ParamSet& params, const std::string& prefix) {
  m.fc0.register_params(params, prefix + ".0");
  m.fc1.register_params(params, prefix + ".1");
}

// Per-row (γ·w, γ·h) factors repeated `pairs` times.
std::vector<Real> offset_scale(std::span<const Box> proposals, double gamma, int pairs) {
  std::vector<Real> f;
  f.reserve(proposals.size() * pairs * 2);
  for (const Box& p : proposals) {
    for (int i = 0; i < pairs; ++i) {
      f.push_back(static_cast<Real>(gamma * p.width()));
      f.push_back(static_cast<Real>(gamma * p.height()));
    }
  }
  return f;
}

}  // namespace

HeadParams HeadParams::create(const HeadConfig& config, Rng& rng) {
  if (config.num_classes < 1 || config.pool_size < 1 || config.hidden < 1 || config.estimator_hidden < 1) {
    throw std::invalid_argument("HeadConfig: sizes must be positive");
  }
  const int in = config.roi_dim();
  const int est = config.estimator_hidden;
  const int k = config.pool_size;
  const int c = config.num_classes;
  const int h = config.hidden;
  HeadParams p;
  p.config = config;
  p.estimator_shared = LinearLayer::uniform(in, est, relu_bound(in), rng);
  p.fr_rest[0] = LinearLayer::uniform(est, est, relu_bound(est), rng);
  p.fr_rest[1] = LinearLayer::zeros(est, 2);
  p.fc_rest[0] = LinearLayer::uniform(est, est, relu_bound(est), rng);
  p.fc_rest[1] = LinearLayer::zeros(est, k * k * 2);
  p.sibling_extractor = make_mlp(in, h, rng);
  p.sibling_cls = LinearLayer::uniform(h, c + 1, linear_bound(h), rng);
  p.sibling_loc = LinearLayer::uniform(h, 4 * c, linear_bound(h), rng);
  p.tsd_cls_extractor = make_mlp(in, h, rng);
  p.tsd_loc_extractor = make_mlp(in, h, rng);
  p.tsd_cls = LinearLayer::uniform(h, c + 1, linear_bound(h), rng);
  p.tsd_loc = LinearLayer::uniform(h, 4 * c, linear_bound(h), rng);
  return p;
}

void HeadParams::register_params(ParamSet& params) const {
  register_mlp(sibling_extractor, params, "sibling.f");
  sibling_cls.register_params(params, "sibling.cls");
  sibling_loc.register_params(params, "sibling.loc");
  estimator_shared.register_params(params, "tsd.estimator_shared");
  fr_rest[0].register_params(params, "tsd.fr_rest.0");
  fr_rest[1].register_params(params, "tsd.fr_rest.1");
  fc_rest[0].register_params(params, "tsd.fc_rest.0");
  fc_rest[1].register_params(params, "tsd.fc_rest.1");
  register_mlp(tsd_cls_extractor, params, "tsd.f_c");
  register_mlp(tsd_loc_extractor, params, "tsd.f_r");
  tsd_cls.register_params(params, "tsd.cls");
  tsd_loc.register_params(params, "tsd.loc");
}

HeadOutput concat_outputs(const std::vector<HeadOutput>& parts) {
  if (parts.empty()) throw ShapeError("concat_outputs: no parts");
  auto cat = [&](Tensor HeadOutput::*field) {
    if (!(parts[0].*field).defined()) return Tensor{};
    std::vector<Tensor> pieces;
    for (const auto& p : parts) pieces.push_back(p.*field);
    return concat_rows(pieces);
  };
  HeadOutput out;
  out.sibling_logits = cat(&HeadOutput::sibling_logits);
  out.sibling_deltas = cat(&HeadOutput::sibling_deltas);
  out.tsd_logits = cat(&HeadOutput::tsd_logits);
  out.tsd_deltas = cat(&HeadOutput::tsd_deltas);
  out.delta_r = cat(&HeadOutput::delta_r);
  out.delta_c = cat(&HeadOutput::delta_c);
  out.p_hat_r_tensor = cat(&HeadOutput::p_hat_r_tensor);
  for (const auto& p : parts) out.p_hat_r.insert(out.p_hat_r.end(), p.p_hat_r.begin(), p.p_hat_r.end());
  return out;
}

Tensor flatten_rois(const Tensor& pooled) {
  if (pooled.rank() == 3) return reshape(pooled, {1, static_cast<int>(pooled.numel())});
  const int n = pooled.dim(0);
  return reshape(pooled, {n, static_cast<int>(pooled.numel() / n)});
}

Tensor estimator_hidden(const Tensor& flat_features, const HeadParams& params) {
  return relu(params.estimator_shared.forward(flat_features));
}

Tensor estimate_delta_r(const Tensor& shared_hidden, const HeadParams& params, std::span<const Box> proposals) {
  Tensor raw = params.fr_rest[1].forward(relu(params.fr_rest[0].forward(shared_hidden)));
  return mul_const(raw, offset_scale(proposals, params.config.gamma, 1));
}

Tensor estimate_delta_c(const Tensor& shared_hidden, const HeadParams& params, std::span<const Box> proposals) {
  const int k = params.config.pool_size;
  Tensor raw = params.fc_rest[1].forward(relu(params.fc_rest[0].forward(shared_hidden)));
  Tensor scaled = mul_const(raw, offset_scale(proposals, params.config.gamma, k * k));
  return reshape(scaled, {static_cast<int>(proposals.size()), k, k, 2});
}

DeltaR estimate_delta_r(const RoiFeature& feature, const HeadParams& params, const Box& p) {
  Tensor dr = estimate_delta_r(estimator_hidden(flatten_rois(feature.grid), params), params, std::span(&p, 1));
  return {reshape(dr, {2})};
}

DeltaC estimate_delta_c(const RoiFeature& feature, const HeadParams& params, const Box& p) {
  const int k = params.config.pool_size;
  Tensor dc = estimate_delta_c(estimator_hidden(flatten_rois(feature.grid), params), params, std::span(&p, 1));
  return {reshape(dc, {k, k, 2})};
}

SiblingOutput sibling_forward(const Tensor& flat_features, const HeadParams& params) {
  Tensor hidden = params.sibling_extractor.forward(flat_features);
  return {params.sibling_cls.forward(hidden), params.sibling_loc.forward(hidden)};
}

SiblingOutput sibling_forward(const RoiFeature& feature, const HeadParams& params) {
  return sibling_forward(flatten_rois(feature.grid), params);
}

HeadOutput tsd_forward(const Tensor& map, std::span<const Box> proposals, const HeadParams& params,
                       Branches branches) {
  const HeadConfig& cfg = params.config;
  const int k = cfg.pool_size;
  const int s = cfg.samples_per_bin;
  if (map.rank() != 3 || map.dim(2) != cfg.feature_channels) {
    throw ShapeError("tsd_forward: map " + shape_str(map.shape()) + " does not have " +
                     std::to_string(cfg.feature_channels) + " channels");
  }
  Tensor boxes = boxes_tensor(proposals);
  Tensor flat = flatten_rois(roi_pool(map, boxes, nullptr, k, s));

  HeadOutput out;
  if (branches.sibling) {
    SiblingOutput sib = sibling_forward(flat, params);
    out.sibling_logits = sib.logits;
    out.sibling_deltas = sib.deltas;
  }
  if (branches.tsd) {
    Tensor hidden = estimator_hidden(flat, params);
    out.delta_r = estimate_delta_r(hidden, params, proposals);
    out.delta_c = estimate_delta_c(hidden, params, proposals);
    out.p_hat_r_tensor = translate_boxes(proposals, out.delta_r);
    const auto v = out.p_hat_r_tensor.data();
    out.p_hat_r.reserve(proposals.size());
    for (std::size_t i = 0; i < proposals.size(); ++i) out.p_hat_r.push_back({v[4 * i], v[4 * i + 1], v[4 * i + 2], v[4 * i + 3]});

    Tensor f_c = flatten_rois(roi_pool(map, boxes, &out.delta_c, k, s));
    Tensor f_r = flatten_rois(roi_pool(map, out.p_hat_r_tensor, nullptr, k, s));
    out.tsd_logits = params.tsd_cls.forward(params.tsd_cls_extractor.forward(f_c));
    out.tsd_deltas = params.tsd_loc.forward(params.tsd_loc_extractor.forward(f_r));
  }
  return out;
}

HeadOutput tsd_forward(const Tensor& map, const Box& p, const HeadParams& params, Branches branches) {
  return tsd_forward(map, std::span<const Box>(&p, 1), params, branches);
}

TSD_NAMESPACE_END
