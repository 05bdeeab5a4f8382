#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "tsd/train.hpp"

using namespace tsd;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(HeadMode mode) {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 2;
  c.decay_epochs = {1};
  c.mode = mode;
  c.seed = 7;
  c.proposals_per_image = 16;
  c.jitter_per_gt = 4;
  c.backbone_channels = 8;
  c.head.num_classes = 3;
  c.head.hidden = 16;
  c.head.estimator_hidden = 8;
  return c;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("tsd_test_train_" + name);
  fs::remove_all(dir);
  return dir;
}

// One scalar parameter with a fixed gradient.
struct Scalar {
  ParamSet params;
  Tensor x = Tensor::scalar(1, true);
  Scalar() { params.add("x", x); }
  void set_grad(Real g) { x.mutable_grad()[0] = g; }
  double value() const { return x.item(); }
};

}  // namespace

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.base_lr = 0.04;
  c.warmup_start_lr = 0.00125;
  c.warmup_epochs = 1;
  c.decay_epochs = {8, 11};
  const int spe = 10;
  CHECK(lr_at(0, c, spe) == 0.00125);
  CHECK(lr_at(5, c, spe) == doctest::Approx((0.00125 + 0.04) / 2));
  CHECK(lr_at(10, c, spe) == 0.04);
  CHECK(lr_at(79, c, spe) == 0.04);
  CHECK(lr_at(80, c, spe) == doctest::Approx(0.004));
  CHECK(lr_at(110, c, spe) == doctest::Approx(0.0004));
  CHECK_THROWS_AS(lr_at(-1, c, spe), std::invalid_argument);
  for (long s = 1; s < 10; ++s) CHECK(lr_at(s, c, spe) > lr_at(s - 1, c, spe));
}

TEST_CASE("default decay epochs") {
  CHECK(TrainConfig::default_decay(20) == std::vector<int>{12, 17});
  CHECK(TrainConfig::default_decay(1).empty());
}

TEST_CASE("config validation and json") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.warmup_start_lr = c.base_lr;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.decay_epochs = {5, 5};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  TrainConfig d = tiny_config(HeadMode::tsd);
  d.pc.m_c = 0.3;
  d.flip = true;
  const TrainConfig back = nlohmann::json(d).get<TrainConfig>();
  CHECK(nlohmann::json(back) == nlohmann::json(d));
  CHECK(back.mode == HeadMode::tsd);
}

TEST_CASE("sgd step") {
  SUBCASE("no momentum, no decay is plain descent") {
    Scalar s;
    SgdState state;
    s.set_grad(2);
    sgd_step(s.params, state, 0.25, 0, 0, 0);
    CHECK(s.value() == 0.5);
  }
  SUBCASE("momentum recursion on x squared") {
    Scalar s;
    SgdState state;
    s.set_grad(2 * s.value());
    sgd_step(s.params, state, 0.1, 0.9, 0, 0);
    CHECK(s.value() == doctest::Approx(0.8).epsilon(1e-6));
    s.set_grad(2 * s.value());
    sgd_step(s.params, state, 0.1, 0.9, 0, 1);
    CHECK(s.value() == doctest::Approx(0.46).epsilon(1e-6));
  }
  SUBCASE("weight decay pulls toward zero") {
    Scalar s;
    SgdState state;
    s.set_grad(0);
    sgd_step(s.params, state, 0.5, 0.9, 0.1, 0);
    CHECK(s.value() == doctest::Approx(0.95));
  }
  SUBCASE("non-finite gradient names the parameter and step") {
    Scalar s;
    SgdState state;
    s.set_grad(std::numeric_limits<Real>::quiet_NaN());
    try {
      sgd_step(s.params, state, 0.1, 0.9, 0, 42);
      FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
      const std::string what = e.what();
      CHECK(what.find("x") != std::string::npos);
      CHECK(what.find("42") != std::string::npos);
    }
    CHECK(s.value() == 1);
  }
}

TEST_CASE("proposal sampling") {
  const Scene scene = generate_scene(3, 3);
  TrainConfig c;
  c.proposals_per_image = 32;
  Rng a(1), b(1);
  const auto la = sample_proposals(scene, c, a);
  const auto lb = sample_proposals(scene, c, b);
  REQUIRE(la.size() == lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) CHECK(la[i].box == lb[i].box);
  CHECK(la.size() <= 32);
  int pos = 0;
  for (const auto& l : la) pos += l.is_positive;
  CHECK(pos >= 1);
  CHECK(pos <= 8);
  CHECK(pos < static_cast<int>(la.size()));

  Scene empty = scene;
  empty.instances.clear();
  CHECK(sample_proposals(empty, c, a).empty());

  const auto feat = to_feature_frame(la);
  for (std::size_t i = 0; i < la.size(); ++i) {
    CHECK(feat[i].box.x1 == doctest::Approx((la[i].box.x1 - 0.5) / 8));
    CHECK(feat[i].is_positive == la[i].is_positive);
    if (la[i].matched_gt) CHECK(feat[i].matched_gt->x2 == doctest::Approx((la[i].matched_gt->x2 - 0.5) / 8));
  }
}

TEST_CASE("training is deterministic and logs every component") {
  const auto scenes = generate_scenes(11, 0, 4, 3);
  const TrainConfig c = tiny_config(HeadMode::tsd_pc);
  const fs::path dir = scratch_dir("det");
  const TrainResult a = train(scenes, c, dir);
  const TrainResult b = train(scenes, c);
  REQUIRE(a.metrics.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    CHECK(nlohmann::json(to_json(a.metrics[e])) == nlohmann::json(to_json(b.metrics[e])));
    for (double v : {a.metrics[e].lcls, a.metrics[e].lloc, a.metrics[e].ldcls, a.metrics[e].ldloc,
                     a.metrics[e].mcls, a.metrics[e].mloc}) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0);
    }
    CHECK(a.metrics[e].ldcls > 0);
  }
  CHECK(a.metrics[0].lr == c.warmup_start_lr);

  std::ifstream log(dir / "metrics.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"epoch", "lcls", "lloc", "ldcls", "ldloc", "mcls", "mloc", "lr"}) CHECK(j.contains(k));
    ++lines;
  }
  CHECK(lines == 2);

  const Model loaded = load_model(dir);
  CHECK(loaded.mode == HeadMode::tsd_pc);
  const std::vector<Box> props{{10, 10, 50, 50}, {60, 20, 100, 70}};
  const auto pa = predict(a.model, scenes[0].image, props);
  const auto pl = predict(loaded, scenes[0].image, props);
  for (std::size_t i = 0; i < props.size(); ++i) {
    CHECK(pa[i].probs == pl[i].probs);
    CHECK(pa[i].boxes == pl[i].boxes);
  }
  fs::remove_all(dir);
}

TEST_CASE("sibling mode leaves the tsd terms at zero") {
  const auto scenes = generate_scenes(11, 0, 2, 3);
  const TrainResult r = train(scenes, tiny_config(HeadMode::sibling));
  for (const auto& m : r.metrics) {
    CHECK(m.ldcls == 0);
    CHECK(m.mloc == 0);
    CHECK(m.lcls > 0);
  }
}

TEST_CASE("non-finite training aborts with a checkpoint") {
  const auto scenes = generate_scenes(11, 0, 4, 3);
  TrainConfig c = tiny_config(HeadMode::tsd);
  c.base_lr = 1e30;
  c.warmup_start_lr = 1e29;
  const fs::path dir = scratch_dir("nan");
  CHECK_THROWS_AS(train(scenes, c, dir), NonFiniteError);
  CHECK(load_model(dir).mode == HeadMode::tsd);
  fs::remove_all(dir);
}

TEST_CASE("a NaN input aborts in every mode") {
  auto scenes = generate_scenes(11, 0, 2, 3);
  scenes[1].image.mutable_data()[100] = std::numeric_limits<Real>::quiet_NaN();
  for (HeadMode mode : {HeadMode::sibling, HeadMode::tsd_pc}) {
    TrainConfig c = tiny_config(mode);
    c.batch_size = 1;
    const fs::path dir = scratch_dir("nan_input");
    try {
      train(scenes, c, dir);
      FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
      CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
    CHECK(load_model(dir).mode == mode);
    fs::remove_all(dir);
  }
}

TEST_CASE("inference contract") {
  Rng rng(5);
  HeadConfig h;
  h.hidden = 16;
  h.estimator_hidden = 8;
  const Scene scene = generate_scene(9, 3);
  for (HeadMode mode : {HeadMode::sibling, HeadMode::tsd_pc}) {
    const Model m = Model::create(h, 8, mode, rng);
    CHECK(infer(m, scene.image, std::vector<Box>{}).empty());
    InferConfig cfg;
    cfg.score_threshold = 0;
    cfg.max_detections = 50;
    const auto dets = infer(m, scene.image, cfg);
    CHECK(!dets.empty());
    CHECK(dets.size() <= 50);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      CHECK(dets[i].score >= 0);
      CHECK(dets[i].score <= 1);
      CHECK(dets[i].label >= 0);
      CHECK(dets[i].label < 3);
      CHECK(dets[i].box.x1 >= 0);
      CHECK(dets[i].box.x2 <= 128);
      if (i > 0) CHECK(dets[i].score <= dets[i - 1].score);
    }
    for (const auto& p : predict(m, scene.image, std::vector<Box>{{4, 4, 40, 40}})) {
      double total = 0;
      for (double v : p.probs) total += v;
      CHECK(total == doctest::Approx(1).epsilon(1e-5));
    }
  }
}

TEST_CASE("margins vanish when tsd is pinned to sibling with zero margins") {
  Rng rng(2);
  HeadConfig h;
  h.hidden = 16;
  h.estimator_hidden = 8;
  h.feature_channels = 8;
  Model m = Model::create(h, 8, HeadMode::tsd_pc, rng);
  m.head.tsd_cls_extractor = m.head.sibling_extractor;
  m.head.tsd_loc_extractor = m.head.sibling_extractor;
  m.head.tsd_cls = m.head.sibling_cls;
  m.head.tsd_loc = m.head.sibling_loc;

  const Scene scene = generate_scene(4, 3);
  TrainConfig c;
  Rng prng(3);
  const auto labels = to_feature_frame(sample_proposals(scene, c, prng));
  std::vector<Box> boxes;
  for (const auto& l : labels) boxes.push_back(l.box);
  const HeadOutput out = tsd_forward(m.backbone.forward(scene.image), boxes, m.head);
  const auto sl = out.sibling_logits.data(), tl = out.tsd_logits.data();
  CHECK(std::equal(sl.begin(), sl.end(), tl.begin(), tl.end()));
  const LossTerms t = total_loss(out, labels, m.head.config, HeadMode::tsd_pc, PcConfig{0, 0});
  CHECK(t.margin_cls.item() == 0);
  CHECK(t.margin_loc.item() == 0);
  CHECK(t.cls.item() == t.tsd_cls.item());
  CHECK(t.loc.item() == t.tsd_loc.item());
}
