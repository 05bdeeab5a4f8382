#include <cmath>

#include "doctest.h"
#include "tsd/losses.hpp"
#include "tsd/ops.hpp"

using namespace tsd;

namespace {

Real f(double v) { return static_cast<Real>(v); }

}  // namespace

TEST_CASE("head mode names") {
  for (HeadMode m : {HeadMode::sibling, HeadMode::tsd, HeadMode::tsd_pc}) CHECK(parse_head_mode(to_string(m)) == m);
  CHECK(to_string(HeadMode::tsd_pc) == "tsd+pc");
  CHECK_THROWS_AS(parse_head_mode("pc"), std::invalid_argument);
}

TEST_CASE("assign labels") {
  const std::vector<Instance> gts{{{0, 0, 10, 10}, 1}, {{20, 20, 30, 30}, 0}};
  SUBCASE("identical is positive") {
    const std::vector<Box> p{{20, 20, 30, 30}};
    const auto l = assign_labels(p, gts, 0.5, 2);
    CHECK(l[0].is_positive);
    CHECK(l[0].label == 0);
    CHECK(*l[0].matched_gt == gts[1].box);
    CHECK(l[0].max_iou == 1.0);
  }
  SUBCASE("disjoint is background") {
    const std::vector<Box> p{{50, 50, 60, 60}};
    const auto l = assign_labels(p, gts, 0.5, 2);
    CHECK_FALSE(l[0].is_positive);
    CHECK(l[0].label == 2);
    CHECK_FALSE(l[0].matched_gt.has_value());
  }
  SUBCASE("threshold is inclusive") {
    const std::vector<Box> p{{0, 0, 10, 5}};  // IoU exactly 0.5
    const auto l = assign_labels(p, gts, 0.5, 2);
    CHECK(l[0].max_iou == 0.5);
    CHECK(l[0].is_positive);
  }
  SUBCASE("ties go to the lowest index") {
    const std::vector<Instance> twin{{{0, 0, 10, 10}, 1}, {{0, 0, 10, 10}, 0}};
    const std::vector<Box> p{{0, 0, 10, 9}};
    CHECK(assign_labels(p, twin, 0.5, 2)[0].label == 1);
  }
  SUBCASE("no ground truths") {
    const std::vector<Box> p{{0, 0, 10, 10}, {1, 1, 2, 2}};
    for (const auto& l : assign_labels(p, {}, 0.5, 2)) {
      CHECK_FALSE(l.is_positive);
      CHECK(l.label == 2);
    }
  }
}

TEST_CASE("loc loss") {
  // Two classes, so 8 deltas per row; row 0 matches class 1.
  std::vector<Real> pred(8, 9);
  for (int j = 0; j < 4; ++j) pred[4 + j] = 0;
  const Tensor p = Tensor::from({1, 8}, pred);
  const std::vector<LocTarget> exact{{0, 1, {0, 0, 0, 0}}};
  CHECK(loc_loss(p, exact).item() == 0);
  const std::vector<LocTarget> half{{0, 1, {0.5, 0, 0, 0}}};
  CHECK(loc_loss(p, half).item() == doctest::Approx(0.125));
  const std::vector<LocTarget> two{{0, 1, {0, 2.0, 0, 0}}};
  CHECK(loc_loss(p, two).item() == doctest::Approx(1.5));
  const std::vector<LocTarget> both{{0, 1, {0.5, 0, 0, 0}}, {0, 1, {0, 2.0, 0, 0}}};
  CHECK(loc_loss(p, both).item() == doctest::Approx((0.125 + 1.5) / 2));
  CHECK(loc_loss(p, std::vector<LocTarget>{}).item() == 0);
  CHECK_THROWS(loc_loss(p, std::vector<LocTarget>{{0, 2, {}}}));
}

TEST_CASE("classification margin") {
  auto m = [](double s, double t, double mc) {
    return margin_cls(Tensor::from({1}, {f(s)}), Tensor::from({1}, {f(t)}), mc).item();
  };
  CHECK(m(0.5, 0.9, 0.2) == 0);
  CHECK(m(0.9, 0.8, 0.2) == doctest::Approx(0.3).epsilon(1e-6));
  CHECK(m(0.4, 0.4, 0.2) == f(0.2));

  Tensor s = Tensor::from({2}, {0.9, 0.5}, true), t = Tensor::from({2}, {0.8, 0.9}, true);
  margin_cls(s, t, 0.2).backward();
  CHECK(s.grad()[0] == doctest::Approx(0.5));
  CHECK(t.grad()[0] == doctest::Approx(-0.5));
  CHECK(s.grad()[1] == 0);  // clamped row
}

TEST_CASE("localization margin") {
  auto m = [](double s, double t, double mr, bool pos) {
    const bool mask[1] = {pos};
    return margin_loc(Tensor::from({1}, {f(s)}), Tensor::from({1}, {f(t)}), mr, mask).item();
  };
  CHECK(m(0.6, 0.7, 0.2, true) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(m(0.4, 0.7, 0.2, true) == 0);
  CHECK(m(0.3, 0.9, 0.2, true) == 0);
  CHECK(m(0.9, 0.1, 0.2, false) == 0);

  Tensor s = Tensor::from({2}, {0.9, 0.2}, true), t = Tensor::from({2}, {0.1, 0.3}, true);
  const bool mask[2] = {false, true};
  const Tensor loss = margin_loc(s, t, 0.2, mask);
  CHECK(loss.item() == doctest::Approx(0.1).epsilon(1e-6));
  loss.backward();
  CHECK(s.grad()[0] == 0);
  CHECK(t.grad()[0] == 0);
  CHECK(s.grad()[1] == 1);
  CHECK(t.grad()[1] == -1);
  CHECK_THROWS_AS(margin_loc(s, t, 0.2, std::span<const bool>(mask, 1)), ShapeError);
}

TEST_CASE("margins are never negative") {
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const Tensor a = Tensor::from({3}, {f(rng.uniform()), f(rng.uniform()), f(rng.uniform())});
    const Tensor b = Tensor::from({3}, {f(rng.uniform()), f(rng.uniform()), f(rng.uniform())});
    const bool mask[3] = {rng.uniform() < 0.5, rng.uniform() < 0.5, rng.uniform() < 0.5};
    CHECK(margin_cls(a, b, rng.uniform(0, 0.5)).item() >= 0);
    CHECK(margin_loc(a, b, rng.uniform(0, 0.5), mask).item() >= 0);
    CHECK(margin_cls(a, a, 0).item() == 0);
    CHECK(margin_loc(a, a, 0, mask).item() == 0);
  }
}

TEST_CASE("differentiable box helpers agree with geometry") {
  const Box p{10, 20, 30, 60}, g{12, 18, 35, 50};
  const BoxDeltas d = encode_deltas(p, g);
  const Tensor boxes = Tensor::from({1, 4}, {10, 20, 30, 60});
  const Tensor enc = encode_boxes(boxes, std::vector<Box>{g});
  for (int j = 0; j < 4; ++j) CHECK(enc.at(j) == doctest::Approx(d[j]).epsilon(1e-6));
  const Tensor dec = decode_boxes(boxes, enc);
  CHECK(dec.at(0) == doctest::Approx(g.x1).epsilon(1e-5));
  CHECK(dec.at(3) == doctest::Approx(g.y2).epsilon(1e-5));
  CHECK(box_iou(Tensor::from({1, 4}, {12, 18, 35, 50}), std::vector<Box>{p}).item() == doctest::Approx(iou(g, p)));
}

namespace {

// Two proposals: row 0 positive on class 1, row 1 background. Predictions are
// perfect and TSD equals sibling.
struct PerfectBatch {
  HeadConfig cfg;
  std::vector<LabeledProposal> labels;
  HeadOutput out;

  PerfectBatch() {
    cfg.num_classes = 2;
    const Box p0{10, 10, 30, 30}, g0{12, 9, 31, 33}, p1{50, 50, 60, 60};
    const std::vector<Instance> gts{{g0, 1}};
    labels = assign_labels(std::vector<Box>{p0, p1}, gts, 0.5, cfg.background());
    REQUIRE(labels[0].is_positive);
    REQUIRE_FALSE(labels[1].is_positive);
    const BoxDeltas d = encode_deltas(p0, g0);
    std::vector<Real> deltas(16, 0);
    for (int j = 0; j < 4; ++j) deltas[4 + j] = f(d[j] / cfg.delta_std[j]);
    for (int j = 0; j < 4; ++j) deltas[8 + 4 + j] = 7;  // negative row, must be ignored
    const std::vector<Real> logits{-60, 60, -60, -60, -60, 60};
    out.sibling_logits = Tensor::from({2, 3}, logits, true);
    out.tsd_logits = Tensor::from({2, 3}, logits, true);
    out.sibling_deltas = Tensor::from({2, 8}, deltas, true);
    out.tsd_deltas = Tensor::from({2, 8}, deltas, true);
    out.p_hat_r_tensor = Tensor::from({2, 4}, {10, 10, 30, 30, 50, 50, 60, 60}, true);
    out.p_hat_r = {p0, p1};
  }
};

}  // namespace

TEST_CASE("total loss on a perfect batch is the margin residual") {
  PerfectBatch b;
  const PcConfig pc{0.2, 0.2};
  const LossTerms t = total_loss(b.out, b.labels, b.cfg, HeadMode::tsd_pc, pc);
  CHECK(t.cls.item() == doctest::Approx(0).epsilon(1e-12));
  CHECK(t.tsd_cls.item() == doctest::Approx(0).epsilon(1e-12));
  CHECK(t.loc.item() == doctest::Approx(0).scale(1).epsilon(1e-5));
  CHECK(t.tsd_loc.item() == doctest::Approx(0).scale(1).epsilon(1e-5));
  CHECK(t.margin_cls.item() == doctest::Approx(0.2));
  CHECK(t.margin_loc.item() == doctest::Approx(0.2));
  CHECK(t.total.item() == doctest::Approx(0.4).epsilon(1e-4));

  const LossTerms zero = total_loss(b.out, b.labels, b.cfg, HeadMode::tsd_pc, PcConfig{0, 0});
  CHECK(zero.margin_cls.item() == 0);
  CHECK(zero.margin_loc.item() == 0);
  CHECK_THROWS_AS(total_loss(b.out, b.labels, b.cfg, HeadMode::tsd_pc, PcConfig{-0.1, 0}), std::invalid_argument);
}

TEST_CASE("modes enable their terms") {
  PerfectBatch b;
  const LossTerms s = total_loss(b.out, b.labels, b.cfg, HeadMode::sibling, {});
  CHECK(s.tsd_cls.item() == 0);
  CHECK(s.margin_cls.item() == 0);
  const LossTerms t = total_loss(b.out, b.labels, b.cfg, HeadMode::tsd, {});
  CHECK(t.margin_cls.item() == 0);
  CHECK(t.margin_loc.item() == 0);
}

TEST_CASE("negatives only feed classification") {
  PerfectBatch b;
  // Unsaturated background logits so the classifiers still have a gradient.
  for (int j = 3; j < 6; ++j) {
    b.out.sibling_logits.mutable_data()[j] = 0;
    b.out.tsd_logits.mutable_data()[j] = 0;
  }
  const LossTerms t = total_loss(b.out, b.labels, b.cfg, HeadMode::tsd_pc, {});
  t.total.backward();
  for (int j = 8; j < 16; ++j) {
    CHECK(b.out.sibling_deltas.grad()[j] == 0);
    CHECK(b.out.tsd_deltas.grad()[j] == 0);
  }
  for (int j = 4; j < 8; ++j) CHECK(b.out.p_hat_r_tensor.grad()[j] == 0);
  // The background row still trains both classifiers.
  CHECK(b.out.sibling_logits.grad()[5] != 0);
  CHECK(b.out.tsd_logits.grad()[5] != 0);
}
