#include <cmath>

#include "doctest.h"
#include "tsd/geometry.hpp"
#include "tsd/rng.hpp"

using namespace tsd;

namespace {

Box random_box(Rng& rng) {
  const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
  return {x, y, x + rng.uniform(1, 40), y + rng.uniform(1, 40)};
}

}  // namespace

TEST_CASE("iou") {
  const Box a{0, 0, 2, 2};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, {5, 5, 6, 6}) == 0.0);
  CHECK(iou(a, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(iou({1, 1, 1, 1}, {1, 1, 1, 1}) == 0.0);  // empty union

  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const Box p = random_box(rng), q = random_box(rng);
    const double v = iou(p, q);
    CHECK(v == iou(q, p));
    CHECK(v >= 0);
    CHECK(v <= 1);
    if (!(p == q)) CHECK(v < 1);
  }
}

TEST_CASE("encode deltas") {
  const Box p{10, 20, 30, 60};
  CHECK(encode_deltas(p, p) == BoxDeltas{0, 0, 0, 0});
  const BoxDeltas shifted = encode_deltas(p, {30, 20, 50, 60});
  CHECK(shifted[0] == doctest::Approx(1));
  CHECK(shifted[1] == 0);
  const BoxDeltas wide = encode_deltas(p, {0, 20, 40, 60});
  CHECK(wide[2] == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(encode_deltas({0, 0, 0, 5}, p), DegenerateBoxError);
  CHECK_THROWS_AS(encode_deltas(p, {0, 0, 5, 0}), DegenerateBoxError);
}

TEST_CASE("decode deltas") {
  const Box p{10, 20, 30, 60};
  CHECK(decode_deltas(p, {0, 0, 0, 0}) == p);
  const Box doubled = decode_deltas(p, {0, 0, std::log(2.0), 0});
  CHECK(doubled.width() == doctest::Approx(40));
  CHECK(doubled.cx() == doctest::Approx(p.cx()));

  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const Box a = random_box(rng), t = random_box(rng);
    const Box r = decode_deltas(a, encode_deltas(a, t));
    CHECK(std::abs(r.x1 - t.x1) < 1e-5);
    CHECK(std::abs(r.y1 - t.y1) < 1e-5);
    CHECK(std::abs(r.x2 - t.x2) < 1e-5);
    CHECK(std::abs(r.y2 - t.y2) < 1e-5);
  }
}

TEST_CASE("clip box") {
  CHECK(clip_box({1, 1, 5, 5}, 8, 8) == Box{1, 1, 5, 5});
  CHECK(clip_box({-5, -5, 10, 10}, 8, 8) == Box{0, 0, 8, 8});
  const Box out = clip_box({20, 3, 30, 6}, 8, 8);
  CHECK(out.area() == 0);
  CHECK(out.valid());
  CHECK(out.x1 == 8);
}

TEST_CASE("nms") {
  SUBCASE("single") {
    const std::vector<Detection> d{{{0, 0, 4, 4}, 0, 0.7}};
    CHECK(nms(d).size() == 1);
  }
  SUBCASE("duplicates") {
    const std::vector<Detection> d{{{0, 0, 4, 4}, 1, 0.8}, {{0, 0, 4, 4}, 1, 0.9}};
    const auto kept = nms(d, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9);
  }
  SUBCASE("class-wise") {
    const std::vector<Detection> d{{{0, 0, 4, 4}, 0, 0.8}, {{0, 0, 4, 4}, 1, 0.9}};
    CHECK(nms(d).size() == 2);
  }
  SUBCASE("ties keep input order") {
    const std::vector<Detection> d{{{0, 0, 4, 4}, 0, 0.5}, {{10, 10, 14, 14}, 0, 0.5}, {{0, 0, 4, 4.1}, 0, 0.5}};
    const auto kept = nms(d);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].box == d[0].box);
    CHECK(kept[1].box == d[1].box);
  }
  SUBCASE("properties") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<Detection> d;
      for (int i = 0; i < 30; ++i) d.push_back({random_box(rng), rng.uniform_int(0, 2), rng.uniform()});
      const auto kept = nms(d, 0.5);
      for (std::size_t i = 0; i < kept.size(); ++i) {
        bool found = false;
        for (const auto& x : d) found = found || (x.box == kept[i].box && x.score == kept[i].score);
        CHECK(found);
        if (i > 0) CHECK(kept[i - 1].score >= kept[i].score);
        for (std::size_t j = i + 1; j < kept.size(); ++j) {
          if (kept[i].label == kept[j].label) CHECK(iou(kept[i].box, kept[j].box) <= 0.5);
        }
      }
    }
  }
}
