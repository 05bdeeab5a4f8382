#include <chrono>
#include <filesystem>

#include "doctest.h"
#include "tsd/losses.hpp"
#include "tsd/synth.hpp"

using namespace tsd;

namespace {

bool same(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("scenes are pure in the seed") {
  const Scene a = generate_scene(42, 3), b = generate_scene(42, 3), c = generate_scene(43, 3);
  CHECK(same(a.image, b.image));
  REQUIRE(a.instances.size() == b.instances.size());
  for (std::size_t i = 0; i < a.instances.size(); ++i) {
    CHECK(a.instances[i].box == b.instances[i].box);
    CHECK(a.instances[i].label == b.instances[i].label);
  }
  CHECK_FALSE(same(a.image, c.image));
}

TEST_CASE("scene contract") {
  for (int k : {2, 3, 6}) {
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
      const Scene s = generate_scene(seed, k);
      CHECK(s.image.shape() == Shape{128, 128, 3});
      CHECK(s.instances.size() >= 1);
      CHECK(s.instances.size() <= 4);
      for (const auto& inst : s.instances) {
        CHECK(inst.label >= 0);
        CHECK(inst.label < k);
        CHECK(inst.box.area() >= 16);
        CHECK(inst.box.x1 >= 0);
        CHECK(inst.box.y1 >= 0);
        CHECK(inst.box.x2 <= 128);
        CHECK(inst.box.y2 <= 128);
      }
      for (Real v : s.image.data()) {
        CHECK(v >= 0);
        CHECK(v <= 1);
      }
    }
  }
  CHECK_THROWS_AS(generate_scene(1, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_scene(1, 7), std::invalid_argument);
}

TEST_CASE("500 scenes in under 10 seconds") {
  const auto start = std::chrono::steady_clock::now();
  const auto scenes = generate_scenes(7, 0, 500, 3);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(scenes.size() == 500);
  CHECK(s < 10.0);
  MESSAGE("500 scenes in " << s << " s");
}

TEST_CASE("jitter") {
  const std::vector<Box> gts{{10, 10, 40, 30}, {60, 70, 100, 120}};
  SUBCASE("zero magnitude reproduces the gts") {
    Rng rng(1);
    JitterConfig cfg;
    cfg.center = 0;
    cfg.log_scale = 0;
    const auto p = jitter_proposals(gts, 3, rng, cfg);
    REQUIRE(p.size() == 12);
    for (int i = 0; i < 6; ++i) CHECK(p[i] == gts[i / 3]);
  }
  SUBCASE("deterministic and clipped") {
    Rng a(5), b(5);
    const auto p = jitter_proposals(gts, 4, a), q = jitter_proposals(gts, 4, b);
    CHECK(p == q);
    for (const Box& x : p) {
      CHECK(x.x1 >= 0);
      CHECK(x.y2 <= 128);
      CHECK(x.width() > 0);
    }
  }
  SUBCASE("iou spans the positive threshold") {
    Rng rng(9);
    int pos = 0, neg = 0;
    for (int i = 0; i < 10000; ++i) {
      const Box g = gts[i % 2];
      const auto p = jitter_proposals(std::span<const Box>(&g, 1), 1, rng);
      (iou(p[0], g) >= kPositiveIou ? pos : neg) += 1;
    }
    CHECK(pos > 1000);
    CHECK(neg > 1000);
  }
  SUBCASE("bad count") {
    Rng rng(1);
    CHECK_THROWS_AS(jitter_proposals(gts, 0, rng), std::invalid_argument);
  }
}

TEST_CASE("grid proposals") {
  const auto g = grid_proposals(128, 128);
  CHECK(g.size() > 300);
  for (const Box& b : g) {
    CHECK(b.x1 >= 0);
    CHECK(b.y1 >= 0);
    CHECK(b.x2 <= 128);
    CHECK(b.y2 <= 128);
  }
  CHECK(grid_proposals(128, 128) == g);
  // Every object size the generator emits has a grid box of IoU >= 0.5.
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    for (const auto& inst : generate_scene(seed, 6).instances) {
      double best = 0;
      for (const Box& b : g) best = std::max(best, iou(b, inst.box));
      CHECK(best >= 0.5);
    }
  }
}

TEST_CASE("feature frame") {
  const Box b{8.5, 16.5, 40.5, 64.5};
  CHECK(image_to_feature(b) == Box{1, 2, 5, 8});
  const Box r = feature_to_image(image_to_feature({3.25, 7, 99, 120.75}));
  CHECK(r.x1 == doctest::Approx(3.25));
  CHECK(r.y2 == doctest::Approx(120.75));
}

TEST_CASE("horizontal flip") {
  const Scene s = generate_scene(3, 3);
  const Scene f = flip_horizontal(s);
  CHECK(f.image.at(5 * 3) == s.image.at(122 * 3));
  for (std::size_t i = 0; i < s.instances.size(); ++i) {
    CHECK(f.instances[i].box.x1 == doctest::Approx(128 - s.instances[i].box.x2));
    CHECK(f.instances[i].box.width() == doctest::Approx(s.instances[i].box.width()));
  }
  const Scene back = flip_horizontal(f);
  CHECK(same(back.image, s.image));
}

TEST_CASE("backbone") {
  Rng rng(2);
  const TinyBackbone b = TinyBackbone::create(8, rng);
  const Tensor map = b.forward(generate_scene(1, 3).image);
  CHECK(map.shape() == Shape{16, 16, 8});
  ParamSet set;
  b.register_params(set);
  CHECK(set.find("backbone.conv0.weight") != nullptr);
  CHECK(set.find("backbone.conv4.bias") != nullptr);
}

TEST_CASE("corpus round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "tsd_test_split";
  std::filesystem::remove_all(dir);
  const auto scenes = generate_scenes(11, 0, 4, 3);
  write_split(dir, scenes);
  const auto back = read_split(dir);
  REQUIRE(back.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(same(back[i].image, scenes[i].image));
    REQUIRE(back[i].instances.size() == scenes[i].instances.size());
    for (std::size_t j = 0; j < back[i].instances.size(); ++j) {
      CHECK(back[i].instances[j].box == scenes[i].instances[j].box);
      CHECK(back[i].instances[j].label == scenes[i].instances[j].label);
    }
  }
  std::filesystem::remove_all(dir);
}
