#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tsd/geometry.hpp"
#include "tsd/nn.hpp"

TSD_NAMESPACE_BEGIN

inline constexpr int kImageSize = 128;
inline constexpr int kMaxShapeClasses = 6;
inline constexpr int kFeatureStride = 8;

// Class id = shape type.
enum class ShapeKind { circle, square, triangle, diamond, ellipse, cross };
std::string shape_name(int label);

struct Scene {
  Tensor image;  // [H×W×3], values in [0, 1] on the 8-bit grid
  std::vector<Instance> instances;
  std::uint64_t seed = 0;
};

struct SceneConfig {
  int size = kImageSize;
  int min_objects = 1;
  int max_objects = 4;
  double min_extent = 16;  // object bounding-box side, pixels
  double max_extent = 56;
};

// Renders 1–4 anti-aliased shapes on a textured background. Pure in the seed.
// Labels are in [0, num_classes); num_classes must be in [2, 6].
Scene generate_scene(std::uint64_t seed, int num_classes, const SceneConfig& config = {});

// Scenes seed_of(corpus_seed, i) for i in [first, first + count).
std::vector<Scene> generate_scenes(std::uint64_t corpus_seed, int first, int count, int num_classes,
                                   const SceneConfig& config = {});

Scene flip_horizontal(const Scene& scene);

struct JitterConfig {
  double center = 0.3;     // center shift, uniform ±center·(w, h)
  double log_scale = 0.4;  // log width/height change, uniform ±log_scale
  double image_w = kImageSize;
  double image_h = kImageSize;
  double min_side = 2;  // proposals thinner than this after clipping are redrawn
};

// n_per_gt jittered copies of each gt followed by as many uniformly random
// background boxes. All boxes are clipped to the image.
std::vector<Box> jitter_proposals(std::span<const Box> gts, int n_per_gt, Rng& rng, const JitterConfig& config = {});

// Regular multi-scale sliding grid: square and 2:1 / 1:2 boxes at each scale,
// stride half the box side. Depends only on the image size.
std::vector<Box> grid_proposals(double image_w, double image_h, std::span<const double> scales = {});

// Image frame ↔ stride-8 feature frame. Feature cell i is centred on image
// pixel 8i, whose centre sits at continuous coordinate 8i + 0.5.
Box image_to_feature(const Box& b);
Box feature_to_image(const Box& b);

// 3×3 conv stack with three stride-2 stages; output is [H/8×W/8×channels].
struct TinyBackbone {
  std::vector<Conv2dLayer> layers;

  static TinyBackbone create(int channels, Rng& rng);
  Tensor forward(const Tensor& image) const;
  void register_params(ParamSet& params) const;
};

// Disk corpus: <dir>/<split>/NNNNNN.ppm plus annotations.jsonl with
// {image, boxes, labels} per line.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, std::span<const double> values, int height, int width);

void write_split(const std::filesystem::path& dir, std::span<const Scene> scenes);
std::vector<Scene> read_split(const std::filesystem::path& dir);

TSD_NAMESPACE_END
