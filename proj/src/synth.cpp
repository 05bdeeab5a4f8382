#include "tsd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

TSD_NAMESPACE_BEGIN

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kSuperSamples = 4;

// Shape membership in bbox-normalized coordinates; every shape touches all
// four sides of its box, so the box is tight.
bool inside(ShapeKind kind, double u, double v) {
  switch (kind) {
    case ShapeKind::circle:
    case ShapeKind::ellipse:
      return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case ShapeKind::square:
      return true;
    case ShapeKind::triangle:
      return std::abs(u - 0.5) <= 0.5 * v;
    case ShapeKind::diamond:
      return std::abs(u - 0.5) + std::abs(v - 0.5) <= 0.5;
    case ShapeKind::cross:
      return std::abs(u - 0.5) <= 1.0 / 6 || std::abs(v - 0.5) <= 1.0 / 6;
  }
  return false;
}

// Intersection over the smaller area; bounds how much one shape may hide another.
double overlap_of_smaller(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  return iw * ih / std::min(a.area(), b.area());
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

void render_background(std::vector<double>& px, int size, Rng& rng) {
  double base[3], amp[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.25, 0.75);
    amp[c] = rng.uniform(0.03, 0.12);
  }
  const double fx = rng.uniform(0.05, 0.35), fy = rng.uniform(0.05, 0.35);
  const double gx = rng.uniform(-0.15, 0.15) / size, gy = rng.uniform(-0.15, 0.15) / size;
  const double phase = rng.uniform(0, 2 * kPi);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double wave = std::sin(fx * x + fy * y + phase);
      for (int c = 0; c < 3; ++c) {
        const double noise = rng.uniform(-0.04, 0.04);
        px[(static_cast<std::size_t>(y) * size + x) * 3 + c] = base[c] + amp[c] * wave + gx * x + gy * y + noise;
      }
    }
  }
}

void render_shape(std::vector<double>& px, int size, ShapeKind kind, const Box& b, const double color[3]) {
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x1))), x1 = std::min(size, static_cast<int>(std::ceil(b.x2)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y1))), y1 = std::min(size, static_cast<int>(std::ceil(b.y2)));
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuperSamples; ++sy) {
        for (int sx = 0; sx < kSuperSamples; ++sx) {
          const double u = (x + (sx + 0.5) / kSuperSamples - b.x1) / b.width();
          const double v = (y + (sy + 0.5) / kSuperSamples - b.y1) / b.height();
          if (u >= 0 && u <= 1 && v >= 0 && v <= 1 && inside(kind, u, v)) ++hits;
        }
      }
      if (hits == 0) continue;
      const double a = static_cast<double>(hits) / (kSuperSamples * kSuperSamples);
      double* p = &px[(static_cast<std::size_t>(y) * size + x) * 3];
      for (int c = 0; c < 3; ++c) p[c] = (1 - a) * p[c] + a * color[c];
    }
  }
}

}  // namespace

std::string shape_name(int label) {
  static const char* names[kMaxShapeClasses] = {"circle", "square", "triangle", "diamond", "ellipse", "cross"};
  if (label < 0 || label >= kMaxShapeClasses) throw std::out_of_range("shape_name: label");
  return names[label];
}

Scene generate_scene(std::uint64_t seed, int num_classes, const SceneConfig& config) {
  if (num_classes < 2 || num_classes > kMaxShapeClasses) {
    throw std::invalid_argument("generate_scene: num_classes must be in [2, " + std::to_string(kMaxShapeClasses) + "]");
  }
  const int size = config.size;
  if (config.max_extent + 2 > size || config.min_extent < 4) throw std::invalid_argument("generate_scene: bad extents");
  Rng rng(seed);
  std::vector<double> px(static_cast<std::size_t>(size) * size * 3);
  render_background(px, size, rng);

  Scene scene;
  scene.seed = seed;
  const int count = rng.uniform_int(config.min_objects, config.max_objects);
  for (int n = 0; n < count; ++n) {
    const int label = rng.uniform_int(0, num_classes - 1);
    const auto kind = static_cast<ShapeKind>(label);
    const double w = rng.uniform(config.min_extent, config.max_extent);
    double h = w;
    if (kind == ShapeKind::ellipse) h = std::max(config.min_extent, w * rng.uniform(0.45, 0.7));
    // Placement keeps objects inside the image and mostly unoccluded.
    bool placed = false;
    Box box;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      const double x = rng.uniform(1, size - 1 - w), y = rng.uniform(1, size - 1 - h);
      box = {x, y, x + w, y + h};
      placed = std::all_of(scene.instances.begin(), scene.instances.end(),
                           [&](const Instance& o) { return overlap_of_smaller(o.box, box) < 0.1; });
    }
    if (!placed) continue;
    const std::size_t centre = (static_cast<std::size_t>(box.cy()) * size + static_cast<std::size_t>(box.cx())) * 3;
    double color[3];
    for (int attempt = 0;; ++attempt) {
      double contrast = 0;
      for (int c = 0; c < 3; ++c) {
        color[c] = rng.uniform(0.0, 1.0);
        contrast = std::max(contrast, std::abs(color[c] - px[centre + c]));
      }
      if (contrast > 0.3 || attempt > 20) break;
    }
    render_shape(px, size, kind, box, color);
    scene.instances.push_back({box, label});
  }

  std::vector<Real> img(px.size());
  for (std::size_t i = 0; i < px.size(); ++i) img[i] = static_cast<Real>(quantize(px[i]));
  scene.image = Tensor::from({size, size, 3}, std::move(img));
  return scene;
}

std::vector<Scene> generate_scenes(std::uint64_t corpus_seed, int first, int count, int num_classes,
                                   const SceneConfig& config) {
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (int i = first; i < first + count; ++i) {
    scenes.push_back(generate_scene(Rng::derive(corpus_seed, static_cast<std::uint64_t>(i)), num_classes, config));
  }
  return scenes;
}

Scene flip_horizontal(const Scene& scene) {
  const int h = scene.image.dim(0), w = scene.image.dim(1), c = scene.image.dim(2);
  const auto src = scene.image.data();
  std::vector<Real> out(src.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        out[(static_cast<std::size_t>(y) * w + x) * c + ch] = src[(static_cast<std::size_t>(y) * w + (w - 1 - x)) * c + ch];
      }
    }
  }
  Scene flipped;
  flipped.seed = scene.seed;
  flipped.image = Tensor::from(scene.image.shape(), std::move(out));
  for (const auto& inst : scene.instances) {
    flipped.instances.push_back({{w - inst.box.x2, inst.box.y1, w - inst.box.x1, inst.box.y2}, inst.label});
  }
  return flipped;
}

std::vector<Box> jitter_proposals(std::span<const Box> gts, int n_per_gt, Rng& rng, const JitterConfig& config) {
  if (n_per_gt < 1) throw std::invalid_argument("jitter_proposals: n_per_gt must be at least 1");
  std::vector<Box> out;
  for (const Box& g : gts) {
    for (int i = 0; i < n_per_gt; ++i) {
      for (int attempt = 0;; ++attempt) {
        const double cx = g.cx() + rng.uniform(-config.center, config.center) * g.width();
        const double cy = g.cy() + rng.uniform(-config.center, config.center) * g.height();
        const double w = g.width() * std::exp(rng.uniform(-config.log_scale, config.log_scale));
        const double h = g.height() * std::exp(rng.uniform(-config.log_scale, config.log_scale));
        const Box b = clip_box({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}, config.image_w, config.image_h);
        if ((b.width() >= config.min_side && b.height() >= config.min_side) || attempt >= 100) {
          out.push_back(b);
          break;
        }
      }
    }
  }
  const std::size_t background = out.size();
  const double lo = 12, hi = std::min({64.0, config.image_w, config.image_h});
  for (std::size_t i = 0; i < background; ++i) {
    const double w = rng.uniform(lo, hi), h = rng.uniform(lo, hi);
    const double x = rng.uniform(0, config.image_w - w), y = rng.uniform(0, config.image_h - h);
    out.push_back({x, y, x + w, y + h});
  }
  return out;
}

std::vector<Box> grid_proposals(double image_w, double image_h, std::span<const double> scales) {
  static const double kDefaultScales[] = {16, 22, 30, 40, 54};
  if (scales.empty()) scales = kDefaultScales;
  const double aspects[] = {1.0, 2.0, 0.5};
  std::vector<Box> out;
  for (double s : scales) {
    for (double a : aspects) {
      const double w = s * std::sqrt(a), h = s / std::sqrt(a);
      if (w > image_w || h > image_h) continue;
      const double sx = 0.5 * w, sy = 0.5 * h;
      const int nx = static_cast<int>(std::floor((image_w - w) / sx)) + 1;
      const int ny = static_cast<int>(std::floor((image_h - h) / sy)) + 1;
      // Centre the lattice so the leftover margin is split evenly.
      const double ox = 0.5 * (image_w - w - (nx - 1) * sx), oy = 0.5 * (image_h - h - (ny - 1) * sy);
      for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
          const double x = ox + i * sx, y = oy + j * sy;
          out.push_back({x, y, x + w, y + h});
        }
      }
    }
  }
  return out;
}

Box image_to_feature(const Box& b) {
  auto f = [](double v) { return (v - 0.5) / kFeatureStride; };
  return {f(b.x1), f(b.y1), f(b.x2), f(b.y2)};
}

Box feature_to_image(const Box& b) {
  auto f = [](double v) { return v * kFeatureStride + 0.5; };
  return {f(b.x1), f(b.y1), f(b.x2), f(b.y2)};
}

TinyBackbone TinyBackbone::create(int channels, Rng& rng) {
  if (channels < 1) throw std::invalid_argument("TinyBackbone: channels must be positive");
  struct Spec {
    int in, out, stride;
  };
  const Spec specs[] = {{3, 16, 2}, {16, 32, 2}, {32, 32, 1}, {32, channels, 2}, {channels, channels, 1}};
  TinyBackbone b;
  for (const Spec& s : specs) b.layers.push_back(Conv2dLayer::uniform(s.in, s.out, 3, s.stride, relu_bound(9 * s.in), rng));
  return b;
}

Tensor TinyBackbone::forward(const Tensor& image) const {
  Tensor x = add_scalar(image, Real(-0.5));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].forward(x);
    if (i + 1 < layers.size()) x = relu(x);
  }
  return x;
}

void TinyBackbone::register_params(ParamSet& params) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].register_params(params, "backbone.conv" + std::to_string(i));
}

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw ShapeError("write_ppm: need an H×W×3 image");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "P6\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
  std::string bytes(image.numel(), '\0');
  for (std::size_t i = 0; i < image.numel(); ++i) {
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp<double>(image.at(i), 0, 1) * 255)));
  }
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

namespace {

// Next whitespace-separated header token, skipping '#' comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

}  // namespace

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  if (pnm_token(f) != "P6") throw std::runtime_error(path.string() + ": not a binary PPM");
  const int w = std::stoi(pnm_token(f)), h = std::stoi(pnm_token(f)), maxval = std::stoi(pnm_token(f));
  if (w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error(path.string() + ": unsupported PPM header");
  std::string bytes(static_cast<std::size_t>(w) * h * 3, '\0');
  if (!f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) throw std::runtime_error(path.string() + ": truncated");
  std::vector<Real> v(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) v[i] = static_cast<Real>(static_cast<unsigned char>(bytes[i]) / 255.0);
  return Tensor::from({h, w, 3}, std::move(v));
}

void write_pgm(const std::filesystem::path& path, std::span<const double> values, int height, int width) {
  if (values.size() != static_cast<std::size_t>(height) * width) throw ShapeError("write_pgm: size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "P5\n" << width << " " << height << "\n255\n";
  std::string bytes(values.size(), '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(values[i], 0.0, 1.0) * 255)));
  }
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void write_split(const std::filesystem::path& dir, std::span<const Scene> scenes) {
  std::filesystem::create_directories(dir);
  std::ofstream ann(dir / "annotations.jsonl");
  if (!ann) throw std::runtime_error("cannot write " + (dir / "annotations.jsonl").string());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << i << ".ppm";
    write_ppm(dir / name.str(), scenes[i].image);
    nlohmann::json boxes = nlohmann::json::array(), labels = nlohmann::json::array();
    for (const auto& inst : scenes[i].instances) {
      boxes.push_back({inst.box.x1, inst.box.y1, inst.box.x2, inst.box.y2});
      labels.push_back(inst.label);
    }
    ann << nlohmann::json{{"image", name.str()}, {"boxes", boxes}, {"labels", labels}, {"seed", scenes[i].seed}}.dump()
        << "\n";
  }
}

std::vector<Scene> read_split(const std::filesystem::path& dir) {
  std::ifstream ann(dir / "annotations.jsonl");
  if (!ann) throw std::runtime_error("cannot read " + (dir / "annotations.jsonl").string());
  std::vector<Scene> scenes;
  std::string line;
  int line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    Scene s;
    s.image = read_ppm(dir / j.at("image").get<std::string>());
    s.seed = j.value("seed", std::uint64_t{0});
    const auto& boxes = j.at("boxes");
    const auto& labels = j.at("labels");
    if (boxes.size() != labels.size()) {
      throw std::runtime_error(dir.string() + ":" + std::to_string(line_no) + ": boxes and labels differ in length");
    }
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      const Box b{boxes[i].at(0).get<double>(), boxes[i].at(1).get<double>(), boxes[i].at(2).get<double>(),
                  boxes[i].at(3).get<double>()};
      if (!(b.width() > 0 && b.height() > 0)) {
        std::cerr << dir.string() << ":" << line_no << ": dropping degenerate box " << i << "\n";
        continue;
      }
      s.instances.push_back({b, labels[i].get<int>()});
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

TSD_NAMESPACE_END
