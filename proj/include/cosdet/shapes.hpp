#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cosdet/boxes.hpp"
#include "cosdet/model.hpp"
#include "cosdet/rng.hpp"
#include "cosdet/tensor.hpp"

namespace cosdet {

inline constexpr int kNumShapeClasses = 10;

inline const char* shape_class_name(int c) {
  static const char* names[kNumShapeClasses] = {"circle", "square",  "triangle", "cross",
                                                "star",   "ring",    "diamond",  "bar",
                                                "lshape", "tshape"};
  return names[c];
}

struct SceneObject {
  int class_id = 0;
  Box box;  // analytic tight bounds, image pixels
  double cx = 0.0, cy = 0.0;
  double radius = 0.0;
  double rotation = 0.0;
  std::array<double, 3> color{};
};

struct ShapesImage {
  std::uint64_t dataset_seed = 0;
  int index = 0;
  int width = kImageSize;
  int height = kImageSize;
  std::vector<double> pixels;  // [3,H,W], values in [0,1]
  std::array<double, 3> bg_color{};
  std::vector<SceneObject> objects;
};

namespace shapedet {

// local-frame polygon outlines, unit radius; circle and ring are analytic
inline std::vector<std::pair<double, double>> shape_polygon(int class_id) {
  using P = std::pair<double, double>;
  switch (class_id) {
    case 1: {  // square, half-side 0.8
      const double a = 0.8;
      return {P{-a, -a}, P{a, -a}, P{a, a}, P{-a, a}};
    }
    case 2: {  // equilateral triangle, circumradius 1
      std::vector<P> v;
      for (int i = 0; i < 3; ++i) {
        const double t = (90.0 + 120.0 * i) * 3.14159265358979323846 / 180.0;
        v.emplace_back(std::cos(t), std::sin(t));
      }
      return v;
    }
    case 3: {  // cross, arm half-width 0.35
      const double t = 0.35;
      return {P{t, t},  P{t, 1},  P{-t, 1},  P{-t, t},  P{-1, t},  P{-1, -t},
              P{-t, -t}, P{-t, -1}, P{t, -1}, P{t, -t}, P{1, -t}, P{1, t}};
    }
    case 4: {  // five-point star, inner radius 0.5
      std::vector<P> v;
      for (int i = 0; i < 10; ++i) {
        const double r = (i % 2 == 0) ? 1.0 : 0.5;
        const double t = (90.0 + 36.0 * i) * 3.14159265358979323846 / 180.0;
        v.emplace_back(r * std::cos(t), r * std::sin(t));
      }
      return v;
    }
    case 6:  // diamond
      return {P{1, 0}, P{0, 1}, P{-1, 0}, P{0, -1}};
    case 7: {  // bar, aspect ~3:1
      const double h = 0.3;
      return {P{-1, -h}, P{1, -h}, P{1, h}, P{-1, h}};
    }
    case 8: {  // L-shape, arm thickness 0.8
      const double t = 0.8;
      return {P{-1, -1}, P{1, -1}, P{1, -1 + t}, P{-1 + t, -1 + t}, P{-1 + t, 1}, P{-1, 1}};
    }
    case 9: {  // T-shape, bar thickness 0.8, stem half-width 0.4
      const double t = 0.8, s = 0.4;
      return {P{-1, -1}, P{1, -1}, P{1, -1 + t}, P{s, -1 + t},
              P{s, 1},   P{-s, 1}, P{-s, -1 + t}, P{-1, -1 + t}};
    }
    default:
      return {};
  }
}

inline bool point_in_polygon(const std::vector<std::pair<double, double>>& poly, double px,
                             double py) {
  bool inside = false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto& [xi, yi] = poly[i];
    const auto& [xj, yj] = poly[j];
    if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
  }
  return inside;
}

// membership of an image point in the object, in world coordinates
inline bool point_in_object(const SceneObject& o, double wx, double wy) {
  const double dx = wx - o.cx, dy = wy - o.cy;
  const double c = std::cos(-o.rotation), s = std::sin(-o.rotation);
  const double lx = (dx * c - dy * s) / o.radius;
  const double ly = (dx * s + dy * c) / o.radius;
  switch (o.class_id) {
    case 0:  // circle
      return lx * lx + ly * ly <= 1.0;
    case 5:  // ring, inner radius 0.55
      {
        const double d2 = lx * lx + ly * ly;
        return d2 <= 1.0 && d2 >= 0.55 * 0.55;
      }
    default: {
      static thread_local std::vector<std::pair<double, double>> cache[kNumShapeClasses];
      auto& poly = cache[o.class_id];
      if (poly.empty()) poly = shape_polygon(o.class_id);
      return point_in_polygon(poly, lx, ly);
    }
  }
}

// analytic tight bounding box: rotated vertex extremes, or the radius for
// circle and ring
inline Box object_bounds(const SceneObject& o) {
  if (o.class_id == 0 || o.class_id == 5)
    return Box{o.cx - o.radius, o.cy - o.radius, o.cx + o.radius, o.cy + o.radius};
  const auto poly = shape_polygon(o.class_id);
  const double c = std::cos(o.rotation), s = std::sin(o.rotation);
  double x1 = 1e30, y1 = 1e30, x2 = -1e30, y2 = -1e30;
  for (const auto& [vx, vy] : poly) {
    const double wx = o.cx + o.radius * (vx * c - vy * s);
    const double wy = o.cy + o.radius * (vx * s + vy * c);
    x1 = std::min(x1, wx);
    y1 = std::min(y1, wy);
    x2 = std::max(x2, wx);
    y2 = std::max(y2, wy);
  }
  return Box{x1, y1, x2, y2};
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

// render one object onto a binary mask; 2x2 subsamples per pixel
inline std::vector<char> rasterize_object(const SceneObject& o, int width, int height) {
  std::vector<char> mask(static_cast<std::size_t>(width) * height, 0);
  const Box b = o.box;
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x1)) - 1);
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y1)) - 1);
  const int x1 = std::min(width - 1, static_cast<int>(std::ceil(b.x2)) + 1);
  const int y1 = std::min(height - 1, static_cast<int>(std::ceil(b.y2)) + 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      bool hit = false;
      for (int sy = 0; sy < 2 && !hit; ++sy)
        for (int sx = 0; sx < 2 && !hit; ++sx)
          hit = point_in_object(o, x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy);
      if (hit) mask[static_cast<std::size_t>(y) * width + x] = 1;
    }
  return mask;
}

}  // namespace shapedet

// Deterministic per-index generation: image i depends only on (seed, i), so
// any image can be regenerated without knowing the dataset size. Object
// classes follow the low-discrepancy rule (7*i + j) mod 10, which keeps the
// class histogram near uniform; count, placement, color and rotation are
// drawn from the per-image stream.
inline ShapesImage generate_image(std::uint64_t dataset_seed, int index) {
  Rng rng(mix_seed(dataset_seed, static_cast<std::uint64_t>(index)));
  ShapesImage img;
  img.dataset_seed = dataset_seed;
  img.index = index;
  img.bg_color = shapedet::hsv_to_rgb(rng.uniform(), rng.uniform(0.2, 0.6), rng.uniform(0.08, 0.30));

  const int count = 1 + static_cast<int>(rng.uniform_index(4));
  for (int j = 0; j < count; ++j) {
    SceneObject obj;
    obj.class_id = static_cast<int>((7 * static_cast<std::uint64_t>(index) + static_cast<std::uint64_t>(j)) % kNumShapeClasses);
    bool placed = false;
    for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
      obj.radius = rng.uniform(7.0, 16.0);
      obj.cx = rng.uniform(obj.radius + 1.5, kImageSize - obj.radius - 1.5);
      obj.cy = rng.uniform(obj.radius + 1.5, kImageSize - obj.radius - 1.5);
      obj.rotation = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      obj.box = shapedet::object_bounds(obj);
      if (obj.box.x1 < 1.0 || obj.box.y1 < 1.0 || obj.box.x2 > kImageSize - 1.0 ||
          obj.box.y2 > kImageSize - 1.0)
        continue;
      bool overlaps = false;
      for (const auto& other : img.objects)
        if (iou(obj.box, other.box) > 0.3) overlaps = true;
      if (overlaps) continue;
      placed = true;
    }
    if (!placed) continue;
    obj.color = shapedet::hsv_to_rgb(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.55, 1.0));
    img.objects.push_back(obj);
  }

  // paint: background fill, then objects in order
  img.pixels.assign(static_cast<std::size_t>(3) * kImageSize * kImageSize, 0.0);
  for (int c = 0; c < 3; ++c)
    std::fill(img.pixels.begin() + static_cast<std::ptrdiff_t>(c) * kImageSize * kImageSize,
              img.pixels.begin() + static_cast<std::ptrdiff_t>(c + 1) * kImageSize * kImageSize,
              img.bg_color[static_cast<std::size_t>(c)]);
  for (const auto& obj : img.objects) {
    const auto mask = shapedet::rasterize_object(obj, kImageSize, kImageSize);
    for (int y = 0; y < kImageSize; ++y)
      for (int x = 0; x < kImageSize; ++x)
        if (mask[static_cast<std::size_t>(y) * kImageSize + x])
          for (int c = 0; c < 3; ++c)
            img.pixels[(static_cast<std::size_t>(c) * kImageSize + y) * kImageSize + x] =
                obj.color[static_cast<std::size_t>(c)];
  }
  return img;
}

inline std::vector<ShapesImage> generate_dataset(std::uint64_t seed, int num_images) {
  check(num_images >= 1, "generate_dataset: need at least one image");
  std::vector<ShapesImage> out;
  out.reserve(static_cast<std::size_t>(num_images));
  for (int i = 0; i < num_images; ++i) out.push_back(generate_image(seed, i));
  return out;
}

inline Tensor image_to_tensor(const ShapesImage& img) {
  return Tensor(Shape{3, img.height, img.width}, img.pixels, false);
}

inline ShapesImage hflip_image(const ShapesImage& src) {
  ShapesImage out = src;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x)
        out.pixels[(static_cast<std::size_t>(c) * src.height + y) * src.width + x] =
            src.pixels[(static_cast<std::size_t>(c) * src.height + y) * src.width +
                       (src.width - 1 - x)];
  for (auto& obj : out.objects) {
    obj.box = obj.box.hflip(src.width);
    obj.cx = src.width - obj.cx;
  }
  return out;
}

// bilinear crop of an image region into a [3, size, size] tensor
inline Tensor crop_and_resize(const ShapesImage& img, const Box& box, int size = kCropSize) {
  check(box.valid(), "crop_and_resize: degenerate (zero-area) crop box");
  const double bw = box.width(), bh = box.height();
  std::vector<double> out(static_cast<std::size_t>(3) * size * size);
  for (int oy = 0; oy < size; ++oy)
    for (int ox = 0; ox < size; ++ox) {
      const double sx = box.x1 + (ox + 0.5) * bw / size - 0.5;
      const double sy = box.y1 + (oy + 0.5) * bh / size - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < 3; ++c) {
        auto px = [&](int x, int y) {
          x = std::clamp(x, 0, img.width - 1);
          y = std::clamp(y, 0, img.height - 1);
          return img.pixels[(static_cast<std::size_t>(c) * img.height + y) * img.width + x];
        };
        const double v = (1 - fx) * (1 - fy) * px(x0, y0) + fx * (1 - fy) * px(x0 + 1, y0) +
                         (1 - fx) * fy * px(x0, y0 + 1) + fx * fy * px(x0 + 1, y0 + 1);
        out[(static_cast<std::size_t>(c) * size + oy) * size + ox] = v;
      }
    }
  return Tensor(Shape{3, size, size}, std::move(out), false);
}

inline Tensor hflip_crop(const Tensor& crop) {
  const int C = crop.dim(0), H = crop.dim(1), W = crop.dim(2);
  std::vector<double> out(crop.size());
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        out[(static_cast<std::size_t>(c) * H + y) * W + x] =
            crop.values()[(static_cast<std::size_t>(c) * H + y) * W + (W - 1 - x)];
  return Tensor(crop.shape(), std::move(out), false);
}

}  // namespace cosdet
