#pragma once

// Procedural handwritten-style digits in the MNIST layout (28x28, glyph in a
// centred 20x20 box, dark background). Each glyph is a set of polylines that
// gets jittered, randomly transformed and rasterised with anti-aliasing.
// Pixels are quantised to bytes so the output survives an IDX round trip.

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "fednia/data.hpp"

namespace fednia::synth {

struct Point {
  double x, y;
};
using Stroke = std::vector<Point>;

namespace detail {

inline Stroke arc(double cx, double cy, double rx, double ry, double deg0, double deg1, int steps = 16) {
  Stroke s;
  for (int i = 0; i <= steps; ++i) {
    const double t = (deg0 + (deg1 - deg0) * i / steps) * std::numbers::pi / 180.0;
    s.push_back({cx + rx * std::cos(t), cy + ry * std::sin(t)});
  }
  return s;
}

inline Stroke join(Stroke a, const Stroke& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Unit box, y pointing down. Angles in degrees, 0 = +x, 90 = down.
inline std::vector<Stroke> glyph(int digit, Rng& rng) {
  switch (digit) {
    case 0:
      return {arc(0.5, 0.5, 0.32, 0.45, 0, 360, 24)};
    case 1: {
      std::vector<Stroke> g{{{0.52, 0.05}, {0.48, 0.95}}};
      if (rng.bernoulli(0.5)) g.push_back({{0.32, 0.22}, {0.52, 0.05}});
      return g;
    }
    case 2:
      return {join(arc(0.5, 0.3, 0.3, 0.25, 180, 370, 12), Stroke{{0.2, 0.95}, {0.85, 0.95}})};
    case 3:
      return {join(arc(0.45, 0.28, 0.3, 0.23, 200, 450, 12), arc(0.45, 0.72, 0.33, 0.23, 270, 520, 12))};
    case 4: {
      std::vector<Stroke> g{{{0.65, 0.95}, {0.65, 0.05}}, {{0.65, 0.05}, {0.12, 0.65}, {0.88, 0.65}}};
      return g;
    }
    case 5:
      return {join(Stroke{{0.82, 0.05}, {0.28, 0.05}, {0.24, 0.45}}, arc(0.48, 0.66, 0.32, 0.28, 220, 500, 14))};
    case 6:
      return {join(Stroke{{0.72, 0.05}, {0.4, 0.3}}, arc(0.5, 0.68, 0.28, 0.27, 200, 560, 20))};
    case 7: {
      std::vector<Stroke> g{{{0.12, 0.05}, {0.88, 0.05}, {0.42, 0.95}}};
      if (rng.bernoulli(0.3)) g.push_back({{0.4, 0.5}, {0.78, 0.5}});
      return g;
    }
    case 8:
      return {arc(0.5, 0.27, 0.24, 0.22, 0, 360, 18), arc(0.5, 0.71, 0.29, 0.24, 0, 360, 18)};
    case 9:
      return {join(arc(0.5, 0.32, 0.27, 0.26, 0, 360, 20), Stroke{{0.77, 0.32}, {0.62, 0.95}})};
    default:
      fail(ErrorKind::Config, "digit out of range");
  }
}

inline double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace detail

struct SynthOptions {
  std::size_t side = 28;
  double box = 20.0;  // glyph box edge in pixels
  double max_rotation_deg = 18.0;
  double max_shear = 0.35;
  double jitter = 0.07;
  double stray_probability = 0.25;  // chance of one extra random stroke
  double min_thickness = 1.0;
  double max_thickness = 2.2;
  double max_shift = 2.0;
};

/// Renders one digit into `out` (side*side floats in [0,1]).
inline void render_digit(int digit, Rng& rng, const SynthOptions& o, std::span<float> out) {
  auto strokes = detail::glyph(digit, rng);
  if (rng.bernoulli(o.stray_probability)) {
    const Point a{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};
    strokes.push_back({a, {a.x + rng.uniform(-0.4, 0.4), a.y + rng.uniform(-0.4, 0.4)}});
  }
  const double rot = rng.uniform(-o.max_rotation_deg, o.max_rotation_deg) * std::numbers::pi / 180.0;
  const double shear = rng.uniform(-o.max_shear, o.max_shear);
  const double sx = rng.uniform(0.75, 1.05) * o.box, sy = rng.uniform(0.85, 1.05) * o.box;
  const double cx = o.side / 2.0 + rng.uniform(-o.max_shift, o.max_shift);
  const double cy = o.side / 2.0 + rng.uniform(-o.max_shift, o.max_shift);
  const double thick = rng.uniform(o.min_thickness, o.max_thickness);
  const double c = std::cos(rot), s = std::sin(rot);

  for (auto& stroke : strokes)
    for (auto& p : stroke) {
      double x = p.x - 0.5 + rng.uniform(-o.jitter, o.jitter);
      double y = p.y - 0.5 + rng.uniform(-o.jitter, o.jitter);
      x += shear * y;
      x *= sx;
      y *= sy;
      p = {cx + c * x - s * y, cy + s * x + c * y};
    }

  const double ink = rng.uniform(0.8, 1.0);
  for (std::size_t r = 0; r < o.side; ++r)
    for (std::size_t col = 0; col < o.side; ++col) {
      const Point px{col + 0.5, r + 0.5};
      double d = 1e9;
      for (const auto& stroke : strokes)
        for (std::size_t i = 0; i + 1 < stroke.size(); ++i)
          d = std::min(d, detail::segment_distance(px, stroke[i], stroke[i + 1]));
      const double v = std::clamp(ink * (1.0 - (d - thick / 2.0)), 0.0, 1.0);
      out[r * o.side + col] = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
    }
}

/// `count` digits with labels cycling through a seeded shuffle of 0..9, so
/// classes are balanced to within one sample.
inline LabeledDataset make_digits(std::size_t count, std::uint64_t seed, const SynthOptions& o = {}) {
  LabeledDataset ds;
  ds.num_classes = 10;
  ds.image_rows = ds.image_cols = o.side;
  ds.samples.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(o.side * o.side));
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) ds.labels[i] = static_cast<int>(i % 10);
  Rng order(derive_seed(seed, "synth-labels"));
  order.shuffle(ds.labels.begin(), ds.labels.end());
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, "synth-digit", {i}));
    render_digit(ds.labels[i], rng, o,
                 std::span<float>(ds.samples.row(static_cast<Eigen::Index>(i)).data(), o.side * o.side));
  }
  return ds;
}

}  // namespace fednia::synth
