// SPDX-License-Identifier: Apache-2.0
//
// Random scene sampling and a deterministic 2D raster renderer.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "groundkit/rng.hpp"
#include "groundkit/scene.hpp"

namespace groundkit {

struct SceneSpec {
  int min_objects = 5;
  int max_objects = 10;
  int width = kDefaultWidth;
  int height = kDefaultHeight;
  PredicateMargins margins;
};

// Placement rejection thresholds.
inline constexpr double kMaxPairIou = 0.1;
inline constexpr double kMinCenterDistance = 0.12;
inline constexpr double kMaxCoveredFraction = 0.15;  // of the smaller bbox
inline constexpr int kPlacementAttempts = 100;
inline constexpr double kDuplicateBias = 0.35;

inline bool placement_ok(const SceneObject& cand, const std::vector<SceneObject>& placed) {
  for (const auto& o : placed) {
    if (iou(cand.bbox, o.bbox) > kMaxPairIou) return false;
    if (std::hypot(cand.world_x - o.world_x, cand.world_y - o.world_y) < kMinCenterDistance) return false;
    const int smaller = std::min(cand.bbox.area(), o.bbox.area());
    if (intersection_area(cand.bbox, o.bbox) > kMaxCoveredFraction * smaller) return false;
  }
  return true;
}

/// Samples a scene with a full relation tensor. The same seed always yields
/// the same scene.
inline SceneGraph sample_scene(std::uint64_t rng_seed, const Catalogue& catalogue, const SceneSpec& spec = {},
                               std::uint64_t scene_id = 0) {
  if (spec.min_objects < 1 || spec.max_objects > 15 || spec.min_objects > spec.max_objects)
    throw Error("sample_scene: object range must lie within [1, 15]");
  if (catalogue.instances.empty()) throw Error("sample_scene: empty catalogue");

  Rng rng(rng_seed);
  std::vector<std::vector<std::size_t>> by_category(catalogue.categories.size());
  for (std::size_t i = 0; i < catalogue.instances.size(); ++i)
    by_category[catalogue.instances[i].category].push_back(i);

  int target = static_cast<int>(rng.uniform_int(spec.min_objects, spec.max_objects));
  std::vector<SceneObject> placed;
  while (static_cast<int>(placed.size()) < target) {
    bool ok = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
      std::size_t inst;
      if (!placed.empty() && rng.bernoulli(kDuplicateBias)) {
        const auto& other = placed[rng.index(placed.size())];
        inst = rng.bernoulli(0.5) ? other.instance : rng.pick(by_category[catalogue.instances[other.instance].category]);
      } else {
        inst = rng.index(catalogue.instances.size());
      }
      const double size = rng.uniform(0.85, 1.15);
      const double wx = rng.uniform(-1.0, 1.0);
      const double wy = rng.uniform(0.0, 1.0);
      auto cand = make_object(placed.size(), inst, wx, wy, size, catalogue, spec.width, spec.height);
      if (placement_ok(cand, placed)) {
        placed.push_back(cand);
        ok = true;
      }
    }
    if (!ok) {
      --target;
      if (target < spec.min_objects) throw Error("workspace too crowded");
    }
  }

  SceneGraph s;
  s.scene_id = scene_id;
  s.image_seed = rng_seed;
  s.width = spec.width;
  s.height = spec.height;
  s.objects = std::move(placed);
  s.relations = build_relation_tensor(s.objects, spec.margins);
  return s;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct Raster {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Raster() = default;
  Raster(int w, int h, Rgb fill) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3) {
    for (std::size_t p = 0; p < rgb.size(); p += 3) {
      rgb[p] = fill.r;
      rgb[p + 1] = fill.g;
      rgb[p + 2] = fill.b;
    }
  }

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

  Rgb at(int x, int y) const {
    const auto p = (static_cast<std::size_t>(y) * width + x) * 3;
    return {rgb[p], rgb[p + 1], rgb[p + 2]};
  }
  void put(int x, int y, Rgb c) {
    const auto p = (static_cast<std::size_t>(y) * width + x) * 3;
    rgb[p] = c.r;
    rgb[p + 1] = c.g;
    rgb[p + 2] = c.b;
  }

  Raster crop(const BBox& b) const {
    Raster out(b.w, b.h, {});
    for (int y = 0; y < b.h; ++y)
      for (int x = 0; x < b.w; ++x) out.put(x, y, at(b.x + x, b.y + y));
    return out;
  }

  friend bool operator==(const Raster&, const Raster&) = default;
};

inline constexpr Rgb kBackground{128, 128, 128};

enum class Glyph : std::uint8_t { Rect, Circle, Octagon, Plus, Hexagon, House, Trapezoid, RoundedRect };
inline constexpr std::size_t kGlyphCount = 8;

inline Glyph glyph_for_category(std::size_t category) { return static_cast<Glyph>(category % kGlyphCount); }

/// Whether the normalized point (u, v) in [0,1]^2 lies inside the glyph.
/// Every glyph covers at least 78% of its bounding square.
inline bool glyph_contains(Glyph g, double u, double v) {
  const double du = std::abs(u - 0.5), dv = std::abs(v - 0.5);
  switch (g) {
    case Glyph::Rect: return true;
    case Glyph::Circle: return du * du + dv * dv <= 0.25;
    case Glyph::Octagon: return du + dv <= 0.75;
    case Glyph::Plus: return du <= 0.3 || dv <= 0.3;
    case Glyph::Hexagon: return du <= 0.3 + 0.2 * (1.0 - dv / 0.5);
    case Glyph::House: return v >= 0.3 || du <= 0.5 * v / 0.3;
    case Glyph::Trapezoid: return du <= 0.3 + 0.2 * v;
    case Glyph::RoundedRect: {
      const double r = 0.2;
      const double cx = std::max(0.0, du - (0.5 - r)), cy = std::max(0.0, dv - (0.5 - r));
      return cx * cx + cy * cy <= r * r;
    }
  }
  return false;
}

struct RenderedScene {
  SceneGraph scene;
  Raster pixels;
  std::vector<Raster> crops;
};

/// Painter's order: far objects first so nearer glyphs overdraw them.
inline std::vector<std::size_t> draw_order(const SceneGraph& s) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return s.objects[a].world_y > s.objects[b].world_y; });
  return order;
}

inline Raster render_pixels(const SceneGraph& s, const Catalogue& catalogue) {
  Raster img(s.width, s.height, kBackground);
  for (auto i : draw_order(s)) {
    const auto& o = s.objects[i];
    const auto glyph = glyph_for_category(catalogue.instances.at(o.instance).category);
    const Rgb fill = catalogue.color_of(o.instance).rgb;
    for (int y = 0; y < o.bbox.h; ++y)
      for (int x = 0; x < o.bbox.w; ++x) {
        const double u = (x + 0.5) / o.bbox.w, v = (y + 0.5) / o.bbox.h;
        if (glyph_contains(glyph, u, v)) img.put(o.bbox.x + x, o.bbox.y + y, fill);
      }
  }
  return img;
}

inline RenderedScene render(const SceneGraph& s, const Catalogue& catalogue) {
  RenderedScene out{s, render_pixels(s, catalogue), {}};
  out.crops.reserve(s.size());
  for (const auto& o : s.objects) out.crops.push_back(out.pixels.crop(o.bbox));
  return out;
}

/// Outlines a bbox in place (used to annotate a grounding prediction).
inline void draw_outline(Raster& img, const BBox& b, Rgb color, int thickness = 2) {
  for (int t = 0; t < thickness; ++t) {
    const int x0 = std::max(0, b.x - t - 1), x1 = std::min(img.width - 1, b.x + b.w + t);
    const int y0 = std::max(0, b.y - t - 1), y1 = std::min(img.height - 1, b.y + b.h + t);
    for (int x = x0; x <= x1; ++x) {
      img.put(x, y0, color);
      img.put(x, y1, color);
    }
    for (int y = y0; y <= y1; ++y) {
      img.put(x0, y, color);
      img.put(x1, y, color);
    }
  }
}

// ---------------------------------------------------------------------------
// PPM (binary P6)
// ---------------------------------------------------------------------------

inline void write_ppm(const std::string& path, const Raster& img, const std::string& comment = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "P6\n";
  if (!comment.empty()) out << "# " << comment << "\n";
  out << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

inline Raster read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  auto next_token = [&]() {
    std::string tok;
    while (tok.empty()) {
      int c = in.peek();
      if (c == EOF) throw Error("truncated ppm: " + path);
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        in >> tok;
      }
    }
    return tok;
  };
  if (next_token() != "P6") throw Error("not a P6 ppm: " + path);
  Raster img;
  img.width = std::stoi(next_token());
  img.height = std::stoi(next_token());
  if (std::stoi(next_token()) != 255) throw Error("unsupported ppm depth: " + path);
  in.get();
  img.rgb.resize(img.pixel_count() * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!in) throw Error("truncated ppm: " + path);
  return img;
}

}  // namespace groundkit
