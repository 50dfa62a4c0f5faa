// SPDX-License-Identifier: Apache-2.0
//
// World model for synthetic tabletop scenes: the object catalogue, scene
// objects with their projected bounding boxes, and the geometric predicates
// that populate the pairwise relation annotations of a scene graph.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "groundkit/error.hpp"

namespace groundkit {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Relations
// ---------------------------------------------------------------------------

enum class Relation : std::uint8_t { Left, Right, Further, Closer, Behind, Front, Bigger, Smaller, NextTo };

inline constexpr std::size_t kRelationCount = 9;

inline constexpr std::array<Relation, kRelationCount> kAllRelations = {
    Relation::Left,   Relation::Right,  Relation::Further, Relation::Closer, Relation::Behind,
    Relation::Front,  Relation::Bigger, Relation::Smaller, Relation::NextTo};

inline constexpr std::array<std::string_view, kRelationCount> kRelationNames = {
    "left", "right", "further", "closer", "behind", "front", "bigger", "smaller", "next to"};

inline std::string_view relation_name(Relation r) { return kRelationNames[static_cast<std::size_t>(r)]; }

inline std::optional<Relation> find_relation(std::string_view name) {
  for (std::size_t i = 0; i < kRelationCount; ++i)
    if (kRelationNames[i] == name) return static_cast<Relation>(i);
  return std::nullopt;
}

inline Relation parse_relation(std::string_view name) {
  if (auto r = find_relation(name)) return *r;
  throw Error("unknown relation: '" + std::string(name) + "'");
}

/// Converse relation: rel(a,b) holds iff converse(rel)(b,a) holds.
inline constexpr Relation converse(Relation r) {
  switch (r) {
    case Relation::Left: return Relation::Right;
    case Relation::Right: return Relation::Left;
    case Relation::Further: return Relation::Closer;
    case Relation::Closer: return Relation::Further;
    case Relation::Behind: return Relation::Front;
    case Relation::Front: return Relation::Behind;
    case Relation::Bigger: return Relation::Smaller;
    case Relation::Smaller: return Relation::Bigger;
    case Relation::NextTo: return Relation::NextTo;
  }
  return r;
}

struct AbsoluteWord {
  std::string_view word;
  Relation relation;
};

/// Superlative location words. The first eight are the canonical vocabulary;
/// "left" and "right" are accepted surface forms of leftmost/rightmost
/// ("the right cereal box").
inline constexpr std::array<AbsoluteWord, 10> kAbsoluteWords = {{
    {"leftmost", Relation::Left},
    {"rightmost", Relation::Right},
    {"closest", Relation::Closer},
    {"furthest", Relation::Further},
    {"front", Relation::Front},
    {"back", Relation::Behind},
    {"biggest", Relation::Bigger},
    {"smallest", Relation::Smaller},
    {"left", Relation::Left},
    {"right", Relation::Right},
}};

inline std::optional<Relation> absolute_relation(std::string_view word) {
  for (const auto& a : kAbsoluteWords)
    if (a.word == word) return a.relation;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Catalogue
// ---------------------------------------------------------------------------

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct Color {
  std::string name;
  Rgb rgb;
};

struct Instance {
  std::size_t category = 0;
  std::size_t color = 0;
  std::string alias;  // empty when the instance has none
  double base_size = 32.0;
};

class Catalogue {
 public:
  std::vector<std::string> categories;
  std::vector<Color> colors;
  std::vector<Instance> instances;

  /// Throws Error when an invariant does not hold.
  void validate() const {
    if (categories.empty() || colors.empty() || instances.empty())
      throw Error("catalogue: categories, colors and instances must be nonempty");
    std::unordered_set<std::string> aliases;
    std::vector<int> per_category(categories.size(), 0);
    for (const auto& inst : instances) {
      if (inst.category >= categories.size()) throw Error("catalogue: instance references unknown category");
      if (inst.color >= colors.size()) throw Error("catalogue: instance references unknown color");
      if (!(inst.base_size > 0.0)) throw Error("catalogue: base_size must be positive");
      if (!inst.alias.empty() && !aliases.insert(inst.alias).second)
        throw Error("catalogue: duplicate alias '" + inst.alias + "'");
      ++per_category[inst.category];
    }
    if (std::ranges::none_of(per_category, [](int c) { return c >= 2; }))
      throw Error("catalogue: at least two instances must share a category");
  }

  const std::string& category_of(std::size_t instance) const { return categories[instances[instance].category]; }
  const Color& color_of(std::size_t instance) const { return colors[instances[instance].color]; }

  std::optional<std::size_t> find_category(std::string_view name) const {
    for (std::size_t i = 0; i < categories.size(); ++i)
      if (categories[i] == name) return i;
    return std::nullopt;
  }
  std::optional<std::size_t> find_color(std::string_view name) const {
    for (std::size_t i = 0; i < colors.size(); ++i)
      if (colors[i].name == name) return i;
    return std::nullopt;
  }
  std::optional<std::size_t> find_alias(std::string_view alias) const {
    for (std::size_t i = 0; i < instances.size(); ++i)
      if (!instances[i].alias.empty() && instances[i].alias == alias) return i;
    return std::nullopt;
  }
};

inline Catalogue default_catalogue() {
  Catalogue c;
  c.categories = {"bowl", "mug", "soda can", "cereal box", "juice box", "bottle", "book", "flashlight"};
  c.colors = {
      {"red", {210, 40, 40}},      {"green", {40, 170, 60}},   {"blue", {40, 80, 210}},
      {"yellow", {230, 210, 45}},  {"orange", {240, 140, 20}}, {"purple", {135, 50, 175}},
      {"white", {245, 245, 245}},  {"black", {25, 25, 25}},    {"pink", {240, 115, 185}},
      {"brown", {115, 70, 35}},
  };
  auto add = [&](std::string_view cat, std::string_view col, std::string alias, double size) {
    c.instances.push_back({*c.find_category(cat), *c.find_color(col), std::move(alias), size});
  };
  add("bowl", "red", "", 38);
  add("bowl", "white", "", 38);
  add("bowl", "blue", "", 36);
  add("bowl", "green", "", 36);
  add("mug", "black", "", 30);
  add("mug", "yellow", "", 30);
  add("mug", "white", "", 30);
  add("mug", "red", "", 30);
  add("soda can", "red", "coca-cola", 26);
  add("soda can", "blue", "pepsi", 26);
  add("soda can", "green", "sprite", 26);
  add("soda can", "orange", "fanta", 26);
  add("cereal box", "yellow", "chex", 42);
  add("cereal box", "red", "crunch", 42);
  add("cereal box", "brown", "cheerios", 42);
  add("cereal box", "orange", "", 40);
  add("juice box", "pink", "strawberry juice", 30);
  add("juice box", "orange", "mango juice", 30);
  add("juice box", "yellow", "pineapple juice", 30);
  add("juice box", "green", "", 30);
  add("bottle", "green", "", 32);
  add("bottle", "blue", "", 32);
  add("bottle", "white", "", 32);
  add("bottle", "brown", "", 32);
  add("book", "red", "", 40);
  add("book", "blue", "", 40);
  add("book", "purple", "", 38);
  add("book", "black", "", 38);
  add("flashlight", "yellow", "", 28);
  add("flashlight", "blue", "", 28);
  add("flashlight", "black", "", 28);
  add("flashlight", "purple", "", 28);
  return c;
}

inline json catalogue_to_json(const Catalogue& c) {
  json j;
  j["categories"] = c.categories;
  j["colors"] = json::array();
  for (const auto& col : c.colors) j["colors"].push_back({{"name", col.name}, {"rgb", {col.rgb.r, col.rgb.g, col.rgb.b}}});
  j["instances"] = json::array();
  for (const auto& inst : c.instances) {
    json ji = {{"category", c.categories[inst.category]},
               {"color", c.colors[inst.color].name},
               {"base_size", inst.base_size}};
    if (!inst.alias.empty()) ji["alias"] = inst.alias;
    j["instances"].push_back(std::move(ji));
  }
  return j;
}

inline Catalogue catalogue_from_json(const json& j) {
  Catalogue c;
  try {
    c.categories = j.at("categories").get<std::vector<std::string>>();
    for (const auto& col : j.at("colors")) {
      const auto rgb = col.at("rgb").get<std::vector<int>>();
      if (rgb.size() != 3 || std::ranges::any_of(rgb, [](int v) { return v < 0 || v > 255; }))
        throw Error("catalogue: rgb must be three integers in [0,255]");
      c.colors.push_back({col.at("name").get<std::string>(),
                          {static_cast<std::uint8_t>(rgb[0]), static_cast<std::uint8_t>(rgb[1]),
                           static_cast<std::uint8_t>(rgb[2])}});
    }
    for (const auto& ji : j.at("instances")) {
      const auto cat = c.find_category(ji.at("category").get<std::string>());
      const auto col = c.find_color(ji.at("color").get<std::string>());
      if (!cat) throw Error("catalogue: instance references unknown category");
      if (!col) throw Error("catalogue: instance references unknown color");
      c.instances.push_back({*cat, *col, ji.value("alias", std::string{}), ji.at("base_size").get<double>()});
    }
  } catch (const json::exception& e) {
    throw Error(std::string("catalogue: ") + e.what());
  }
  c.validate();
  return c;
}

inline Catalogue load_catalogue(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open catalogue file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error("catalogue " + path + ": " + e.what());
  }
  return catalogue_from_json(j);
}

// ---------------------------------------------------------------------------
// Scene objects and projection
// ---------------------------------------------------------------------------

struct BBox {
  int x = 0, y = 0, w = 0, h = 0;
  int area() const { return w * h; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

inline double iou(const BBox& a, const BBox& b) {
  const int ix = std::max(0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const int iy = std::max(0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = static_cast<double>(ix) * iy;
  const double uni = static_cast<double>(a.area()) + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline int intersection_area(const BBox& a, const BBox& b) {
  const int ix = std::max(0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const int iy = std::max(0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  return ix * iy;
}

inline constexpr int kDefaultWidth = 256;
inline constexpr int kDefaultHeight = 192;
inline constexpr double kMinSidePx = 8.0;

/// Orthographic projection of a world pose to a square pixel bbox. Depth
/// (world_y) is drawn upward and shrinks the glyph linearly by up to 25%.
inline BBox project_bbox(double world_x, double world_y, double size, double base_size, int width, int height) {
  double side = base_size * size * (1.0 - 0.25 * world_y);
  side = std::clamp(side, kMinSidePx, static_cast<double>(std::min(width, height)));
  const int s = static_cast<int>(std::lround(side));
  BBox b;
  b.w = b.h = s;
  b.x = static_cast<int>(std::lround((world_x + 1.0) * 0.5 * (width - s)));
  b.y = static_cast<int>(std::lround((1.0 - world_y) * (height - s)));
  return b;
}

struct SceneObject {
  std::size_t index = 0;
  std::size_t instance = 0;
  double world_x = 0.0;  // lateral, [-1, 1]
  double world_y = 0.0;  // depth, [0, 1]; 0 is nearest to the camera
  double size = 1.0;
  BBox bbox;
};

inline SceneObject make_object(std::size_t index, std::size_t instance, double wx, double wy, double size,
                               const Catalogue& catalogue, int width = kDefaultWidth, int height = kDefaultHeight) {
  SceneObject o{index, instance, wx, wy, size, {}};
  o.bbox = project_bbox(wx, wy, size, catalogue.instances.at(instance).base_size, width, height);
  return o;
}

// ---------------------------------------------------------------------------
// Predicates
// ---------------------------------------------------------------------------

struct PredicateMargins {
  double lateral = 0.05;     // left/right, world units
  double depth = 0.05;       // behind/front, world units
  double distance = 0.05;    // further/closer, world units
  double size_ratio = 1.2;   // bigger/smaller, multiplicative on pixel area
  double near = 0.25;        // next to, center distance threshold
  friend bool operator==(const PredicateMargins&, const PredicateMargins&) = default;
};

inline constexpr double kCameraX = 0.0;
inline constexpr double kCameraY = -0.5;

inline double camera_distance(const SceneObject& o) { return std::hypot(o.world_x - kCameraX, o.world_y - kCameraY); }

inline bool evaluate_relation(Relation rel, const SceneObject& a, const SceneObject& b,
                              const PredicateMargins& m = {}) {
  if (a.index == b.index) throw Error("evaluate_relation: an object cannot relate to itself");
  switch (rel) {
    case Relation::Left: return a.world_x < b.world_x - m.lateral;
    case Relation::Right: return a.world_x > b.world_x + m.lateral;
    case Relation::Behind: return a.world_y > b.world_y + m.depth;
    case Relation::Front: return a.world_y < b.world_y - m.depth;
    case Relation::Further: return camera_distance(a) > camera_distance(b) + m.distance;
    case Relation::Closer: return camera_distance(a) < camera_distance(b) - m.distance;
    case Relation::Bigger: return static_cast<double>(a.bbox.area()) > m.size_ratio * b.bbox.area();
    case Relation::Smaller: return m.size_ratio * a.bbox.area() < static_cast<double>(b.bbox.area());
    case Relation::NextTo: return std::hypot(a.world_x - b.world_x, a.world_y - b.world_y) < m.near;
  }
  throw Error("unknown relation");
}

inline bool evaluate_relation(std::string_view rel, const SceneObject& a, const SceneObject& b,
                              const PredicateMargins& m = {}) {
  const auto r = find_relation(rel);
  if (!r) throw Error("unknown relation");
  return evaluate_relation(*r, a, b, m);
}

/// Square boolean matrix stored row-major.
class BoolMatrix {
 public:
  BoolMatrix() = default;
  explicit BoolMatrix(std::size_t n) : n_(n), cells_(n * n, 0) {}

  std::size_t size() const { return n_; }
  bool operator()(std::size_t i, std::size_t j) const { return cells_[i * n_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { cells_[i * n_ + j] = v ? 1 : 0; }
  const std::vector<std::uint8_t>& cells() const { return cells_; }

  friend bool operator==(const BoolMatrix&, const BoolMatrix&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> cells_;
};

using RelationTensor = std::array<BoolMatrix, kRelationCount>;

inline RelationTensor build_relation_tensor(const std::vector<SceneObject>& objects, const PredicateMargins& m = {}) {
  const std::size_t n = objects.size();
  RelationTensor t;
  for (auto& mat : t) mat = BoolMatrix(n);
  for (std::size_t r = 0; r < kRelationCount; ++r)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) t[r].set(i, j, evaluate_relation(kAllRelations[r], objects[i], objects[j], m));
  return t;
}

// ---------------------------------------------------------------------------
// Scene graph
// ---------------------------------------------------------------------------

struct SceneGraph {
  std::uint64_t scene_id = 0;
  std::uint64_t image_seed = 0;
  int width = kDefaultWidth;
  int height = kDefaultHeight;
  std::vector<SceneObject> objects;
  RelationTensor relations;

  std::size_t size() const { return objects.size(); }
  const BoolMatrix& relation(Relation r) const { return relations[static_cast<std::size_t>(r)]; }
};

/// Returns a description of every violated scene invariant (empty when valid).
inline std::vector<std::string> check_scene(const SceneGraph& s, const Catalogue& catalogue,
                                            const PredicateMargins& m = {}) {
  std::vector<std::string> problems;
  const std::size_t n = s.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& o = s.objects[i];
    const std::string tag = "object " + std::to_string(i) + ": ";
    if (o.index != i) problems.push_back(tag + "index mismatch");
    if (o.instance >= catalogue.instances.size()) {
      problems.push_back(tag + "unknown instance");
      continue;
    }
    const auto& b = o.bbox;
    if (b.x < 0 || b.y < 0 || b.x + b.w > s.width || b.y + b.h > s.height || b.w < 1 || b.h < 1)
      problems.push_back(tag + "bbox outside image");
    if (b != project_bbox(o.world_x, o.world_y, o.size, catalogue.instances[o.instance].base_size, s.width, s.height))
      problems.push_back(tag + "bbox does not match projection");
  }
  for (std::size_t r = 0; r < kRelationCount; ++r) {
    const auto& mat = s.relations[r];
    if (mat.size() != n) {
      problems.push_back("relation matrix size mismatch");
      continue;
    }
    for (std::size_t i = 0; i < n; ++i)
      if (mat(i, i)) problems.push_back("relation diagonal set");
    const auto& conv = s.relations[static_cast<std::size_t>(converse(kAllRelations[r]))];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j && mat(i, j) != conv(j, i)) problems.push_back("converse relation mismatch");
  }
  if (problems.empty() && build_relation_tensor(s.objects, m) != s.relations)
    problems.push_back("relation tensor disagrees with predicates");
  return problems;
}

inline json scene_to_json(const SceneGraph& s) {
  json j;
  j["scene_id"] = s.scene_id;
  j["image_seed"] = s.image_seed;
  j["width"] = s.width;
  j["height"] = s.height;
  j["objects"] = json::array();
  for (const auto& o : s.objects)
    j["objects"].push_back({{"index", o.index},
                            {"instance", o.instance},
                            {"world_x", o.world_x},
                            {"world_y", o.world_y},
                            {"size", o.size},
                            {"bbox", {o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h}}});
  json rel = json::object();
  for (std::size_t r = 0; r < kRelationCount; ++r) {
    json flat = json::array();
    for (auto c : s.relations[r].cells()) flat.push_back(c != 0);
    rel[std::string(kRelationNames[r])] = std::move(flat);
  }
  j["relations"] = std::move(rel);
  return j;
}

inline SceneGraph scene_from_json(const json& j) {
  SceneGraph s;
  try {
    s.scene_id = j.at("scene_id").get<std::uint64_t>();
    s.image_seed = j.at("image_seed").get<std::uint64_t>();
    s.width = j.at("width").get<int>();
    s.height = j.at("height").get<int>();
    for (const auto& jo : j.at("objects")) {
      SceneObject o;
      o.index = jo.at("index").get<std::size_t>();
      o.instance = jo.at("instance").get<std::size_t>();
      o.world_x = jo.at("world_x").get<double>();
      o.world_y = jo.at("world_y").get<double>();
      o.size = jo.at("size").get<double>();
      const auto b = jo.at("bbox").get<std::vector<int>>();
      if (b.size() != 4) throw Error("scene: bbox must have 4 entries");
      o.bbox = {b[0], b[1], b[2], b[3]};
      s.objects.push_back(o);
    }
    const std::size_t n = s.objects.size();
    const auto& rel = j.at("relations");
    for (std::size_t r = 0; r < kRelationCount; ++r) {
      const auto& flat = rel.at(std::string(kRelationNames[r]));
      if (flat.size() != n * n) throw Error("scene: relation matrix has wrong size");
      BoolMatrix m(n);
      for (std::size_t k = 0; k < n * n; ++k) m.set(k / n, k % n, flat[k].get<bool>());
      s.relations[r] = std::move(m);
    }
  } catch (const json::exception& e) {
    throw Error(std::string("scene record: ") + e.what());
  }
  return s;
}

}  // namespace groundkit
