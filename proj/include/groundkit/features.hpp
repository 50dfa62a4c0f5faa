// SPDX-License-Identifier: Apache-2.0
//
// Object-based representation: entity features, color-histogram attribute
// features and normalized bounding-box features.
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "groundkit/neural.hpp"
#include "groundkit/rng.hpp"
#include "groundkit/scenegen.hpp"

namespace groundkit {

inline constexpr int kBoxFeatures = 5;
inline constexpr int kHistogramBins = 256;
inline constexpr int kAttributeDim = 3 * kHistogramBins;

using BoxFeatures = std::array<double, kBoxFeatures>;

/// (x/W, y/H, (x+w)/W, (y+h)/H, w*h/(W*H))
inline BoxFeatures bbox_features(const BBox& b, int width, int height) {
  if (b.w <= 0 || b.h <= 0) throw Error("bbox_features: degenerate bbox");
  const double W = width, H = height;
  return {b.x / W, b.y / H, (b.x + b.w) / W, (b.y + b.h) / H, (static_cast<double>(b.w) * b.h) / (W * H)};
}

/// Per-channel 256-bin histogram, each channel normalized to sum 1,
/// concatenated R | G | B.
inline Vector color_histogram(const Raster& crop) {
  if (crop.pixel_count() == 0) throw Error("color_histogram: zero-pixel crop");
  Vector h = Vector::Zero(kAttributeDim);
  for (std::size_t p = 0; p < crop.rgb.size(); p += 3) {
    h[crop.rgb[p]] += 1.0;
    h[kHistogramBins + crop.rgb[p + 1]] += 1.0;
    h[2 * kHistogramBins + crop.rgb[p + 2]] += 1.0;
  }
  return h / static_cast<double>(crop.pixel_count());
}

struct ObjectRepresentation {
  Vector entity;     // D_v
  Vector attribute;  // 768
  BoxFeatures box{};
};

/// Source of entity feature vectors for scene objects.
class EntityFeatureProvider {
 public:
  virtual ~EntityFeatureProvider() = default;
  virtual int dim() const = 0;
  virtual Vector features(const SceneGraph& scene, std::size_t object) const = 0;
};

/// Fixed random unit prototype per catalogue instance plus isotropic
/// Gaussian noise, renormalized. Noise is seeded per (scene, object), so a
/// given object always gets the same vector.
class PrototypeFeatureProvider final : public EntityFeatureProvider {
 public:
  PrototypeFeatureProvider(std::size_t instances, int dim, double sigma, std::uint64_t seed)
      : dim_(dim), sigma_(sigma), seed_(seed) {
    prototypes_.reserve(instances);
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng(derive_seed({seed, 0x9e0705ULL, i}));
      Vector v(dim);
      for (int k = 0; k < dim; ++k) v[k] = rng.normal();
      prototypes_.push_back(v.normalized());
    }
  }

  int dim() const override { return dim_; }
  double sigma() const { return sigma_; }
  const Vector& prototype(std::size_t instance) const { return prototypes_.at(instance); }

  Vector features(const SceneGraph& scene, std::size_t object) const override {
    const auto& o = scene.objects.at(object);
    Vector v = prototypes_.at(o.instance);
    if (sigma_ > 0.0) {
      Rng rng(derive_seed({seed_, scene.image_seed, static_cast<std::uint64_t>(object)}));
      for (int k = 0; k < dim_; ++k) v[k] += sigma_ * rng.normal();
    }
    return l2_normalize(v);
  }

 private:
  int dim_;
  double sigma_;
  std::uint64_t seed_;
  std::vector<Vector> prototypes_;
};

/// Precomputed vectors, one record per line: "scene_id:obj_index v1 ... vD".
class FileFeatureProvider final : public EntityFeatureProvider {
 public:
  FileFeatureProvider(const std::string& path, int dim) : dim_(dim) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open feature file " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::istringstream ls(line);
      std::string key;
      if (!(ls >> key)) continue;
      Vector v(dim);
      for (int i = 0; i < dim; ++i)
        if (!(ls >> v[i])) throw Error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(dim) + " values");
      table_[key] = std::move(v);
    }
  }

  static std::string key(std::uint64_t scene_id, std::size_t object) {
    return std::to_string(scene_id) + ":" + std::to_string(object);
  }

  int dim() const override { return dim_; }
  Vector features(const SceneGraph& scene, std::size_t object) const override {
    auto it = table_.find(key(scene.scene_id, object));
    if (it == table_.end()) throw Error("missing precomputed entity features for " + key(scene.scene_id, object));
    return it->second;
  }

  static void write(const std::string& path, const std::vector<std::pair<std::string, Vector>>& rows) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out.precision(17);
    for (const auto& [k, v] : rows) {
      out << k;
      for (Eigen::Index i = 0; i < v.size(); ++i) out << ' ' << v[i];
      out << '\n';
    }
  }

 private:
  int dim_;
  std::unordered_map<std::string, Vector> table_;
};

inline std::vector<ObjectRepresentation> represent_scene(const RenderedScene& r,
                                                         const EntityFeatureProvider& provider) {
  std::vector<ObjectRepresentation> out;
  out.reserve(r.scene.size());
  for (std::size_t i = 0; i < r.scene.size(); ++i)
    out.push_back({provider.features(r.scene, i), color_histogram(r.crops[i]),
                   bbox_features(r.scene.objects[i].bbox, r.scene.width, r.scene.height)});
  return out;
}

inline std::vector<ObjectRepresentation> represent_scene(const SceneGraph& s, const Catalogue& c,
                                                         const EntityFeatureProvider& provider) {
  return represent_scene(render(s, c), provider);
}

}  // namespace groundkit
