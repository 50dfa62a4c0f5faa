// SPDX-License-Identifier: Apache-2.0
//
// Run configuration read from JSON. Every key is optional (defaults are the
// desk-scale values) but unknown keys are rejected.
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "groundkit/error.hpp"
#include "groundkit/querygen.hpp"
#include "groundkit/scenegen.hpp"
#include "groundkit/training.hpp"

namespace groundkit {

struct OptimizerSettings {
  double lr = 5e-4;
  std::size_t batch_size = 64;
  int max_epochs = 10;
  int patience = 3;
};

struct Config {
  std::string catalogue;  // empty: built-in catalogue
  std::string out = "run";
  std::uint64_t seed = 7;

  std::size_t train_scenes = 2000;
  std::size_t dev_scenes = 500;
  std::size_t test_scenes = 500;
  std::size_t queries_per_scene = 10;
  std::array<double, kSplitCount> split_mix = {0.2, 0.2, 0.2, 0.2, 0.2};
  bool render = false;  // write PPMs during gen

  SceneSpec scene;
  QueryOptions query;

  int embedding_dim = 50;        // D_e, also the joint dim of every matching module
  std::string embeddings;        // optional pretrained "word v..." file
  int tagger_hidden = 256;       // D_h
  int entity_dim = 64;           // D_v
  std::string entity_provider = "prototype";
  std::string entity_file;       // for provider "file"
  double entity_sigma = 0.1;
  double epsilon_floor = 0.0;

  OptimizerSettings tagger{5e-4, 64, 12, 3};
  OptimizerSettings entity{5e-4, 256, 20, 3};
  OptimizerSettings attribute{5e-4, 256, 20, 3};
  OptimizerSettings spatial{5e-4, 8, 20, 3};
  double weight_decay = 1e-2;

  TrainSchedule schedule(const OptimizerSettings& s, std::uint64_t tag) const {
    TrainSchedule t;
    t.optimizer.lr = s.lr;
    t.optimizer.weight_decay = weight_decay;
    t.batch_size = s.batch_size;
    t.max_epochs = s.max_epochs;
    t.patience = s.patience;
    t.seed = derive_seed({seed, tag});
    return t;
  }
};

namespace detail {

/// Reads keys from one JSON object and reports leftovers as errors.
class Fields {
 public:
  Fields(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw Error("config: " + where_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw Error("config: " + where_ + "." + key + ": " + e.what());
    }
  }

  const nlohmann::json* object(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw Error("config: unknown key '" + where_ + "." + k + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void read_optimizer(const nlohmann::json* j, const std::string& where, OptimizerSettings& o) {
  if (!j) return;
  Fields f(*j, where);
  f.get("lr", o.lr);
  f.get("batch_size", o.batch_size);
  f.get("max_epochs", o.max_epochs);
  f.get("patience", o.patience);
  f.finish();
}

inline nlohmann::json optimizer_json(const OptimizerSettings& o) {
  return {{"lr", o.lr}, {"batch_size", o.batch_size}, {"max_epochs", o.max_epochs}, {"patience", o.patience}};
}

}  // namespace detail

inline void validate_config(const Config& c) {
  auto positive = [](bool ok, const char* what) {
    if (!ok) throw Error(std::string("config: ") + what + " must be positive");
  };
  positive(c.train_scenes > 0, "scenes.train");
  positive(c.dev_scenes > 0, "scenes.dev");
  positive(c.test_scenes > 0, "scenes.test");
  positive(c.queries_per_scene > 0, "queries_per_scene");
  positive(c.embedding_dim > 0, "embedding_dim");
  positive(c.tagger_hidden > 0, "tagger_hidden");
  positive(c.entity_dim > 0, "entity_dim");
  for (const auto* o : {&c.tagger, &c.entity, &c.attribute, &c.spatial}) {
    positive(o->lr > 0.0, "lr");
    positive(o->batch_size > 0, "batch_size");
    positive(o->max_epochs > 0, "max_epochs");
    positive(o->patience > 0, "patience");
  }
  double mix = 0.0;
  for (double w : c.split_mix) {
    if (w < 0.0) throw Error("config: split_mix weights must be non-negative");
    mix += w;
  }
  positive(mix > 0.0, "split_mix total");
  if (c.entity_sigma < 0.0) throw Error("config: entity_sigma must be non-negative");
  if (c.entity_provider != "prototype" && c.entity_provider != "file")
    throw Error("config: entity_provider must be 'prototype' or 'file'");
  if (c.entity_provider == "file" && c.entity_file.empty()) throw Error("config: entity_file required for provider 'file'");
  if (c.scene.min_objects < 1 || c.scene.max_objects < c.scene.min_objects)
    throw Error("config: scene object range invalid");
}

inline Config config_from_json(const nlohmann::json& j) {
  Config c;
  detail::Fields f(j, "config");
  f.get("catalogue", c.catalogue);
  f.get("out", c.out);
  f.get("seed", c.seed);
  f.get("queries_per_scene", c.queries_per_scene);
  f.get("render", c.render);
  f.get("embedding_dim", c.embedding_dim);
  f.get("embeddings", c.embeddings);
  f.get("tagger_hidden", c.tagger_hidden);
  f.get("entity_dim", c.entity_dim);
  f.get("entity_provider", c.entity_provider);
  f.get("entity_file", c.entity_file);
  f.get("entity_sigma", c.entity_sigma);
  f.get("epsilon_floor", c.epsilon_floor);
  f.get("weight_decay", c.weight_decay);
  if (const auto* s = f.object("scenes")) {
    detail::Fields g(*s, "scenes");
    g.get("train", c.train_scenes);
    g.get("dev", c.dev_scenes);
    g.get("test", c.test_scenes);
    g.finish();
  }
  if (const auto* s = f.object("split_mix")) {
    detail::Fields g(*s, "split_mix");
    for (std::size_t i = 0; i < kSplitCount; ++i) g.get(std::string(kSplitNames[i]).c_str(), c.split_mix[i]);
    g.finish();
  }
  if (const auto* s = f.object("scene")) {
    detail::Fields g(*s, "scene");
    g.get("min_objects", c.scene.min_objects);
    g.get("max_objects", c.scene.max_objects);
    g.get("width", c.scene.width);
    g.get("height", c.scene.height);
    if (const auto* m = g.object("margins")) {
      detail::Fields h(*m, "scene.margins");
      h.get("lateral", c.scene.margins.lateral);
      h.get("depth", c.scene.margins.depth);
      h.get("distance", c.scene.margins.distance);
      h.get("size_ratio", c.scene.margins.size_ratio);
      h.get("near", c.scene.margins.near);
      h.finish();
    }
    g.finish();
  }
  if (const auto* s = f.object("query")) {
    detail::Fields g(*s, "query");
    g.get("alias_probability", c.query.alias_probability);
    g.get("abstraction_probability", c.query.abstraction_probability);
    g.get("attribute_probability", c.query.attribute_probability);
    g.get("location_probability", c.query.location_probability);
    g.get("determiner_probability", c.query.determiner_probability);
    g.get("ambiguous_subject_preference", c.query.ambiguous_subject_preference);
    g.get("retries", c.query.retries);
    g.finish();
  }
  detail::read_optimizer(f.object("tagger"), "tagger", c.tagger);
  detail::read_optimizer(f.object("entity"), "entity", c.entity);
  detail::read_optimizer(f.object("attribute"), "attribute", c.attribute);
  detail::read_optimizer(f.object("spatial"), "spatial", c.spatial);
  f.finish();
  validate_config(c);
  return c;
}

inline nlohmann::json config_to_json(const Config& c) {
  nlohmann::json mix;
  for (std::size_t i = 0; i < kSplitCount; ++i) mix[std::string(kSplitNames[i])] = c.split_mix[i];
  const auto& m = c.scene.margins;
  const auto& q = c.query;
  return {
      {"catalogue", c.catalogue},
      {"out", c.out},
      {"seed", c.seed},
      {"scenes", {{"train", c.train_scenes}, {"dev", c.dev_scenes}, {"test", c.test_scenes}}},
      {"queries_per_scene", c.queries_per_scene},
      {"split_mix", mix},
      {"render", c.render},
      {"scene",
       {{"min_objects", c.scene.min_objects},
        {"max_objects", c.scene.max_objects},
        {"width", c.scene.width},
        {"height", c.scene.height},
        {"margins",
         {{"lateral", m.lateral},
          {"depth", m.depth},
          {"distance", m.distance},
          {"size_ratio", m.size_ratio},
          {"near", m.near}}}}},
      {"query",
       {{"alias_probability", q.alias_probability},
        {"abstraction_probability", q.abstraction_probability},
        {"attribute_probability", q.attribute_probability},
        {"location_probability", q.location_probability},
        {"determiner_probability", q.determiner_probability},
        {"ambiguous_subject_preference", q.ambiguous_subject_preference},
        {"retries", q.retries}}},
      {"embedding_dim", c.embedding_dim},
      {"embeddings", c.embeddings},
      {"tagger_hidden", c.tagger_hidden},
      {"entity_dim", c.entity_dim},
      {"entity_provider", c.entity_provider},
      {"entity_file", c.entity_file},
      {"entity_sigma", c.entity_sigma},
      {"epsilon_floor", c.epsilon_floor},
      {"weight_decay", c.weight_decay},
      {"tagger", detail::optimizer_json(c.tagger)},
      {"entity", detail::optimizer_json(c.entity)},
      {"attribute", detail::optimizer_json(c.attribute)},
      {"spatial", detail::optimizer_json(c.spatial)},
  };
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace groundkit
