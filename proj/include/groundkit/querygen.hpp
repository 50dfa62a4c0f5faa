// SPDX-License-Identifier: Apache-2.0
//
// Template-based referring-expression generation with ambiguity control,
// the symbolic executor used as the dataset oracle, and the per-module
// supervision datasets extracted from execution traces.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "groundkit/rng.hpp"
#include "groundkit/scene.hpp"
#include "groundkit/tags.hpp"

namespace groundkit {

enum class Split : std::uint8_t { Cat, Col, Loc, OneHop, TwoHop };
inline constexpr std::size_t kSplitCount = 5;
inline constexpr std::array<Split, kSplitCount> kAllSplits = {Split::Cat, Split::Col, Split::Loc, Split::OneHop,
                                                              Split::TwoHop};
inline constexpr std::array<std::string_view, kSplitCount> kSplitNames = {"Cat", "Col", "Loc", "1-Hop", "2-Hop"};

inline std::string_view split_name(Split s) { return kSplitNames[static_cast<std::size_t>(s)]; }
inline Split parse_split(std::string_view name) {
  for (std::size_t i = 0; i < kSplitCount; ++i)
    if (kSplitNames[i] == name) return static_cast<Split>(i);
  throw Error("unknown split '" + std::string(name) + "'");
}

/// The ambiguity type a program exercises, read off its structure.
inline Split classify_split(const Program& p) {
  if (p.hops() >= 2) return Split::TwoHop;
  if (p.hops() == 1) return Split::OneHop;
  const auto& g = p.groups.front();
  if (g.has_location()) return Split::Loc;
  if (g.has_attribute()) return Split::Col;
  return Split::Cat;
}

// ---------------------------------------------------------------------------
// Execution traces and the symbolic executor
// ---------------------------------------------------------------------------

using Mask = std::vector<std::uint8_t>;

struct GroupTrace {
  std::vector<std::string> entity;  // query words ("item" when abstract)
  bool abstract = false;
  Mask entity_targets;
  std::vector<std::string> attribute;
  Mask attribute_targets;  // empty when no attribute
  std::vector<std::string> location;
  std::optional<Relation> location_relation;
  BoolMatrix location_pairwise;  // size 0 when no location
  Mask unary;                    // E * A * L survivors of the group alone

  friend bool operator==(const GroupTrace&, const GroupTrace&) = default;
};

struct HopTrace {
  std::vector<std::string> relation;
  std::optional<Relation> relation_kind;
  BoolMatrix pairwise;
  Mask result;  // survivors after relating group k to the output of group k+1

  friend bool operator==(const HopTrace&, const HopTrace&) = default;
};

struct ExecutionTrace {
  std::vector<GroupTrace> groups;
  std::vector<HopTrace> hops;  // hops[k] relates group k to group k+1
  int final_target = -1;       // -1 unless exactly one survivor

  friend bool operator==(const ExecutionTrace&, const ExecutionTrace&) = default;
};

inline bool entity_matches(const GroupPhrase& g, const Instance& inst, std::size_t instance_id,
                           const Catalogue& c) {
  if (g.abstract) return true;
  const auto phrase = join_words(g.entity);
  if (c.categories[inst.category] == phrase) return true;
  if (auto a = c.find_alias(phrase)) return *a == instance_id;
  return false;
}

inline Mask superlative_filter(const Mask& candidates, const BoolMatrix& rel) {
  const std::size_t n = candidates.size();
  Mask out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!candidates[i]) continue;
    bool extreme = true;
    for (std::size_t j = 0; j < n && extreme; ++j)
      if (j != i && candidates[j] && !rel(i, j)) extreme = false;
    out[i] = extreme ? 1 : 0;
  }
  return out;
}

inline GroupTrace execute_group(const SceneGraph& s, const Catalogue& c, const GroupPhrase& g) {
  const std::size_t n = s.size();
  GroupTrace t;
  t.entity = g.entity_query();
  t.abstract = g.abstract;
  t.entity_targets.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto id = s.objects[i].instance;
    t.entity_targets[i] = entity_matches(g, c.instances[id], id, c) ? 1 : 0;
  }
  t.unary = t.entity_targets;
  if (g.has_attribute()) {
    t.attribute = g.attribute;
    const auto color = join_words(g.attribute);
    t.attribute_targets.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      t.attribute_targets[i] = c.color_of(s.objects[i].instance).name == color ? 1 : 0;
      t.unary[i] &= t.attribute_targets[i];
    }
  }
  if (g.has_location()) {
    t.location = g.location;
    t.location_relation = absolute_relation(join_words(g.location));
    if (t.location_relation) {
      t.location_pairwise = s.relation(*t.location_relation);
      t.unary = superlative_filter(t.unary, t.location_pairwise);
    } else {
      t.location_pairwise = BoolMatrix(n);
      t.unary.assign(n, 0);
    }
  }
  return t;
}

/// Filter-and-relate execution, innermost group first.
inline ExecutionTrace execute_program(const SceneGraph& s, const Catalogue& c, const Program& p) {
  const std::size_t n = s.size();
  ExecutionTrace tr;
  for (const auto& g : p.groups) tr.groups.push_back(execute_group(s, c, g));
  tr.hops.resize(p.hops());
  Mask current = tr.groups.back().unary;
  for (std::size_t k = p.hops(); k-- > 0;) {
    auto& hop = tr.hops[k];
    hop.relation = p.relations[k];
    hop.relation_kind = relation_from_phrase(join_words(p.relations[k]));
    hop.pairwise = hop.relation_kind ? s.relation(*hop.relation_kind) : BoolMatrix(n);
    Mask next(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (!tr.groups[k].unary[i]) continue;
      for (std::size_t j = 0; j < n; ++j)
        if (current[j] && hop.pairwise(i, j)) {
          next[i] = 1;
          break;
        }
    }
    hop.result = next;
    current = std::move(next);
  }
  if (std::ranges::count(current, 1) == 1)
    tr.final_target = static_cast<int>(std::ranges::find(current, 1) - current.begin());
  return tr;
}

inline std::vector<std::size_t> survivors(const ExecutionTrace& tr, std::size_t n) {
  const Mask& last = tr.hops.empty() ? tr.groups.front().unary : tr.hops.front().result;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i)
    if (last[i]) out.push_back(i);
  return out;
}

/// Returns the indices of every object satisfying the tagged query.
inline std::vector<std::size_t> symbolic_execute(const SceneGraph& s, const Catalogue& c,
                                                 const std::vector<std::string>& tokens, const TagSequence& tags) {
  Program p;
  try {
    p = parse_program(tokens, tags);
  } catch (const StructureError& e) {
    throw StructureError(std::string("unparseable program: ") + e.what());
  }
  return survivors(execute_program(s, c, p), s.size());
}

// ---------------------------------------------------------------------------
// Query records
// ---------------------------------------------------------------------------

struct QueryRecord {
  std::uint64_t scene_id = 0;
  std::vector<std::string> tokens;
  TagSequence tags;
  int target = -1;
  Split split = Split::Cat;
  ExecutionTrace trace;
};

struct QueryOptions {
  double alias_probability = 0.3;
  double abstraction_probability = 0.15;
  double attribute_probability = 0.3;  // per group in relational templates
  double location_probability = 0.2;   // per group in relational templates
  double determiner_probability = 0.85;
  double ambiguous_subject_preference = 0.7;
  int retries = 50;
};

struct GroupPlan {
  bool determiner = true;
  std::vector<std::string> location;
  std::vector<std::string> attribute;
  std::vector<std::string> entity;
  bool abstract = false;
};

struct QueryPlan {
  std::vector<std::string> prefix;
  std::vector<GroupPlan> groups;
  std::vector<Relation> relations;
};

inline const std::array<std::vector<std::string>, 3>& verb_prefixes() {
  static const std::array<std::vector<std::string>, 3> p = {
      std::vector<std::string>{}, std::vector<std::string>{"grasp"}, std::vector<std::string>{"give", "me"}};
  return p;
}

/// Turns a plan into tokens and gold tags. MASK tokens carry the index of
/// the phrase they belong to; the verb prefix belongs to group 0.
inline std::pair<std::vector<std::string>, TagSequence> render_query(const QueryPlan& plan) {
  std::vector<std::string> tokens;
  TagSequence tags;
  auto emit = [&](const std::string& w, Role r, int k) {
    tokens.push_back(w);
    tags.push_back({r, k});
  };
  for (const auto& w : plan.prefix) emit(w, Role::Mask, 0);
  for (std::size_t k = 0; k < plan.groups.size(); ++k) {
    const int gi = static_cast<int>(k);
    if (k > 0) {
      if (k == 2) {
        emit("that", Role::Mask, 1);
        emit("is", Role::Mask, 1);
      }
      for (const auto& w : split_words(relation_phrase(plan.relations[k - 1]))) emit(w, Role::Rel, gi - 1);
    }
    const auto& g = plan.groups[k];
    if (g.determiner) emit("the", Role::Mask, gi);
    for (const auto& w : g.location) emit(w, Role::Loc, gi);
    for (const auto& w : g.attribute) emit(w, Role::Att, gi);
    for (const auto& w : g.entity) emit(w, g.abstract ? Role::Abs : Role::Ent, gi);
  }
  return {std::move(tokens), std::move(tags)};
}

inline GroupPhrase to_phrase(const GroupPlan& g) {
  GroupPhrase p;
  p.abstract = g.abstract;
  if (!g.abstract) p.entity = g.entity;
  p.attribute = g.attribute;
  p.location = g.location;
  return p;
}

namespace detail {

struct GroupChoice {
  bool allow_abstract = false;
  double attribute = 0.0;
  double location = 0.0;
  bool force_attribute = false;
  bool force_location = false;
};

inline std::vector<std::size_t> category_counts(const SceneGraph& s, const Catalogue& c) {
  std::vector<std::size_t> counts(c.categories.size(), 0);
  for (const auto& o : s.objects) ++counts[c.instances[o.instance].category];
  return counts;
}

/// Describes object `target` with a random phrase. Returns nullopt when a
/// forced location word cannot single the object out.
inline std::optional<GroupPlan> describe(const SceneGraph& s, const Catalogue& c, std::size_t target,
                                         const GroupChoice& choice, const QueryOptions& opt, Rng& rng) {
  const auto& inst = c.instances[s.objects[target].instance];
  GroupPlan g;
  g.determiner = rng.bernoulli(opt.determiner_probability);
  if (choice.allow_abstract && rng.bernoulli(opt.abstraction_probability)) {
    g.abstract = true;
    g.entity = {std::string(kAbstractionWords[rng.index(kAbstractionWords.size())])};
  } else if (!inst.alias.empty() && rng.bernoulli(opt.alias_probability)) {
    g.entity = split_words(inst.alias);
  } else {
    g.entity = split_words(c.categories[inst.category]);
  }
  if (choice.force_attribute || rng.bernoulli(choice.attribute))
    g.attribute = split_words(c.colors[inst.color].name);
  if (choice.force_location || rng.bernoulli(choice.location)) {
    auto base = to_phrase(g);
    const auto t = execute_group(s, c, base);
    std::vector<std::string_view> words;
    for (const auto& a : kAbsoluteWords) {
      const auto ext = superlative_filter(t.unary, s.relation(a.relation));
      if (ext[target] && std::ranges::count(ext, 1) == 1) words.push_back(a.word);
    }
    if (words.empty()) {
      if (choice.force_location) return std::nullopt;
    } else {
      g.location = {std::string(words[rng.index(words.size())])};
    }
  }
  return g;
}

inline Program plan_program(const QueryPlan& plan) {
  Program p;
  for (const auto& g : plan.groups) p.groups.push_back(to_phrase(g));
  for (auto r : plan.relations) p.relations.push_back(split_words(relation_phrase(r)));
  return p;
}

inline bool unique_as(const SceneGraph& s, const Catalogue& c, const Program& p, std::size_t who) {
  return execute_program(s, c, p).final_target == static_cast<int>(who);
}

inline std::optional<std::size_t> related_partner(const SceneGraph& s, std::size_t a, Relation r, Rng& rng,
                                                  std::optional<std::size_t> exclude = std::nullopt) {
  std::vector<std::size_t> partners;
  for (std::size_t j = 0; j < s.size(); ++j)
    if (j != a && s.relation(r)(a, j) && (!exclude || *exclude != j)) partners.push_back(j);
  if (partners.empty()) return std::nullopt;
  return rng.pick(partners);
}

inline std::size_t pick_subject(const SceneGraph& s, const Catalogue& c, const QueryOptions& opt, Rng& rng) {
  const auto counts = category_counts(s, c);
  std::vector<std::size_t> ambiguous;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (counts[c.instances[s.objects[i].instance].category] >= 2) ambiguous.push_back(i);
  if (!ambiguous.empty() && rng.bernoulli(opt.ambiguous_subject_preference)) return rng.pick(ambiguous);
  return rng.index(s.size());
}

inline std::optional<QueryPlan> try_plan(const SceneGraph& s, const Catalogue& c, Split split,
                                         const QueryOptions& opt, Rng& rng, std::size_t& target) {
  const std::size_t n = s.size();
  const auto counts = category_counts(s, c);
  auto cat_of = [&](std::size_t i) { return c.instances[s.objects[i].instance].category; };
  auto col_of = [&](std::size_t i) { return c.instances[s.objects[i].instance].color; };
  auto same_cat_col = [&](std::size_t i) {
    std::size_t k = 0;
    for (std::size_t j = 0; j < n; ++j) k += (cat_of(j) == cat_of(i) && col_of(j) == col_of(i));
    return k;
  };

  QueryPlan plan;
  plan.prefix = verb_prefixes()[rng.index(verb_prefixes().size())];

  auto pick_from = [&](auto pred) -> std::optional<std::size_t> {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < n; ++i)
      if (pred(i)) pool.push_back(i);
    if (pool.empty()) return std::nullopt;
    return rng.pick(pool);
  };

  switch (split) {
    case Split::Cat: {
      auto t = pick_from([&](std::size_t i) { return counts[cat_of(i)] == 1; });
      if (!t) return std::nullopt;
      target = *t;
      auto g = describe(s, c, target, {}, opt, rng);
      plan.groups.push_back(*g);
      break;
    }
    case Split::Col: {
      auto t = pick_from([&](std::size_t i) { return counts[cat_of(i)] >= 2 && same_cat_col(i) == 1; });
      if (!t) return std::nullopt;
      target = *t;
      GroupChoice ch;
      ch.force_attribute = true;
      plan.groups.push_back(*describe(s, c, target, ch, opt, rng));
      break;
    }
    case Split::Loc: {
      auto t = pick_from([&](std::size_t i) { return same_cat_col(i) >= 2; });
      if (!t) return std::nullopt;
      target = *t;
      GroupChoice ch;
      ch.attribute = 0.5;
      ch.force_location = true;
      auto g = describe(s, c, target, ch, opt, rng);
      if (!g) return std::nullopt;
      plan.groups.push_back(*g);
      break;
    }
    case Split::OneHop: {
      target = pick_subject(s, c, opt, rng);
      const auto rel = kAllRelations[rng.index(kRelationCount)];
      auto obj = related_partner(s, target, rel, rng);
      if (!obj) return std::nullopt;
      GroupChoice ch{true, opt.attribute_probability, opt.location_probability, false, false};
      auto g1 = describe(s, c, *obj, ch, opt, rng);
      Program inner;
      inner.groups.push_back(to_phrase(*g1));
      if (!unique_as(s, c, inner, *obj)) return std::nullopt;
      plan.groups.push_back(*describe(s, c, target, ch, opt, rng));
      plan.groups.push_back(*g1);
      plan.relations.push_back(rel);
      break;
    }
    case Split::TwoHop: {
      target = pick_subject(s, c, opt, rng);
      const auto r0 = kAllRelations[rng.index(kRelationCount)];
      const auto r1 = kAllRelations[rng.index(kRelationCount)];
      auto mid = related_partner(s, target, r0, rng);
      if (!mid) return std::nullopt;
      auto inner = related_partner(s, *mid, r1, rng, target);
      if (!inner) return std::nullopt;
      GroupChoice ch{true, opt.attribute_probability, opt.location_probability, false, false};
      auto g2 = describe(s, c, *inner, ch, opt, rng);
      Program p2;
      p2.groups.push_back(to_phrase(*g2));
      if (!unique_as(s, c, p2, *inner)) return std::nullopt;
      auto g1 = describe(s, c, *mid, ch, opt, rng);
      Program p1;
      p1.groups = {to_phrase(*g1), to_phrase(*g2)};
      p1.relations = {split_words(relation_phrase(r1))};
      if (!unique_as(s, c, p1, *mid)) return std::nullopt;
      plan.groups = {*describe(s, c, target, ch, opt, rng), *g1, *g2};
      plan.relations = {r0, r1};
      break;
    }
  }
  if (!unique_as(s, c, plan_program(plan), target)) return std::nullopt;
  return plan;
}

}  // namespace detail

/// Samples one query of the requested split whose only referent is the
/// returned target. Throws NoValidBinding when the scene cannot host it.
inline QueryRecord generate_query(const SceneGraph& s, const Catalogue& c, Split split, std::uint64_t rng_seed,
                                  const QueryOptions& opt = {}) {
  if (s.size() == 0) throw NoValidBinding();
  Rng rng(rng_seed);
  for (int attempt = 0; attempt < opt.retries; ++attempt) {
    std::size_t target = 0;
    auto plan = detail::try_plan(s, c, split, opt, rng, target);
    if (!plan) continue;
    auto [tokens, tags] = render_query(*plan);
    auto trace = execute_program(s, c, parse_program(tokens, tags));
    if (trace.final_target != static_cast<int>(target)) continue;
    QueryRecord rec;
    rec.scene_id = s.scene_id;
    rec.tokens = std::move(tokens);
    rec.tags = std::move(tags);
    rec.target = static_cast<int>(target);
    rec.split = split;
    rec.trace = std::move(trace);
    return rec;
  }
  throw NoValidBinding();
}

/// Every broken record invariant, or empty when the record is valid.
inline std::vector<std::string> check_record(const SceneGraph& s, const Catalogue& c, const QueryRecord& r) {
  std::vector<std::string> problems;
  if (r.tokens.size() != r.tags.size()) problems.push_back("tags length differs from text length");
  Program p;
  try {
    p = parse_program(r.tokens, r.tags);
  } catch (const StructureError& e) {
    problems.push_back(std::string("unparseable program: ") + e.what());
    return problems;
  }
  const auto trace = execute_program(s, c, p);
  const auto found = survivors(trace, s.size());
  if (found.size() != 1 || static_cast<int>(found.front()) != r.target)
    problems.push_back("symbolic executor does not return exactly the target");
  if (!(trace == r.trace)) problems.push_back("stored trace differs from execution");
  if (classify_split(p) != r.split) problems.push_back("split does not match query structure");
  return problems;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace detail {
inline json mask_json(const Mask& m) {
  json a = json::array();
  for (auto v : m) a.push_back(v != 0);
  return a;
}
inline Mask mask_from(const json& j) {
  Mask m;
  for (const auto& v : j) m.push_back(v.get<bool>() ? 1 : 0);
  return m;
}
inline json matrix_json(const BoolMatrix& m) { return mask_json(m.cells()); }
inline BoolMatrix matrix_from(const json& j, std::size_t n) {
  if (j.size() != n * n) throw Error("trace: pairwise matrix has wrong size");
  BoolMatrix m(n);
  for (std::size_t k = 0; k < n * n; ++k) m.set(k / n, k % n, j[k].get<bool>());
  return m;
}
}  // namespace detail

inline json trace_to_json(const ExecutionTrace& t) {
  json j;
  j["groups"] = json::array();
  for (const auto& g : t.groups) {
    json jg = {{"entity", join_words(g.entity)},
               {"abstract", g.abstract},
               {"entity_targets", detail::mask_json(g.entity_targets)},
               {"unary_targets", detail::mask_json(g.unary)}};
    if (!g.attribute.empty()) {
      jg["attribute"] = join_words(g.attribute);
      jg["attribute_targets"] = detail::mask_json(g.attribute_targets);
    }
    if (!g.location.empty()) {
      jg["location"] = join_words(g.location);
      jg["location_pairwise"] = detail::matrix_json(g.location_pairwise);
    }
    j["groups"].push_back(std::move(jg));
  }
  j["hops"] = json::array();
  for (const auto& h : t.hops)
    j["hops"].push_back({{"relation", join_words(h.relation)},
                         {"relation_pairwise", detail::matrix_json(h.pairwise)},
                         {"result", detail::mask_json(h.result)}});
  j["final_target"] = t.final_target;
  return j;
}

inline ExecutionTrace trace_from_json(const json& j) {
  ExecutionTrace t;
  for (const auto& jg : j.at("groups")) {
    GroupTrace g;
    g.entity = split_words(jg.at("entity").get<std::string>());
    g.abstract = jg.at("abstract").get<bool>();
    g.entity_targets = detail::mask_from(jg.at("entity_targets"));
    g.unary = detail::mask_from(jg.at("unary_targets"));
    const std::size_t n = g.entity_targets.size();
    if (jg.contains("attribute")) {
      g.attribute = split_words(jg.at("attribute").get<std::string>());
      g.attribute_targets = detail::mask_from(jg.at("attribute_targets"));
    }
    if (jg.contains("location")) {
      g.location = split_words(jg.at("location").get<std::string>());
      g.location_relation = absolute_relation(join_words(g.location));
      g.location_pairwise = detail::matrix_from(jg.at("location_pairwise"), n);
    }
    t.groups.push_back(std::move(g));
  }
  const std::size_t n = t.groups.empty() ? 0 : t.groups.front().entity_targets.size();
  for (const auto& jh : j.at("hops")) {
    HopTrace h;
    h.relation = split_words(jh.at("relation").get<std::string>());
    h.relation_kind = relation_from_phrase(join_words(h.relation));
    h.pairwise = detail::matrix_from(jh.at("relation_pairwise"), n);
    h.result = detail::mask_from(jh.at("result"));
    t.hops.push_back(std::move(h));
  }
  t.final_target = j.at("final_target").get<int>();
  return t;
}

inline json record_to_json(const QueryRecord& r) {
  return {{"scene_id", r.scene_id}, {"tokens", r.tokens},        {"tags", tag_strings(r.tags)},
          {"target", r.target},     {"split", split_name(r.split)}, {"trace", trace_to_json(r.trace)}};
}

inline QueryRecord record_from_json(const json& j) {
  QueryRecord r;
  try {
    r.scene_id = j.at("scene_id").get<std::uint64_t>();
    r.tokens = j.at("tokens").get<std::vector<std::string>>();
    r.tags = parse_tags(j.at("tags").get<std::vector<std::string>>());
    r.target = j.at("target").get<int>();
    r.split = parse_split(j.at("split").get<std::string>());
    r.trace = trace_from_json(j.at("trace"));
  } catch (const json::exception& e) {
    throw Error(std::string("query record: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Per-module datasets
// ---------------------------------------------------------------------------

struct Corpus {
  std::vector<SceneGraph> scenes;
  std::vector<QueryRecord> queries;

  std::size_t scene_index(std::uint64_t scene_id) const {
    if (index_.size() != scenes.size()) {
      index_.clear();
      for (std::size_t i = 0; i < scenes.size(); ++i) index_[scenes[i].scene_id] = i;
    }
    auto it = index_.find(scene_id);
    if (it == index_.end()) throw Error("query references unknown scene " + std::to_string(scene_id));
    return it->second;
  }

 private:
  mutable std::unordered_map<std::uint64_t, std::size_t> index_;
};

struct TaggedSentence {
  std::vector<std::string> tokens;
  TagSequence tags;
};

struct UnaryRow {
  std::size_t scene = 0;  // index into Corpus::scenes
  std::size_t object = 0;
  std::vector<std::string> words;
  bool target = false;
};

struct SpatialRow {
  std::size_t scene = 0;
  std::vector<std::string> words;  // relation phrase or absolute location word
  BoolMatrix target;
};

struct ModuleDatasets {
  std::vector<TaggedSentence> tagger;
  std::vector<UnaryRow> entity;
  std::vector<UnaryRow> attribute;
  std::vector<SpatialRow> spatial;
};

inline ModuleDatasets build_module_datasets(const Corpus& corpus) {
  ModuleDatasets d;
  for (const auto& q : corpus.queries) {
    const std::size_t si = corpus.scene_index(q.scene_id);
    const std::size_t n = corpus.scenes[si].size();
    d.tagger.push_back({q.tokens, q.tags});
    for (const auto& g : q.trace.groups) {
      for (std::size_t i = 0; i < n; ++i) d.entity.push_back({si, i, g.entity, g.entity_targets[i] != 0});
      if (!g.attribute.empty())
        for (std::size_t i = 0; i < n; ++i) d.attribute.push_back({si, i, g.attribute, g.attribute_targets[i] != 0});
      if (!g.location.empty()) d.spatial.push_back({si, g.location, g.location_pairwise});
    }
    for (const auto& h : q.trace.hops) d.spatial.push_back({si, h.relation, h.pairwise});
  }
  return d;
}

}  // namespace groundkit
