// SPDX-License-Identifier: Apache-2.0
//
// Role tags of the hard parser and the word-level program they encode.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "groundkit/error.hpp"
#include "groundkit/scene.hpp"

namespace groundkit {

enum class Role : std::uint8_t { Ent, Att, Loc, Rel, Mask, Abs };

inline constexpr std::size_t kRoleCount = 6;
inline constexpr int kMaxGroups = 3;
inline constexpr std::size_t kTagCount = kRoleCount * kMaxGroups;  // 18

inline constexpr std::array<std::string_view, kRoleCount> kRoleNames = {"ENT", "ATT", "LOC", "REL", "MASK", "ABS"};

struct Tag {
  Role role = Role::Mask;
  int group = 0;

  int class_id() const { return static_cast<int>(role) * kMaxGroups + group; }
  static Tag from_class(int id) { return {static_cast<Role>(id / kMaxGroups), id % kMaxGroups}; }

  std::string str() const { return std::string(kRoleNames[static_cast<std::size_t>(role)]) + ":" + std::to_string(group); }

  friend bool operator==(const Tag&, const Tag&) = default;
};

using TagSequence = std::vector<Tag>;

inline Tag parse_tag(std::string_view s) {
  const auto colon = s.find(':');
  if (colon == std::string_view::npos || colon + 2 != s.size()) throw Error("bad tag '" + std::string(s) + "'");
  const auto role = s.substr(0, colon);
  const int group = s[colon + 1] - '0';
  if (group < 0 || group >= kMaxGroups) throw Error("bad tag group in '" + std::string(s) + "'");
  for (std::size_t r = 0; r < kRoleCount; ++r)
    if (kRoleNames[r] == role) return {static_cast<Role>(r), group};
  throw Error("bad tag role in '" + std::string(s) + "'");
}

inline std::vector<std::string> tag_strings(const TagSequence& tags) {
  std::vector<std::string> out;
  out.reserve(tags.size());
  for (const auto& t : tags) out.push_back(t.str());
  return out;
}

inline TagSequence parse_tags(const std::vector<std::string>& strs) {
  TagSequence out;
  out.reserve(strs.size());
  for (const auto& s : strs) out.push_back(parse_tag(s));
  return out;
}

// ---------------------------------------------------------------------------
// Closed query language
// ---------------------------------------------------------------------------

struct RelationPhraseEntry {
  std::string_view phrase;
  Relation relation;
};

inline constexpr std::array<RelationPhraseEntry, kRelationCount> kRelationPhrases = {{
    {"left from", Relation::Left},
    {"right from", Relation::Right},
    {"further than", Relation::Further},
    {"closer than", Relation::Closer},
    {"behind", Relation::Behind},
    {"in front of", Relation::Front},
    {"bigger than", Relation::Bigger},
    {"smaller than", Relation::Smaller},
    {"next to", Relation::NextTo},
}};

inline std::string_view relation_phrase(Relation r) { return kRelationPhrases[static_cast<std::size_t>(r)].phrase; }

inline std::optional<Relation> relation_from_phrase(std::string_view phrase) {
  for (const auto& e : kRelationPhrases)
    if (e.phrase == phrase) return e.relation;
  return std::nullopt;
}

inline constexpr std::array<std::string_view, 3> kAbstractionWords = {"item", "object", "thing"};
/// Every abstraction word is matched through this one embedding.
inline constexpr std::string_view kAbstractionToken = "item";

inline bool is_abstraction_word(std::string_view w) {
  for (auto a : kAbstractionWords)
    if (a == w) return true;
  return false;
}

inline std::vector<std::string> split_words(std::string_view phrase) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < phrase.size()) {
    while (i < phrase.size() && phrase[i] == ' ') ++i;
    std::size_t j = i;
    while (j < phrase.size() && phrase[j] != ' ') ++j;
    if (j > i) out.emplace_back(phrase.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Word-level program recovered from tags
// ---------------------------------------------------------------------------

struct GroupPhrase {
  std::vector<std::string> entity;  // ENT words in order; empty when abstract
  bool abstract = false;
  std::vector<std::string> attribute;
  std::vector<std::string> location;

  bool has_attribute() const { return !attribute.empty(); }
  bool has_location() const { return !location.empty(); }
  /// Words whose averaged embedding represents the entity query.
  std::vector<std::string> entity_query() const {
    return abstract ? std::vector<std::string>{std::string(kAbstractionToken)} : entity;
  }
};

struct Program {
  std::vector<GroupPhrase> groups;                 // group k at index k
  std::vector<std::vector<std::string>> relations; // REL:k words, relating group k to k+1

  std::size_t hops() const { return relations.size(); }
};

/// Groups tokens by (role, group index). MASK tokens are ignored.
/// Throws StructureError when the tags do not encode a valid program.
inline Program parse_program(const std::vector<std::string>& tokens, const TagSequence& tags) {
  if (tokens.size() != tags.size()) throw StructureError("tag count differs from token count");
  Program p;
  std::array<GroupPhrase, kMaxGroups> groups;
  std::array<std::vector<std::string>, kMaxGroups> rels;
  std::array<bool, kMaxGroups> used{}, has_entity{};
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& t = tags[i];
    auto& g = groups[static_cast<std::size_t>(t.group)];
    switch (t.role) {
      case Role::Mask: continue;
      case Role::Ent: g.entity.push_back(tokens[i]); break;
      case Role::Abs: g.abstract = true; break;
      case Role::Att: g.attribute.push_back(tokens[i]); break;
      case Role::Loc: g.location.push_back(tokens[i]); break;
      case Role::Rel: rels[static_cast<std::size_t>(t.group)].push_back(tokens[i]); continue;
    }
    used[static_cast<std::size_t>(t.group)] = true;
    if (t.role == Role::Ent || t.role == Role::Abs) has_entity[static_cast<std::size_t>(t.group)] = true;
  }
  if (std::ranges::none_of(has_entity, [](bool b) { return b; })) throw StructureError("no entity group");
  int count = 0;
  while (count < kMaxGroups && used[static_cast<std::size_t>(count)]) ++count;
  for (int k = count; k < kMaxGroups; ++k)
    if (used[static_cast<std::size_t>(k)]) throw StructureError("non-contiguous groups");
  for (int k = 0; k < kMaxGroups; ++k) {
    if (rels[static_cast<std::size_t>(k)].empty()) continue;
    if (k + 1 >= count || !has_entity[static_cast<std::size_t>(k)] || !has_entity[static_cast<std::size_t>(k + 1)])
      throw StructureError("dangling relation");
  }
  for (int k = 0; k < count; ++k) {
    if (!has_entity[static_cast<std::size_t>(k)]) throw StructureError("group without entity");
    if (k > 0 && rels[static_cast<std::size_t>(k - 1)].empty()) throw StructureError("disconnected group");
  }
  for (int k = 0; k < count; ++k) {
    auto& g = groups[static_cast<std::size_t>(k)];
    if (!g.entity.empty()) g.abstract = false;  // an explicit entity word wins over ABS
    p.groups.push_back(std::move(g));
  }
  for (int k = 0; k + 1 < count; ++k) p.relations.push_back(std::move(rels[static_cast<std::size_t>(k)]));
  return p;
}

}  // namespace groundkit
