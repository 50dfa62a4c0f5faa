// SPDX-License-Identifier: Apache-2.0
//
// Vocabulary of the closed query language and the word-embedding table.
#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "groundkit/neural.hpp"
#include "groundkit/scene.hpp"
#include "groundkit/tags.hpp"

namespace groundkit {

/// Lowercases and splits on whitespace; trailing punctuation is dropped.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    while (!cur.empty() && std::ispunct(static_cast<unsigned char>(cur.back())) && cur.back() != '-') cur.pop_back();
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  return out;
}

/// Every word the query templates can emit for this catalogue.
inline std::vector<std::string> closed_vocabulary(const Catalogue& c) {
  std::set<std::string> words = {"the", "grasp", "give", "me", "that", "is"};
  auto add = [&](std::string_view phrase) {
    for (auto& w : split_words(phrase)) words.insert(w);
  };
  for (const auto& cat : c.categories) add(cat);
  for (const auto& col : c.colors) add(col.name);
  for (const auto& inst : c.instances) add(inst.alias);
  for (const auto& a : kAbsoluteWords) add(a.word);
  for (const auto& r : kRelationPhrases) add(r.phrase);
  for (auto w : kAbstractionWords) add(w);
  return {words.begin(), words.end()};
}

class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  /// Random table, every row trainable, uniform in [-0.1, 0.1].
  EmbeddingTable(std::vector<std::string> words, int dim, Rng& rng) : dim_(dim) {
    set_words(std::move(words));
    vectors_ = Parameter("embedding", dim, static_cast<Eigen::Index>(words_.size()));
    vectors_.init_uniform(rng, 0.1);
  }

  int dim() const { return dim_; }
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  bool contains(const std::string& w) const { return ids_.count(w) != 0; }

  std::size_t id(const std::string& token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) throw OovError(token);
    return it->second;
  }

  /// Throws OovError for the first unknown token.
  std::vector<std::size_t> ids(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  Vector embed(const std::string& token) const { return vectors_.value.col(static_cast<Eigen::Index>(id(token))); }

  /// Mean embedding of a phrase.
  Vector average(const std::vector<std::string>& words) const {
    if (words.empty()) throw Error("average of an empty phrase");
    Vector acc = Vector::Zero(dim_);
    for (const auto& w : words) acc += embed(w);
    return acc / static_cast<double>(words.size());
  }

  bool trainable(const std::string& token) const { return !vectors_.frozen(static_cast<Eigen::Index>(id(token))); }
  bool any_trainable() const {
    for (std::size_t i = 0; i < words_.size(); ++i)
      if (!vectors_.frozen(static_cast<Eigen::Index>(i))) return true;
    return false;
  }

  Parameter& parameter() { return vectors_; }
  const Parameter& parameter() const { return vectors_; }

  /// Sorted word list, one per line.
  std::string dump_vocabulary() const {
    std::string out;
    for (const auto& w : words_) out += w + "\n";
    return out;
  }

  friend EmbeddingTable load_embeddings(const std::string&, const std::vector<std::string>&, int, Rng&);
  friend EmbeddingTable table_from_parts(std::vector<std::string>, Matrix, std::vector<std::uint8_t>);

 private:
  void set_words(std::vector<std::string> words) {
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    words_ = std::move(words);
    ids_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) ids_[words_[i]] = i;
  }

  int dim_ = 0;
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> ids_;
  Parameter vectors_;
};

/// Rebuilds a table from a stored word list, vectors and frozen mask.
inline EmbeddingTable table_from_parts(std::vector<std::string> words, Matrix vectors,
                                       std::vector<std::uint8_t> frozen) {
  EmbeddingTable t;
  t.dim_ = static_cast<int>(vectors.rows());
  t.set_words(std::move(words));
  if (static_cast<std::size_t>(vectors.cols()) != t.words_.size()) throw Error("embedding table: size mismatch");
  t.vectors_ = Parameter("embedding", vectors.rows(), vectors.cols());
  t.vectors_.value = std::move(vectors);
  if (std::ranges::any_of(frozen, [](auto f) { return f != 0; })) t.vectors_.frozen_cols = std::move(frozen);
  return t;
}

/// Reads "word v1 ... vD" lines. Words in the file are frozen; words of
/// `vocabulary` missing from the file get random trainable vectors.
inline EmbeddingTable load_embeddings(const std::string& path, const std::vector<std::string>& vocabulary, int dim,
                                      Rng& rng) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open embedding file " + path);
  std::unordered_map<std::string, Vector> known;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    Vector v(dim);
    for (int i = 0; i < dim; ++i) {
      std::string tok;
      if (!(ls >> tok)) throw Error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(dim) + " values");
      try {
        std::size_t used = 0;
        v[i] = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw Error(path + ":" + std::to_string(lineno) + ": malformed number '" + tok + "'");
      }
    }
    std::string extra;
    if (ls >> extra) throw Error(path + ":" + std::to_string(lineno) + ": too many values");
    if (!known.emplace(word, v).second) throw Error(path + ":" + std::to_string(lineno) + ": duplicate vocabulary entry '" + word + "'");
  }
  std::vector<std::string> words = vocabulary;
  for (const auto& [w, _] : known) words.push_back(w);
  EmbeddingTable t;
  t.dim_ = dim;
  t.set_words(std::move(words));
  t.vectors_ = Parameter("embedding", dim, static_cast<Eigen::Index>(t.words_.size()));
  t.vectors_.frozen_cols.assign(t.words_.size(), 0);
  for (std::size_t i = 0; i < t.words_.size(); ++i) {
    auto it = known.find(t.words_[i]);
    if (it != known.end()) {
      t.vectors_.value.col(static_cast<Eigen::Index>(i)) = it->second;
      t.vectors_.frozen_cols[i] = 1;
    } else {
      for (int r = 0; r < dim; ++r) t.vectors_.value(r, static_cast<Eigen::Index>(i)) = rng.uniform(-0.1, 0.1);
    }
  }
  if (known.empty()) t.vectors_.frozen_cols.clear();
  return t;
}

}  // namespace groundkit
