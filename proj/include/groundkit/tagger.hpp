// SPDX-License-Identifier: Apache-2.0
//
// Hard language parser: a bidirectional GRU tagging every token with one of
// 18 (role, group) tags, and recovery of the grouped query embeddings.
#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "groundkit/lexicon.hpp"
#include "groundkit/neural.hpp"
#include "groundkit/querygen.hpp"
#include "groundkit/tags.hpp"
#include "groundkit/training.hpp"

namespace groundkit {

// ---------------------------------------------------------------------------
// Structure recovery
// ---------------------------------------------------------------------------

struct ParsedGroup {
  GroupPhrase phrase;
  Vector entity;  // averaged ENT embeddings, or the abstraction embedding
  std::optional<Vector> attribute;
  std::optional<Vector> location;
};

struct ParsedQuery {
  std::vector<ParsedGroup> groups;
  std::vector<Vector> relations;  // relations[k] links group k to k+1
  Program program;

  std::size_t hop_count() const { return relations.size(); }
};

/// Replaces role tags with averaged word embeddings, one set per group.
inline ParsedQuery recover_structure(const std::vector<std::string>& tokens, const TagSequence& tags,
                                     const EmbeddingTable& table) {
  ParsedQuery q;
  q.program = parse_program(tokens, tags);
  for (const auto& g : q.program.groups) {
    ParsedGroup pg;
    pg.phrase = g;
    pg.entity = table.average(g.entity_query());
    if (g.has_attribute()) pg.attribute = table.average(g.attribute);
    if (g.has_location()) pg.location = table.average(g.location);
    q.groups.push_back(std::move(pg));
  }
  for (const auto& r : q.program.relations) q.relations.push_back(table.average(r));
  return q;
}

// ---------------------------------------------------------------------------
// Tagger network
// ---------------------------------------------------------------------------

struct TagOutput {
  TagSequence tags;
  std::vector<Vector> probabilities;  // per token, kTagCount entries
};

struct TaggerMetrics {
  double token_accuracy = 0.0;
  double sentence_accuracy = 0.0;
  std::size_t tokens = 0;
  std::size_t sentences = 0;
};

class Tagger {
 public:
  Tagger() = default;
  Tagger(EmbeddingTable table, int hidden_dim, Rng& rng)
      : table_(std::move(table)),
        gru_("tagger.gru", table_.dim(), hidden_dim),
        head_("tagger.head", static_cast<Eigen::Index>(kTagCount), 2 * hidden_dim) {
    gru_.init(rng);
    head_.init_uniform(rng, 1.0 / std::sqrt(2.0 * hidden_dim));
  }

  const EmbeddingTable& table() const { return table_; }
  EmbeddingTable& table() { return table_; }
  int hidden_dim() const { return gru_.hidden_dim(); }

  /// Trainable parameters; the embedding table is included when any of
  /// its rows is trainable.
  ParameterList parameters() {
    auto ps = gru_.parameters();
    ps.push_back(&head_);
    if (table_.any_trainable()) ps.push_back(&table_.parameter());
    return ps;
  }

  /// Logits per step (kTagCount x B) for a batch of equal-length sequences.
  std::vector<Matrix> logits(const std::vector<std::vector<std::size_t>>& batch, BiGru::Cache* cache = nullptr) const {
    const std::size_t T = batch.front().size();
    const auto B = static_cast<Eigen::Index>(batch.size());
    std::vector<Matrix> xs(T, Matrix(table_.dim(), B));
    const auto& emb = table_.parameter().value;
    for (std::size_t t = 0; t < T; ++t)
      for (Eigen::Index b = 0; b < B; ++b) xs[t].col(b) = emb.col(static_cast<Eigen::Index>(batch[static_cast<std::size_t>(b)][t]));
    const auto hs = gru_.forward(xs, cache);
    std::vector<Matrix> out(T);
    for (std::size_t t = 0; t < T; ++t) out[t].noalias() = head_.value * hs[t];
    return out;
  }

  TagOutput tag(const std::vector<std::string>& tokens) const {
    if (tokens.empty()) throw Error("tag: empty token list");
    const auto ids = table_.ids(tokens);
    const auto ls = logits({ids});
    TagOutput out;
    for (const auto& l : ls) {
      Vector p = softmax(l.col(0));
      Eigen::Index best = 0;
      p.maxCoeff(&best);
      out.tags.push_back(Tag::from_class(static_cast<int>(best)));
      out.probabilities.push_back(std::move(p));
    }
    return out;
  }

  /// Mean token cross entropy of an equal-length batch; accumulates
  /// gradients when `backward` is set.
  double loss(const std::vector<std::vector<std::size_t>>& batch, const std::vector<std::vector<int>>& classes,
              bool backward) {
    BiGru::Cache cache;
    const auto ls = logits(batch, &cache);
    const std::size_t T = ls.size();
    const auto B = static_cast<Eigen::Index>(batch.size());
    Matrix all(static_cast<Eigen::Index>(kTagCount), static_cast<Eigen::Index>(T) * B);
    std::vector<int> flat;
    flat.reserve(T * batch.size());
    for (std::size_t t = 0; t < T; ++t) {
      all.middleCols(static_cast<Eigen::Index>(t) * B, B) = ls[t];
      for (Eigen::Index b = 0; b < B; ++b) flat.push_back(classes[static_cast<std::size_t>(b)][t]);
    }
    Matrix dall;
    const double value = cross_entropy(all, flat, backward ? &dall : nullptr);
    if (!backward) return value;

    std::vector<Matrix> dh(T);
    for (std::size_t t = 0; t < T; ++t) {
      const auto dl = dall.middleCols(static_cast<Eigen::Index>(t) * B, B);
      head_.grad.noalias() += dl * gru_output(cache, t).transpose();
      dh[t].noalias() = head_.value.transpose() * dl;
    }
    const auto dx = gru_.backward(cache, dh);
    auto& emb = table_.parameter();
    for (std::size_t t = 0; t < T; ++t)
      for (Eigen::Index b = 0; b < B; ++b) {
        const auto id = static_cast<Eigen::Index>(batch[static_cast<std::size_t>(b)][t]);
        if (!emb.frozen(id)) emb.grad.col(id) += dx[t].col(b);
      }
    return value;
  }

  TaggerMetrics evaluate(const std::vector<TaggedSentence>& data) const {
    TaggerMetrics m;
    std::size_t tok_ok = 0, sent_ok = 0;
    for (const auto& [len, idx] : buckets(data)) {
      for (std::size_t start = 0; start < idx.size(); start += 256) {
        const std::size_t end = std::min(idx.size(), start + 256);
        std::vector<std::vector<std::size_t>> batch;
        for (std::size_t i = start; i < end; ++i) batch.push_back(table_.ids(data[idx[i]].tokens));
        const auto ls = logits(batch);
        for (std::size_t b = 0; b < batch.size(); ++b) {
          bool all = true;
          for (std::size_t t = 0; t < len; ++t) {
            Eigen::Index best = 0;
            ls[t].col(static_cast<Eigen::Index>(b)).maxCoeff(&best);
            const bool ok = static_cast<int>(best) == data[idx[start + b]].tags[t].class_id();
            tok_ok += ok;
            all = all && ok;
          }
          sent_ok += all;
          m.tokens += len;
        }
      }
    }
    m.sentences = data.size();
    m.token_accuracy = m.tokens ? static_cast<double>(tok_ok) / m.tokens : 0.0;
    m.sentence_accuracy = m.sentences ? static_cast<double>(sent_ok) / m.sentences : 0.0;
    return m;
  }

  /// Sentence indices grouped by length, ascending.
  static std::map<std::size_t, std::vector<std::size_t>> buckets(const std::vector<TaggedSentence>& data) {
    std::map<std::size_t, std::vector<std::size_t>> b;
    for (std::size_t i = 0; i < data.size(); ++i) b[data[i].tokens.size()].push_back(i);
    return b;
  }

  void save(Checkpoint& ck) const {
    auto* self = const_cast<Tagger*>(this);
    auto ps = self->gru_.parameters();
    ps.push_back(&self->head_);
    store_parameters(ck, ps);
    ck.tensors["embedding"] = table_.parameter().value;
    Matrix frozen(1, static_cast<Eigen::Index>(table_.size()));
    for (std::size_t i = 0; i < table_.size(); ++i) frozen(0, static_cast<Eigen::Index>(i)) = table_.parameter().frozen(static_cast<Eigen::Index>(i));
    ck.tensors["embedding.frozen"] = frozen;
  }

  static Tagger load(const Checkpoint& ck, const std::vector<std::string>& words) {
    const auto& emb = ck.at("embedding");
    const auto& fr = ck.at("embedding.frozen");
    std::vector<std::uint8_t> frozen(static_cast<std::size_t>(fr.cols()));
    for (Eigen::Index i = 0; i < fr.cols(); ++i) frozen[static_cast<std::size_t>(i)] = fr(0, i) != 0.0;
    Tagger t;
    t.table_ = table_from_parts(words, emb, frozen);
    const auto hidden = static_cast<int>(ck.at("tagger.head").cols() / 2);
    t.gru_ = BiGru("tagger.gru", t.table_.dim(), hidden);
    t.head_ = Parameter("tagger.head", static_cast<Eigen::Index>(kTagCount), 2 * hidden);
    auto ps = t.gru_.parameters();
    ps.push_back(&t.head_);
    restore_parameters(ck, ps);
    return t;
  }

 private:
  static Matrix gru_output(const BiGru::Cache& c, std::size_t t) {
    const std::size_t T = c.fwd.h.size();
    const auto H = c.fwd.h.front().rows();
    Matrix h(2 * H, c.fwd.h.front().cols());
    h.topRows(H) = c.bwd.h[T - 1 - t];
    h.bottomRows(H) = c.fwd.h[t];
    return h;
  }

  EmbeddingTable table_;
  BiGru gru_;
  Parameter head_;  // kTagCount x 2H, the transposed tag projection
};

/// Trains with per-token softmax loss on length-bucketed batches, early
/// stopping on dev sentence accuracy. Resumable through `progress`.
inline void train_tagger(Tagger& tagger, const std::vector<TaggedSentence>& train,
                         const std::vector<TaggedSentence>& dev, const TrainSchedule& sched, TrainProgress& progress,
                         AdamW* optimizer = nullptr) {
  if (train.empty()) throw Error("train_tagger: empty dataset");
  const auto buckets = Tagger::buckets(train);
  std::size_t batches_per_epoch = 0;
  for (const auto& [_, idx] : buckets) batches_per_epoch += (idx.size() + sched.batch_size - 1) / sched.batch_size;
  AdamW local(sched.optimizer, batches_per_epoch * static_cast<std::size_t>(sched.max_epochs));
  AdamW& opt = optimizer ? *optimizer : local;
  const auto params = tagger.parameters();
  const auto& table = tagger.table();

  std::vector<std::vector<std::size_t>> ids(train.size());
  std::vector<std::vector<int>> classes(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    ids[i] = table.ids(train[i].tokens);
    for (const auto& t : train[i].tags) classes[i].push_back(t.class_id());
  }
  const auto& eval_set = dev.empty() ? train : dev;

  auto epoch_fn = [&](int epoch, AdamW& o) {
    Rng rng(derive_seed({sched.seed, 0x7a66e4ULL, static_cast<std::uint64_t>(epoch)}));
    std::vector<std::vector<std::size_t>> batches;
    for (const auto& [_, idx0] : buckets) {
      auto idx = idx0;
      rng.shuffle(idx);
      for (std::size_t s = 0; s < idx.size(); s += sched.batch_size)
        batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                             idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + sched.batch_size)));
    }
    rng.shuffle(batches);
    double total = 0.0;
    for (const auto& b : batches) {
      std::vector<std::vector<std::size_t>> bi;
      std::vector<std::vector<int>> bc;
      for (auto i : b) {
        bi.push_back(ids[i]);
        bc.push_back(classes[i]);
      }
      zero_grads(params);
      total += tagger.loss(bi, bc, true);
      o.step(params);
    }
    return total / static_cast<double>(batches.size());
  };
  run_epochs(params, opt, sched, progress, epoch_fn, [&] { return tagger.evaluate(eval_set).sentence_accuracy; });
}

}  // namespace groundkit
