// SPDX-License-Identifier: Apache-2.0
//
// Matching modules (entity, attribute, pairwise spatial), the location
// filter, triplet composition for 0/1/2-hop queries with full score traces,
// supervised module training and failure diagnosis.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "groundkit/features.hpp"
#include "groundkit/lexicon.hpp"
#include "groundkit/neural.hpp"
#include "groundkit/querygen.hpp"
#include "groundkit/tagger.hpp"
#include "groundkit/training.hpp"

namespace groundkit {

// ---------------------------------------------------------------------------
// Matching network
// ---------------------------------------------------------------------------

/// score = sigmoid(fc2 . c / |c| + b2), c = (fc1 z + b1) * q.
class MatchingNetwork {
 public:
  MatchingNetwork() = default;
  MatchingNetwork(const std::string& name, int input_dim, int joint_dim)
      : fc1(name + ".fc1", joint_dim, input_dim),
        b1(name + ".b1", joint_dim, 1),
        fc2(name + ".fc2", 1, joint_dim),
        b2(name + ".b2", 1, 1) {}

  Parameter fc1;  // joint x input
  Parameter b1;   // joint x 1
  Parameter fc2;  // 1 x joint
  Parameter b2;   // 1 x 1
  /// When positive, |c| is clamped to this floor instead of failing.
  double epsilon_floor = 0.0;

  int input_dim() const { return static_cast<int>(fc1.value.cols()); }
  int joint_dim() const { return static_cast<int>(fc1.value.rows()); }
  ParameterList parameters() { return {&fc1, &b1, &fc2, &b2}; }

  void init(Rng& rng) {
    const double in = 1.0 / std::sqrt(static_cast<double>(input_dim()));
    const double joint = 1.0 / std::sqrt(static_cast<double>(joint_dim()));
    fc1.init_uniform(rng, in);
    b1.init_uniform(rng, in);
    fc2.init_uniform(rng, joint);
    b2.init_uniform(rng, joint);
  }

  struct Cache {
    Matrix z, q, a, u;
    Vector norms;
  };

  /// Logits for a batch: z is input x B, q is joint x B.
  Eigen::RowVectorXd logits(const Matrix& z, const Matrix& q, Cache* cache = nullptr) const {
    if (q.rows() != joint_dim()) throw Error("matching: query embedding size differs from joint size");
    if (z.rows() != input_dim()) throw Error("matching: feature size mismatch");
    Matrix a = (fc1.value * z).colwise() + b1.value.col(0);
    Matrix c = a.cwiseProduct(q);
    Vector norms = c.colwise().norm().transpose();
    for (Eigen::Index i = 0; i < norms.size(); ++i) {
      if (norms[i] == 0.0 && epsilon_floor <= 0.0) throw Error("zero norm");
      norms[i] = std::max(norms[i], epsilon_floor);
    }
    Matrix u = c * norms.cwiseInverse().asDiagonal();
    Eigen::RowVectorXd s = (fc2.value * u).array() + b2.value(0, 0);
    if (cache) *cache = {z, q, std::move(a), std::move(u), std::move(norms)};
    return s;
  }

  /// Accumulates parameter gradients; when `dq` is given it receives the
  /// gradient with respect to the query columns.
  void backward(const Cache& c, const Eigen::RowVectorXd& ds, Matrix* dq = nullptr) {
    fc2.grad.noalias() += ds * c.u.transpose();
    b2.grad(0, 0) += ds.sum();
    Matrix du = fc2.value.transpose() * ds;  // joint x B
    const Eigen::RowVectorXd proj = c.u.cwiseProduct(du).colwise().sum();
    Matrix dc = (du - c.u * proj.asDiagonal()) * c.norms.cwiseInverse().asDiagonal();
    const Matrix da = dc.cwiseProduct(c.q);
    fc1.grad.noalias() += da * c.z.transpose();
    b1.grad.col(0) += da.rowwise().sum();
    if (dq) *dq = dc.cwiseProduct(c.a);
  }

  double score(const Vector& z, const Vector& q) const { return sigmoid(logits(z, q)(0)); }

  /// Probabilities for every column of z against one query.
  Vector scores(const Matrix& z, const Vector& q) const {
    const Matrix qs = q.replicate(1, z.cols());
    return logits(z, qs).unaryExpr([](double v) { return sigmoid(v); }).transpose();
  }
};

inline constexpr int kPairFeatures = 2 * kBoxFeatures;

struct GroundingModules {
  MatchingNetwork entity;     // E
  MatchingNetwork attribute;  // A
  MatchingNetwork spatial;    // B
  /// Query word vectors, a copy of the tagger's table tuned by the module losses.
  EmbeddingTable queries;

  GroundingModules() = default;
  GroundingModules(int entity_dim, EmbeddingTable query_table, Rng& rng)
      : entity("E", entity_dim, query_table.dim()),
        attribute("A", kAttributeDim, query_table.dim()),
        spatial("B", kPairFeatures, query_table.dim()),
        queries(std::move(query_table)) {
    queries.parameter().name = "Q.embedding";
    entity.init(rng);
    attribute.init(rng);
    spatial.init(rng);
  }

  int joint_dim() const { return queries.dim(); }

  ParameterList parameters() {
    ParameterList ps;
    for (auto* net : {&entity, &attribute, &spatial})
      for (auto* p : net->parameters()) ps.push_back(p);
    ps.push_back(&queries.parameter());
    return ps;
  }

  void set_epsilon_floor(double eps) {
    entity.epsilon_floor = attribute.epsilon_floor = spatial.epsilon_floor = eps;
  }

  void save(Checkpoint& ck) const {
    store_parameters(ck, const_cast<GroundingModules*>(this)->parameters());
    Matrix frozen(1, static_cast<Eigen::Index>(queries.size()));
    for (Eigen::Index i = 0; i < frozen.cols(); ++i) frozen(0, i) = queries.parameter().frozen(i);
    ck.tensors["Q.frozen"] = frozen;
  }

  static GroundingModules load(const Checkpoint& ck, const std::vector<std::string>& words) {
    const auto& fr = ck.at("Q.frozen");
    std::vector<std::uint8_t> frozen(static_cast<std::size_t>(fr.cols()));
    for (Eigen::Index i = 0; i < fr.cols(); ++i) frozen[static_cast<std::size_t>(i)] = fr(0, i) != 0.0;
    GroundingModules g;
    g.queries = table_from_parts(words, ck.at("Q.embedding"), frozen);
    g.queries.parameter().name = "Q.embedding";
    const int joint = g.queries.dim();
    g.entity = MatchingNetwork("E", static_cast<int>(ck.at("E.fc1").cols()), joint);
    g.attribute = MatchingNetwork("A", kAttributeDim, joint);
    g.spatial = MatchingNetwork("B", kPairFeatures, joint);
    restore_parameters(ck, g.parameters());
    return g;
  }
};

// ---------------------------------------------------------------------------
// Scene-level module evaluation
// ---------------------------------------------------------------------------

inline Matrix entity_matrix(const std::vector<ObjectRepresentation>& reps) {
  Matrix z(reps.front().entity.size(), static_cast<Eigen::Index>(reps.size()));
  for (std::size_t i = 0; i < reps.size(); ++i) z.col(static_cast<Eigen::Index>(i)) = reps[i].entity;
  return z;
}

inline Matrix attribute_matrix(const std::vector<ObjectRepresentation>& reps) {
  Matrix z(kAttributeDim, static_cast<Eigen::Index>(reps.size()));
  for (std::size_t i = 0; i < reps.size(); ++i) z.col(static_cast<Eigen::Index>(i)) = reps[i].attribute;
  return z;
}

inline Vector pair_features(const BoxFeatures& a, const BoxFeatures& b) {
  Vector v(kPairFeatures);
  for (int k = 0; k < kBoxFeatures; ++k) {
    v[k] = a[static_cast<std::size_t>(k)];
    v[kBoxFeatures + k] = b[static_cast<std::size_t>(k)];
  }
  return v;
}

/// Off-diagonal ordered pairs (n, m), n-major; one column per pair.
inline Matrix pair_matrix(const std::vector<ObjectRepresentation>& reps) {
  const auto n = static_cast<Eigen::Index>(reps.size());
  Matrix p(kPairFeatures, n * (n - 1) > 0 ? n * (n - 1) : 0);
  Eigen::Index col = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) p.col(col++) = pair_features(reps[static_cast<std::size_t>(i)].box, reps[static_cast<std::size_t>(j)].box);
  return p;
}

/// N x N pairwise probabilities with the diagonal masked to 0.
inline Matrix pairwise_scores(const MatchingNetwork& net, const std::vector<ObjectRepresentation>& reps,
                              const Vector& q) {
  const auto n = static_cast<Eigen::Index>(reps.size());
  Matrix out = Matrix::Zero(n, n);
  if (n < 2) return out;
  const Vector s = net.scores(pair_matrix(reps), q);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) out(i, j) = s[k++];
  return out;
}

inline double pairwise_match(const MatchingNetwork& net, const BoxFeatures& bn, const BoxFeatures& bm,
                             const Vector& q) {
  return net.score(pair_features(bn, bm), q);
}

/// softmax_n( sum_{m != n} S_n S_m B[n][m] )
inline Vector location_filter(const Vector& unary, const Matrix& pairwise) {
  const auto n = unary.size();
  Vector logits = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j) logits[i] += unary[i] * unary[j] * pairwise(i, j);
  return softmax(logits);
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

struct GroupScores {
  Vector entity;
  std::optional<Vector> attribute;
  std::optional<Matrix> location_pairwise;
  std::optional<Vector> location;
  Vector unary;  // entity * attribute * location
};

struct HopScores {
  Matrix relation;                // N x N, diagonal 0
  Vector raw;                     // max_m (S_n + B[n][m] + T_m)
  std::vector<int> best_partner;  // argmax m per n
  Vector output;                  // raw / 3, fed to the next hop out
};

struct GroundingTrace {
  std::vector<GroupScores> groups;
  std::vector<HopScores> hops;  // hops[k] relates group k to group k+1
};

inline constexpr double kLowConfidence = 0.5;

struct GroundingResult {
  Vector scores;
  int predicted = -1;
  double confidence = 0.0;
  bool low_confidence = false;
  GroundingTrace trace;
};

inline int argmax_index(const Vector& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<int>(best);
}

/// Triplet aggregation: raw_n = max_m (subject_n + relation(n, m) + object_m).
inline HopScores aggregate_hop(const Vector& subject, const Matrix& relation, const Vector& object) {
  const auto n = subject.size();
  HopScores h;
  h.relation = relation;
  h.raw.resize(n);
  h.best_partner.assign(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      const double v = subject[i] + relation(i, j) + object[j];
      if (v > best) {
        best = v;
        h.best_partner[static_cast<std::size_t>(i)] = static_cast<int>(j);
      }
    }
    h.raw[i] = best;
  }
  h.output = h.raw / 3.0;
  return h;
}

inline GroupScores score_group(const GroundingModules& mods, const std::vector<ObjectRepresentation>& reps,
                               const Matrix& entity_z, const Matrix& attribute_z, const ParsedGroup& g) {
  GroupScores s;
  s.entity = mods.entity.scores(entity_z, g.entity);
  s.unary = s.entity;
  if (g.attribute) {
    s.attribute = mods.attribute.scores(attribute_z, *g.attribute);
    s.unary = s.unary.cwiseProduct(*s.attribute);
  }
  if (g.location) {
    s.location_pairwise = pairwise_scores(mods.spatial, reps, *g.location);
    s.location = location_filter(s.unary, *s.location_pairwise);
    s.unary = s.unary.cwiseProduct(*s.location);
  }
  return s;
}

inline GroundingResult finalize(Vector scores, GroundingTrace trace) {
  GroundingResult r;
  r.scores = std::move(scores);
  r.predicted = argmax_index(r.scores);
  r.confidence = r.scores[r.predicted];
  r.low_confidence = r.confidence < kLowConfidence;
  r.trace = std::move(trace);
  return r;
}

/// Evaluates every group, then folds hops innermost-first.
inline GroundingResult compose_and_ground(const GroundingModules& mods, const std::vector<ObjectRepresentation>& reps,
                                          const ParsedQuery& parsed) {
  if (reps.empty()) throw Error("compose_and_ground: empty scene");
  if (parsed.groups.size() != parsed.hop_count() + 1) throw StructureError("group count does not match hop count");
  const Matrix ez = entity_matrix(reps);
  const Matrix az = attribute_matrix(reps);
  GroundingTrace trace;
  for (const auto& g : parsed.groups) trace.groups.push_back(score_group(mods, reps, ez, az, g));
  Vector current = trace.groups.back().unary;
  trace.hops.resize(parsed.hop_count());
  for (std::size_t k = parsed.hop_count(); k-- > 0;) {
    const Matrix rel = pairwise_scores(mods.spatial, reps, parsed.relations[k]);
    trace.hops[k] = aggregate_hop(trace.groups[k].unary, rel, current);
    current = trace.hops[k].output;
  }
  return finalize(std::move(current), std::move(trace));
}

/// Recomputes the final scores from module outputs stored in a trace.
inline GroundingResult replay_trace(const GroundingTrace& t) {
  GroundingTrace copy;
  for (const auto& g : t.groups) {
    GroupScores s = g;
    s.unary = g.entity;
    if (g.attribute) s.unary = s.unary.cwiseProduct(*g.attribute);
    if (g.location_pairwise) {
      s.location = location_filter(s.unary, *g.location_pairwise);
      s.unary = s.unary.cwiseProduct(*s.location);
    }
    copy.groups.push_back(std::move(s));
  }
  Vector current = copy.groups.back().unary;
  copy.hops.resize(t.hops.size());
  for (std::size_t k = t.hops.size(); k-- > 0;) {
    copy.hops[k] = aggregate_hop(copy.groups[k].unary, t.hops[k].relation, current);
    current = copy.hops[k].output;
  }
  return finalize(std::move(current), std::move(copy));
}

namespace detail {
inline json vec_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}
inline json mat_json(const Matrix& m) {
  json a = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    a.push_back(std::move(row));
  }
  return a;
}
}  // namespace detail

inline json grounding_to_json(const GroundingResult& r) {
  json j;
  j["predicted"] = r.predicted;
  j["confidence"] = r.confidence;
  j["low_confidence"] = r.low_confidence;
  j["scores"] = detail::vec_json(r.scores);
  j["groups"] = json::array();
  for (const auto& g : r.trace.groups) {
    json jg = {{"E", detail::vec_json(g.entity)}, {"unary", detail::vec_json(g.unary)}};
    if (g.attribute) jg["A"] = detail::vec_json(*g.attribute);
    if (g.location) {
      jg["L"] = detail::vec_json(*g.location);
      jg["B_location"] = detail::mat_json(*g.location_pairwise);
    }
    j["groups"].push_back(std::move(jg));
  }
  j["hops"] = json::array();
  for (const auto& h : r.trace.hops)
    j["hops"].push_back({{"B_relation", detail::mat_json(h.relation)},
                         {"raw", detail::vec_json(h.raw)},
                         {"best_partner", h.best_partner},
                         {"output", detail::vec_json(h.output)}});
  return j;
}

// ---------------------------------------------------------------------------
// Diagnosis
// ---------------------------------------------------------------------------

enum class FailureClass { Correct, Parsing, Perception };

inline std::string_view failure_name(FailureClass f) {
  switch (f) {
    case FailureClass::Correct: return "correct";
    case FailureClass::Parsing: return "parsing";
    case FailureClass::Perception: return "perception";
  }
  return "?";
}

struct Diagnosis {
  FailureClass failure = FailureClass::Correct;
  bool lucky = false;  // wrong tags but the right answer
};

inline Diagnosis diagnose(const TagSequence& predicted_tags, int predicted, const TagSequence& gold_tags, int target) {
  if (predicted_tags != gold_tags) return {FailureClass::Parsing, predicted == target};
  if (predicted != target) return {FailureClass::Perception, false};
  return {FailureClass::Correct, false};
}

// ---------------------------------------------------------------------------
// Module training
// ---------------------------------------------------------------------------

/// Representations of every scene of a corpus.
using SceneFeatures = std::vector<std::vector<ObjectRepresentation>>;

inline SceneFeatures represent_corpus(const Corpus& corpus, const Catalogue& c, const EntityFeatureProvider& provider) {
  SceneFeatures out;
  out.reserve(corpus.scenes.size());
  for (const auto& s : corpus.scenes) out.push_back(represent_scene(s, c, provider));
  return out;
}

enum class UnaryKind { Entity, Attribute };

/// One optimization batch: feature columns, their query columns and the
/// word ids behind each run of query columns.
struct MatchBatch {
  Matrix z, q;
  std::vector<double> targets;
  std::vector<std::vector<std::size_t>> words;
  std::vector<Eigen::Index> widths;  // query columns per entry of `words`
};

inline MatchBatch unary_batch(const std::vector<UnaryRow>& rows, std::span<const std::size_t> idx,
                              const SceneFeatures& feats, const EmbeddingTable& table, UnaryKind kind) {
  const auto B = static_cast<Eigen::Index>(idx.size());
  const auto& first = feats[rows[idx[0]].scene][rows[idx[0]].object];
  MatchBatch d;
  d.z.resize(kind == UnaryKind::Entity ? first.entity.size() : kAttributeDim, B);
  d.q.resize(table.dim(), B);
  d.targets.resize(idx.size());
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& row = rows[idx[static_cast<std::size_t>(b)]];
    const auto& rep = feats[row.scene][row.object];
    d.z.col(b) = kind == UnaryKind::Entity ? rep.entity : rep.attribute;
    d.q.col(b) = table.average(row.words);
    d.targets[static_cast<std::size_t>(b)] = row.target ? 1.0 : 0.0;
    d.words.push_back(table.ids(row.words));
    d.widths.push_back(1);
  }
  return d;
}

/// Mean BCE over the batch. With `queries` set, gradients flow into the
/// network and into the query word vectors.
inline double match_loss(MatchingNetwork& net, const MatchBatch& d, bool backward, Parameter* queries = nullptr) {
  if (d.targets.empty()) return 0.0;
  MatchingNetwork::Cache cache;
  const Eigen::RowVectorXd s = net.logits(d.z, d.q, backward ? &cache : nullptr);
  std::vector<double> grad(d.targets.size());
  const double loss = bce_per_logit(std::span<const double>(s.data(), static_cast<std::size_t>(s.size())), d.targets,
                                    backward ? std::span<double>(grad) : std::span<double>{});
  if (!backward) return loss;
  Matrix dq;
  net.backward(cache, Eigen::Map<const Eigen::RowVectorXd>(grad.data(), s.size()), queries ? &dq : nullptr);
  if (queries) {
    Eigen::Index at = 0;
    for (std::size_t g = 0; g < d.words.size(); ++g) {
      const Vector sum = dq.middleCols(at, d.widths[g]).rowwise().sum();
      at += d.widths[g];
      const double share = 1.0 / static_cast<double>(d.words[g].size());
      for (auto id : d.words[g]) queries->grad.col(static_cast<Eigen::Index>(id)) += share * sum;
    }
  }
  return loss;
}

/// Threshold-0.5 classification accuracy.
inline double unary_accuracy(const MatchingNetwork& net, const std::vector<UnaryRow>& rows, const SceneFeatures& feats,
                             const EmbeddingTable& table, UnaryKind kind) {
  if (rows.empty()) return 0.0;
  std::size_t ok = 0;
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < rows.size(); s += 1024) {
    idx.clear();
    for (std::size_t i = s; i < std::min(rows.size(), s + 1024); ++i) idx.push_back(i);
    const auto d = unary_batch(rows, idx, feats, table, kind);
    const Eigen::RowVectorXd l = net.logits(d.z, d.q);
    for (Eigen::Index b = 0; b < l.size(); ++b) ok += (l(b) > 0.0) == (d.targets[static_cast<std::size_t>(b)] > 0.5);
  }
  return static_cast<double>(ok) / static_cast<double>(rows.size());
}

/// Clears the query table's optimizer moments when a phase starts fresh.
inline void begin_phase(EmbeddingTable& table, const TrainProgress& progress) {
  if (progress.epoch != 0) return;
  table.parameter().m.setZero();
  table.parameter().v.setZero();
}

inline void train_unary(MatchingNetwork& net, UnaryKind kind, const std::vector<UnaryRow>& train,
                        const SceneFeatures& train_feats, const std::vector<UnaryRow>& dev,
                        const SceneFeatures& dev_feats, EmbeddingTable& table, const TrainSchedule& sched,
                        TrainProgress& progress) {
  if (train.empty()) throw Error("train_unary: empty dataset");
  const std::size_t per_epoch = (train.size() + sched.batch_size - 1) / sched.batch_size;
  AdamW opt(sched.optimizer, per_epoch * static_cast<std::size_t>(sched.max_epochs));
  auto params = net.parameters();
  Parameter* q = table.any_trainable() ? &table.parameter() : nullptr;
  if (q) params.push_back(q);
  begin_phase(table, progress);
  auto epoch_fn = [&](int epoch, AdamW& o) {
    Rng rng(derive_seed({sched.seed, 0x0e7a11ULL + static_cast<std::uint64_t>(kind), static_cast<std::uint64_t>(epoch)}));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += sched.batch_size) {
      const std::span<const std::size_t> idx(order.data() + s, std::min(sched.batch_size, order.size() - s));
      const auto d = unary_batch(train, idx, train_feats, table, kind);
      zero_grads(params);
      total += match_loss(net, d, true, q);
      o.step(params);
    }
    return total / static_cast<double>(per_epoch);
  };
  const bool has_dev = !dev.empty();
  run_epochs(params, opt, sched, progress, epoch_fn, [&] {
    return has_dev ? unary_accuracy(net, dev, dev_feats, table, kind)
                   : unary_accuracy(net, train, train_feats, table, kind);
  });
}

/// Pair features per scene (see pair_matrix), computed once.
using ScenePairs = std::vector<Matrix>;

inline ScenePairs pairs_for(const SceneFeatures& feats) {
  ScenePairs out;
  out.reserve(feats.size());
  for (const auto& f : feats) out.push_back(pair_matrix(f));
  return out;
}

inline MatchBatch spatial_batch(const std::vector<SpatialRow>& rows, std::span<const std::size_t> idx,
                                const ScenePairs& pairs, const EmbeddingTable& table) {
  Eigen::Index cols = 0;
  for (auto i : idx) cols += pairs[rows[i].scene].cols();
  MatchBatch d;
  d.z.resize(kPairFeatures, cols);
  d.q.resize(table.dim(), cols);
  d.targets.reserve(static_cast<std::size_t>(cols));
  Eigen::Index at = 0;
  for (auto i : idx) {
    const auto& row = rows[i];
    const auto& p = pairs[row.scene];
    d.z.middleCols(at, p.cols()) = p;
    d.q.middleCols(at, p.cols()) = table.average(row.words).replicate(1, p.cols());
    const std::size_t n = row.target.size();
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        if (a != b) d.targets.push_back(row.target(a, b) ? 1.0 : 0.0);
    d.words.push_back(table.ids(row.words));
    d.widths.push_back(p.cols());
    at += p.cols();
  }
  return d;
}

/// Off-diagonal pair accuracy at threshold 0.5.
inline double spatial_accuracy(const MatchingNetwork& net, const std::vector<SpatialRow>& rows, const ScenePairs& pairs,
                               const EmbeddingTable& table) {
  std::size_t ok = 0, total = 0;
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < rows.size(); s += 64) {
    idx.clear();
    for (std::size_t i = s; i < std::min(rows.size(), s + 64); ++i) idx.push_back(i);
    const auto d = spatial_batch(rows, idx, pairs, table);
    if (d.targets.empty()) continue;
    const Eigen::RowVectorXd l = net.logits(d.z, d.q);
    for (Eigen::Index b = 0; b < l.size(); ++b) ok += (l(b) > 0.0) == (d.targets[static_cast<std::size_t>(b)] > 0.5);
    total += d.targets.size();
  }
  return total ? static_cast<double>(ok) / static_cast<double>(total) : 0.0;
}

inline void train_spatial(MatchingNetwork& net, const std::vector<SpatialRow>& train, const ScenePairs& train_pairs,
                          const std::vector<SpatialRow>& dev, const ScenePairs& dev_pairs, EmbeddingTable& table,
                          const TrainSchedule& sched, TrainProgress& progress) {
  if (train.empty()) throw Error("train_spatial: empty dataset");
  const std::size_t per_epoch = (train.size() + sched.batch_size - 1) / sched.batch_size;
  AdamW opt(sched.optimizer, per_epoch * static_cast<std::size_t>(sched.max_epochs));
  auto params = net.parameters();
  Parameter* q = table.any_trainable() ? &table.parameter() : nullptr;
  if (q) params.push_back(q);
  begin_phase(table, progress);
  auto epoch_fn = [&](int epoch, AdamW& o) {
    Rng rng(derive_seed({sched.seed, 0x5ba71aULL, static_cast<std::uint64_t>(epoch)}));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += sched.batch_size) {
      const std::span<const std::size_t> idx(order.data() + s, std::min(sched.batch_size, order.size() - s));
      const auto d = spatial_batch(train, idx, train_pairs, table);
      if (d.targets.empty()) continue;
      zero_grads(params);
      total += match_loss(net, d, true, q);
      o.step(params);
    }
    return total / static_cast<double>(per_epoch);
  };
  const bool has_dev = !dev.empty();
  run_epochs(params, opt, sched, progress, epoch_fn, [&] {
    return has_dev ? spatial_accuracy(net, dev, dev_pairs, table) : spatial_accuracy(net, train, train_pairs, table);
  });
}

}  // namespace groundkit
