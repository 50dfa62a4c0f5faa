// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include "groundkit/pipeline.hpp"

using namespace groundkit;
using Catch::Approx;

namespace {

Corpus small_corpus(std::uint64_t first, std::size_t scenes) {
  const auto c = default_catalogue();
  Corpus out;
  for (std::uint64_t s = first; s < first + scenes; ++s) {
    out.scenes.push_back(sample_scene(s, c, {}, s));
    for (auto split : kAllSplits) {
      try {
        auto r = generate_query(out.scenes.back(), c, split, derive_seed({s, 17, static_cast<std::uint64_t>(split)}));
        out.queries.push_back(std::move(r));
      } catch (const NoValidBinding&) {
      }
    }
  }
  return out;
}

std::vector<TaggedSentence> sentences(const Corpus& c) { return build_module_datasets(c).tagger; }

Tagger make_tagger(int dim, int hidden, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingTable table(closed_vocabulary(default_catalogue()), dim, rng);
  return Tagger(std::move(table), hidden, rng);
}

std::vector<int> classes_of(const TaggedSentence& s) {
  std::vector<int> out;
  for (const auto& t : s.tags) out.push_back(t.class_id());
  return out;
}

TrainSchedule quick(double lr, std::size_t batch, int epochs) {
  TrainSchedule s;
  s.optimizer.lr = lr;
  s.batch_size = batch;
  s.max_epochs = epochs;
  s.patience = epochs;
  s.seed = 99;
  return s;
}

}  // namespace

TEST_CASE("tagger loss gradients pass finite differences at three points") {
  const std::vector<std::string> a = {"grasp", "the", "red", "bowl", "left", "from", "the", "mug"};
  const std::vector<std::string> b = {"the", "item", "behind", "the", "blue", "soda", "can", "please"};
  for (std::uint64_t point = 0; point < 3; ++point) {
    Rng rng(40 + point);
    EmbeddingTable table({"grasp", "the", "red", "bowl", "left", "from", "mug", "item", "behind", "blue", "soda", "can",
                          "please"},
                         4, rng);
    Tagger t(std::move(table), 3, rng);
    auto ps = t.parameters();
    REQUIRE(ps.size() == 10);  // two GRU directions of four blocks, the head, the embeddings
    const std::vector<std::vector<std::size_t>> batch = {t.table().ids(a), t.table().ids(b)};
    std::vector<std::vector<int>> classes(2);
    for (auto& c : classes)
      for (std::size_t i = 0; i < a.size(); ++i) c.push_back(static_cast<int>(rng.uniform_int(0, kTagCount - 1)));
    const auto res = gradient_check(ps, [&](bool backward) { return t.loss(batch, classes, backward); }, rng, 20);
    INFO(res.worst);
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("tag distributions are normalized") {
  const auto t = make_tagger(8, 6, 1);
  const auto out = t.tag({"the", "bowl", "next", "to", "the", "mug"});
  REQUIRE(out.tags.size() == 6);
  for (const auto& p : out.probabilities) {
    CHECK(p.size() == static_cast<Eigen::Index>(kTagCount));
    CHECK(p.sum() == Approx(1.0).margin(1e-12));
    CHECK(p.minCoeff() >= 0.0);
  }
  CHECK_THROWS_AS(t.tag({"the", "spork"}), OovError);
  CHECK_THROWS_AS(t.tag({}), Error);
}

TEST_CASE("tagger memorizes a single sentence") {
  auto t = make_tagger(16, 16, 2);
  TaggedSentence s{{"grasp", "the", "blue", "soda", "behind", "the", "right", "cereal", "box"},
                   parse_tags({"MASK:0", "MASK:0", "ATT:0", "ENT:0", "REL:0", "MASK:1", "LOC:1", "ENT:1", "ENT:1"})};
  const std::vector<std::vector<std::size_t>> ids = {t.table().ids(s.tokens)};
  const std::vector<std::vector<int>> classes = {classes_of(s)};
  AdamWConfig cfg;
  cfg.lr = 1e-2;
  AdamW opt(cfg, 300);
  const auto ps = t.parameters();
  for (int step = 0; step < 300; ++step) {
    zero_grads(ps);
    t.loss(ids, classes, true);
    opt.step(ps);
  }
  CHECK(t.loss(ids, classes, false) < 0.01);
  CHECK(t.tag(s.tokens).tags == s.tags);
}

TEST_CASE("structure recovery on the worked example") {
  Rng rng(3);
  EmbeddingTable table(closed_vocabulary(default_catalogue()), 6, rng);
  const std::vector<std::string> tokens = {"grasp", "the", "blue", "soda", "behind", "the", "right", "cereal", "box"};
  const auto tags = parse_tags({"MASK:0", "MASK:0", "ATT:0", "ENT:0", "REL:0", "MASK:1", "LOC:1", "ENT:1", "ENT:1"});
  const auto q = recover_structure(tokens, tags, table);
  CHECK(q.hop_count() == 1);
  REQUIRE(q.groups.size() == 2);
  CHECK(q.groups[0].entity == table.embed("soda"));
  REQUIRE(q.groups[0].attribute);
  CHECK(*q.groups[0].attribute == table.embed("blue"));
  CHECK_FALSE(q.groups[0].location);
  REQUIRE(q.groups[1].location);
  CHECK(*q.groups[1].location == table.embed("right"));
  CHECK((q.groups[1].entity - 0.5 * (table.embed("cereal") + table.embed("box"))).norm() < 1e-15);
  CHECK(q.relations[0] == table.embed("behind"));

  const auto item = recover_structure({"the", "thing", "next", "to", "the", "mug"},
                                      parse_tags({"MASK:0", "ABS:0", "REL:0", "REL:0", "MASK:1", "ENT:1"}), table);
  CHECK(item.groups[0].entity == table.embed("item"));
  CHECK((item.relations[0] - 0.5 * (table.embed("next") + table.embed("to"))).norm() < 1e-15);

  CHECK_THROWS_WITH(recover_structure({"the", "the"}, parse_tags({"MASK:0", "MASK:0"}), table),
                    Catch::Matchers::ContainsSubstring("no entity group"));
}

TEST_CASE("tagger checkpoint round trip") {
  auto t = make_tagger(8, 5, 4);
  const std::vector<std::string> q = {"give", "me", "the", "leftmost", "red", "book"};
  Checkpoint ck;
  t.save(ck);
  const auto back = Tagger::load(ck, t.table().words());
  const auto a = t.logits({t.table().ids(q)}), b = back.logits({back.table().ids(q)});
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  CHECK(back.hidden_dim() == 5);
}

TEST_CASE("resumed training equals an uninterrupted run") {
  const auto data = sentences(small_corpus(0, 30));
  const auto dev = sentences(small_corpus(500, 5));
  auto sched = quick(5e-3, 16, 4);

  auto straight = make_tagger(8, 8, 5);
  TrainProgress p1;
  train_tagger(straight, data, dev, sched, p1);

  auto first = make_tagger(8, 8, 5);
  TrainProgress p2;
  sched.epoch_budget = 2;
  train_tagger(first, data, dev, sched, p2);
  REQUIRE(p2.epoch == 2);
  REQUIRE_FALSE(p2.finished);
  const auto path = (std::filesystem::temp_directory_path() / "gk_resume.ckpt").string();
  save_checkpoint(path, tagger_checkpoint(first, p2, 0));

  TrainProgress p3;
  auto resumed = tagger_from_checkpoint(load_checkpoint(path), &p3);
  CHECK(p3.epoch == 2);
  sched.epoch_budget = 0;
  train_tagger(resumed, data, dev, sched, p3);
  std::filesystem::remove(path);

  CHECK(p3.step == p1.step);
  REQUIRE(p3.curve.size() == p1.curve.size());
  for (std::size_t i = 0; i < p1.curve.size(); ++i) CHECK(p3.curve[i].loss == p1.curve[i].loss);
  const auto a = straight.parameters(), b = resumed.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
}

TEST_CASE("tagger learns the template language") {
  const auto train = sentences(small_corpus(0, 240));
  const auto held = sentences(small_corpus(10000, 60));
  auto t = make_tagger(16, 24, 6);
  TrainProgress p;
  train_tagger(t, train, {}, quick(5e-3, 16, 6), p);
  const auto m = t.evaluate(held);
  CHECK(m.token_accuracy > 0.97);
}

TEST_CASE("shuffled labels leave the tagger near chance") {
  auto train = sentences(small_corpus(0, 240));
  const auto held = sentences(small_corpus(10000, 60));
  Rng rng(8);
  for (auto& s : train)
    for (auto& tag : s.tags) tag = Tag::from_class(static_cast<int>(rng.uniform_int(0, kTagCount - 1)));
  auto t = make_tagger(16, 24, 6);
  TrainProgress p;
  train_tagger(t, train, {}, quick(5e-3, 16, 6), p);
  const auto m = t.evaluate(held);
  CHECK(m.token_accuracy <= 2.0 / static_cast<double>(kTagCount));
  CHECK(m.sentence_accuracy < 0.01);
}
