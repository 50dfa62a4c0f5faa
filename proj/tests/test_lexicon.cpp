// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "groundkit/lexicon.hpp"

using namespace groundkit;

namespace {

std::string write_temp(const std::string& name, const std::string& text) {
  const auto path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream(path) << text;
  return path;
}

}  // namespace

TEST_CASE("tokenizer lowercases and strips trailing punctuation") {
  CHECK(tokenize("Grasp the Blue soda, behind the right cereal box!") ==
        std::vector<std::string>{"grasp", "the", "blue", "soda", "behind", "the", "right", "cereal", "box"});
  CHECK(tokenize("  coca-cola  ") == std::vector<std::string>{"coca-cola"});
  CHECK(tokenize("   ").empty());
}

TEST_CASE("closed vocabulary covers every template word") {
  const auto c = default_catalogue();
  const auto v = closed_vocabulary(c);
  const std::set<std::string> words(v.begin(), v.end());
  for (auto w : {"the", "grasp", "give", "me", "that", "is", "item", "object", "thing", "leftmost", "from", "front",
                 "cereal", "box", "coca-cola", "red", "next", "to", "than"})
    CHECK(words.count(w) == 1);
  CHECK(std::is_sorted(v.begin(), v.end()));
}

TEST_CASE("random table lookups") {
  Rng rng(3);
  EmbeddingTable t({"bowl", "red", "the", "bowl"}, 5, rng);
  CHECK(t.size() == 3);
  CHECK(t.dim() == 5);
  CHECK(t.embed("bowl").size() == 5);
  CHECK(t.embed("bowl").cwiseAbs().maxCoeff() <= 0.1);
  CHECK(t.any_trainable());
  const Vector avg = t.average({"bowl", "red"});
  CHECK((avg - 0.5 * (t.embed("bowl") + t.embed("red"))).norm() < 1e-15);
  try {
    t.id("spoon");
    FAIL("expected an OOV error");
  } catch (const OovError& e) {
    CHECK(e.token() == "spoon");
    CHECK(std::string(e.what()) == "OOV: unknown word 'spoon'");
  }
  CHECK_THROWS_AS(t.average({}), Error);
}

TEST_CASE("loading pretrained vectors freezes them") {
  const auto path = write_temp("gk_emb.txt", "bowl 1 0 0\nred 0 1 0\n\nextra 0 0 1\n");
  Rng rng(1);
  const auto t = load_embeddings(path, {"bowl", "red", "mug"}, 3, rng);
  CHECK(t.size() == 4);
  CHECK(t.embed("bowl") == Vector::Unit(3, 0));
  CHECK_FALSE(t.trainable("bowl"));
  CHECK(t.trainable("mug"));
  CHECK(t.contains("extra"));
  std::filesystem::remove(path);
}

TEST_CASE("embedding file errors") {
  Rng rng(1);
  const auto bad = write_temp("gk_bad.txt", "bowl 1 0 0\nred 0 x 0\n");
  CHECK_THROWS_WITH(load_embeddings(bad, {}, 3, rng), Catch::Matchers::ContainsSubstring(":2:"));
  const auto short_line = write_temp("gk_short.txt", "bowl 1 0\n");
  CHECK_THROWS_WITH(load_embeddings(short_line, {}, 3, rng), Catch::Matchers::ContainsSubstring("expected 3 values"));
  const auto dup = write_temp("gk_dup.txt", "bowl 1 0 0\nbowl 0 1 0\n");
  CHECK_THROWS_WITH(load_embeddings(dup, {}, 3, rng), Catch::Matchers::ContainsSubstring("duplicate vocabulary entry"));
  const auto empty = write_temp("gk_empty.txt", "");
  const auto t = load_embeddings(empty, {"bowl"}, 3, rng);
  CHECK(t.trainable("bowl"));
  CHECK_THROWS_AS(load_embeddings("/nonexistent/file", {}, 3, rng), Error);
  for (const auto& p : {bad, short_line, dup, empty}) std::filesystem::remove(p);
}

TEST_CASE("table rebuilt from parts keeps vectors and frozen rows") {
  Rng rng(2);
  EmbeddingTable t({"a", "b"}, 4, rng);
  auto again = table_from_parts(t.words(), t.parameter().value, {1, 0});
  CHECK(again.embed("a") == t.embed("a"));
  CHECK_FALSE(again.trainable("a"));
  CHECK(again.trainable("b"));
  CHECK_THROWS_AS(table_from_parts({"a"}, t.parameter().value, {}), Error);
  CHECK(t.dump_vocabulary() == "a\nb\n");
}
