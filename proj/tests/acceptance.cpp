// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run on the desk configuration. Prints one
// PASS/FAIL line per criterion and exits non-zero when any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "groundkit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace groundkit;

namespace {

using Clock = std::chrono::steady_clock;

double minutes_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count() / 60.0;
}

struct Verdicts {
  int failed = 0;
  std::vector<std::string> lines;

  void record(const std::string& label, bool ok, const std::string& detail) {
    std::ostringstream os;
    os << (ok ? "PASS" : "FAIL") << "  " << label << ": " << detail;
    lines.push_back(os.str());
    std::cout << lines.back() << std::endl;
    failed += !ok;
  }
};

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Lists files that differ (or exist on one side only) between two trees.
std::vector<std::string> tree_differences(const fs::path& a, const fs::path& b) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a).string();
    seen.insert(rel);
    if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) out.push_back(rel);
  }
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file() && !seen.count(fs::relative(e.path(), b).string()))
      out.push_back(fs::relative(e.path(), b).string());
  return out;
}

std::vector<TaggedSentence> sentences_of(const Corpus& c, std::size_t limit) {
  std::vector<TaggedSentence> out;
  for (std::size_t i = 0; i < std::min(limit, c.queries.size()); ++i) out.push_back({c.queries[i].tokens, c.queries[i].tags});
  return out;
}

std::string split_line(const EvalReport& r) {
  std::ostringstream os;
  for (std::size_t i = 0; i < kSplitCount; ++i) os << kSplitNames[i] << " " << pct(r.splits[i].accuracy()) << "  ";
  os << "Average " << pct(r.average());
  return os.str();
}

bool meets_grounding_targets(const EvalReport& r) {
  const std::array<double, kSplitCount> need = {0.95, 0.92, 0.94, 0.92, 0.90};
  bool ok = r.average() >= 0.93;
  for (std::size_t i = 0; i < kSplitCount; ++i) ok = ok && r.splits[i].accuracy() >= need[i];
  return ok;
}

double auc(const std::vector<std::pair<double, bool>>& scored) {
  double pos = 0, neg = 0, wins = 0;
  for (const auto& [s, y] : scored) (y ? pos : neg) += 1;
  for (const auto& [sp, yp] : scored) {
    if (!yp) continue;
    for (const auto& [sn, yn] : scored)
      if (!yn) wins += sp > sn ? 1.0 : sp == sn ? 0.5 : 0.0;
  }
  return pos && neg ? wins / (pos * neg) : 0.0;
}

std::size_t find_instance(const Catalogue& c, std::string_view cat, std::string_view color) {
  for (std::size_t i = 0; i < c.instances.size(); ++i)
    if (c.category_of(i) == cat && c.color_of(i).name == color) return i;
  throw Error("instance missing from catalogue");
}

SceneGraph fixture(const Catalogue& c, const std::vector<std::pair<std::size_t, std::pair<double, double>>>& objs,
                   const SceneSpec& spec) {
  SceneGraph s;
  s.width = spec.width;
  s.height = spec.height;
  for (const auto& [inst, xy] : objs) s.objects.push_back(make_object(s.objects.size(), inst, xy.first, xy.second, 1.0, c));
  s.relations = build_relation_tensor(s.objects);
  return s;
}

// ---------------------------------------------------------------------------

void gradient_checks(Verdicts& v) {
  double worst = 0.0;
  std::string where;
  auto note = [&](const GradCheckResult& r, const std::string& what) {
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      where = what + " " + r.worst;
    }
  };
  const std::vector<std::string> words = {"grasp", "the", "red", "bowl", "left", "from", "mug", "item", "behind", "blue"};
  for (std::uint64_t point = 0; point < 3; ++point) {
    Rng rng(700 + point);
    Tagger t(EmbeddingTable(words, 4, rng), 3, rng);
    std::vector<std::vector<std::size_t>> batch(2);
    std::vector<std::vector<int>> classes(2);
    for (std::size_t b = 0; b < 2; ++b)
      for (int i = 0; i < 7; ++i) {
        batch[b].push_back(rng.index(words.size()));
        classes[b].push_back(static_cast<int>(rng.uniform_int(0, kTagCount - 1)));
      }
    note(gradient_check(t.parameters(), [&](bool bw) { return t.loss(batch, classes, bw); }, rng, 25), "tagger");

    Rng mrng(800 + point);
    EmbeddingTable table(words, 5, mrng);
    table.parameter().value *= 10.0;
    struct Net {
      const char* name;
      int input;
      Eigen::Index width;
    };
    for (const auto& [name, input, width] : {Net{"E", 9, 1}, Net{"A", kAttributeDim, 1}, Net{"B", kPairFeatures, 4}}) {
      MatchingNetwork net(name, input, 5);
      net.init(mrng);
      const Matrix z = Matrix::NullaryExpr(input, 5 * width, [&] { return mrng.uniform(-1.0, 1.0); });
      std::vector<std::vector<std::string>> phrase;
      for (int g = 0; g < 5; ++g) phrase.push_back({words[mrng.index(words.size())], words[mrng.index(words.size())]});
      std::vector<double> targets;
      for (Eigen::Index i = 0; i < z.cols(); ++i) targets.push_back(mrng.uniform() < 0.5 ? 1.0 : 0.0);
      auto batch_of = [&] {
        MatchBatch d;
        d.z = z;
        d.q.resize(5, z.cols());
        d.targets = targets;
        for (std::size_t g = 0; g < phrase.size(); ++g) {
          d.q.middleCols(static_cast<Eigen::Index>(g) * width, width) = table.average(phrase[g]).replicate(1, width);
          d.words.push_back(table.ids(phrase[g]));
          d.widths.push_back(width);
        }
        return d;
      };
      auto ps = net.parameters();
      ps.push_back(&table.parameter());
      note(gradient_check(ps, [&](bool bw) { return match_loss(net, batch_of(), bw, &table.parameter()); }, mrng, 25),
           name);
    }
  }
  std::ostringstream os;
  os << "max relative error " << std::scientific << std::setprecision(2) << worst << " (worst " << where << ")";
  v.record("5 gradient checks", worst < 1e-4, os.str());
}

void predicate_properties(Verdicts& v, const Catalogue& c) {
  Rng rng(6006);
  std::size_t violations = 0;
  for (int k = 0; k < 10000; ++k) {
    const auto a = make_object(0, rng.index(c.instances.size()), rng.uniform(-1, 1), rng.uniform(0, 1),
                               rng.uniform(0.85, 1.15), c);
    const auto b = make_object(1, rng.index(c.instances.size()), rng.uniform(-1, 1), rng.uniform(0, 1),
                               rng.uniform(0.85, 1.15), c);
    for (auto r : kAllRelations) {
      const bool ab = evaluate_relation(r, a, b), ba = evaluate_relation(r, b, a);
      if (r == Relation::NextTo) {
        violations += ab != ba;
      } else {
        violations += ab && ba;
        violations += ab != evaluate_relation(converse(r), b, a);
      }
    }
  }
  v.record("6 relation predicate properties", violations == 0,
           std::to_string(violations) + " violations over 10000 random pairs x 9 relations");
}

void oracle_validity(Verdicts& v, const Dataset& d) {
  std::size_t records = 0, bad = 0;
  std::string first;
  for (const auto& c : d.parts)
    for (const auto& q : c.queries) {
      ++records;
      const auto& s = c.scenes[c.scene_index(q.scene_id)];
      const auto problems = check_record(s, d.catalogue, q);
      const auto found = symbolic_execute(s, d.catalogue, q.tokens, q.tags);
      if (!problems.empty() || found != std::vector<std::size_t>{static_cast<std::size_t>(q.target)}) {
        if (!bad++) first = record_to_json(q).dump();
      }
    }
  v.record("3 oracle validity", bad == 0 && records >= 10000,
           std::to_string(records - bad) + "/" + std::to_string(records) + " records execute to exactly their target" +
               (bad ? "; first violation " + first : ""));
}

void exhaustive_one_hop(Verdicts& v, const Models& m, const Catalogue& c, const EntityFeatureProvider& provider,
                        const Config& cfg) {
  SceneSpec spec = cfg.scene;
  spec.min_objects = 2;
  spec.max_objects = 6;
  std::size_t scenes = 0, mismatches = 0;
  for (std::uint64_t seed = 0; scenes < 200; ++seed) {
    const auto s = sample_scene(derive_seed({seed, 0xacc4}), c, spec, 900000 + seed);
    QueryRecord q;
    try {
      q = generate_query(s, c, Split::OneHop, derive_seed({seed, 0xacc5}), cfg.query);
    } catch (const NoValidBinding&) {
      continue;
    }
    ++scenes;
    const auto reps = represent_scene(s, c, provider);
    const auto parsed = recover_structure(q.tokens, q.tags, m.modules.queries);
    const auto r = compose_and_ground(m.modules, reps, parsed);
    const std::size_t n = s.size();
    auto unary = [&](const ParsedGroup& g, std::size_t i) {
      double u = m.modules.entity.score(reps[i].entity, g.entity);
      if (g.attribute) u *= m.modules.attribute.score(reps[i].attribute, *g.attribute);
      return u;
    };
    auto group_scores = [&](const ParsedGroup& g) {
      std::vector<double> u(n);
      for (std::size_t i = 0; i < n; ++i) u[i] = unary(g, i);
      if (!g.location) return u;
      std::vector<double> logit(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (i != j) logit[i] += u[i] * u[j] * pairwise_match(m.modules.spatial, reps[i].box, reps[j].box, *g.location);
      const double mx = *std::max_element(logit.begin(), logit.end());
      double z = 0.0;
      for (auto& l : logit) z += (l = std::exp(l - mx));
      for (std::size_t i = 0; i < n; ++i) u[i] *= logit[i] / z;
      return u;
    };
    const auto sub = group_scores(parsed.groups[0]), obj = group_scores(parsed.groups[1]);
    std::vector<double> best(n, -std::numeric_limits<double>::infinity());
    bool dominated = true;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) {
        const double rel = a == b ? 0.0 : pairwise_match(m.modules.spatial, reps[a].box, reps[b].box, parsed.relations[0]);
        const double t = (sub[a] + rel + obj[b]) / 3.0;
        best[a] = std::max(best[a], t);
        dominated = dominated && r.scores[static_cast<Eigen::Index>(a)] >= t - 1e-12;
      }
    bool same = dominated;
    for (std::size_t a = 0; a < n; ++a) same = same && std::abs(r.scores[static_cast<Eigen::Index>(a)] - best[a]) <= 1e-12;
    same = same && r.predicted == static_cast<int>(std::max_element(best.begin(), best.end()) - best.begin());
    mismatches += !same;
  }
  v.record("4 one-hop exhaustiveness", mismatches == 0,
           std::to_string(mismatches) + " mismatches against brute force over " + std::to_string(scenes) +
               " scenes with N <= 6");
}

void degenerate_cases(Verdicts& v, const Models& m, const Catalogue& c, const EntityFeatureProvider& provider,
                      const Corpus& test, const Config& cfg) {
  SceneSpec one = cfg.scene;
  one.min_objects = one.max_objects = 1;
  std::size_t tried = 0, bad = 0;
  std::string first;
  for (std::size_t i = 0; i < std::min<std::size_t>(test.queries.size(), 1000); ++i) {
    const auto s = sample_scene(derive_seed({i, 0xd1}), c, one, 950000 + i);
    const auto reps = represent_scene(s, c, provider);
    const auto text = join_words(test.queries[i].tokens);
    ++tried;
    try {
      const auto g = ground_text(m, reps, text);
      if (g.result.predicted != 0 || !(g.result.confidence > 0.0)) {
        if (!bad++) first = text;
      }
    } catch (const std::exception& e) {
      if (!bad++) first = text + " (" + e.what() + ")";
    }
  }
  bool oov_ok = false;
  std::string oov_msg;
  try {
    const auto s = sample_scene(1, c, one, 1);
    ground_text(m, represent_scene(s, c, provider), "grasp the spork left from the mug");
  } catch (const OovError& e) {
    oov_msg = e.what();
    oov_ok = e.token() == "spork" && oov_msg == "OOV: unknown word 'spork'";
  } catch (const std::exception& e) {
    oov_msg = std::string("wrong error: ") + e.what();
  }
  v.record("8 degenerate cases", bad == 0 && oov_ok,
           std::to_string(tried - bad) + "/" + std::to_string(tried) + " single-object queries return index 0 with " +
               "positive confidence" + (bad ? " (first failure: " + first + ")" : "") + "; OOV -> \"" + oov_msg + "\"");
}

void diagnosis_consistency(Verdicts& v, const Models& m, const Catalogue& c, const EntityFeatureProvider& provider,
                           const Corpus& test, const EvalReport& report) {
  bool sums = true;
  std::size_t total = 0;
  for (const auto& s : report.splits) {
    sums = sums && s.correct + s.parsing + s.lucky + s.perception == s.total;
    total += s.total;
  }
  sums = sums && total == test.queries.size() && report.outcomes.size() == total;
  const SceneFeatures feats = represent_corpus(test, c, provider);
  Rng rng(9009);
  std::size_t not_parsing = 0;
  for (const auto& q : test.queries) {
    TagSequence corrupted = q.tags;
    const std::size_t at = rng.index(corrupted.size());
    int cls = corrupted[at].class_id();
    const int shift = static_cast<int>(rng.uniform_int(1, kTagCount - 1));
    corrupted[at] = Tag::from_class((cls + shift) % static_cast<int>(kTagCount));
    int predicted = -1;
    try {
      const auto si = test.scene_index(q.scene_id);
      predicted = compose_and_ground(m.modules, feats[si], recover_structure(q.tokens, corrupted, m.modules.queries))
                      .predicted;
    } catch (const StructureError&) {
    }
    not_parsing += diagnose(corrupted, predicted, q.tags, q.target).failure != FailureClass::Parsing;
  }
  const auto& o = report.overall;
  v.record("9 failure-diagnosis consistency", sums && not_parsing == 0,
           "correct " + std::to_string(o.correct) + " + parsing " + std::to_string(o.parsing) + " + lucky " +
               std::to_string(o.lucky) + " + perception " + std::to_string(o.perception) + " = " +
               std::to_string(o.correct + o.parsing + o.lucky + o.perception) + " of " + std::to_string(total) + "; " +
               std::to_string(not_parsing) + "/" + std::to_string(test.queries.size()) +
               " corrupted-tag queries not classified parsing");
}

void module_checks(Verdicts& v, const Models& m, Dataset& data, const EntityFeatureProvider& provider,
                   const Config& cfg) {
  const auto& c = data.catalogue;
  const SceneFeatures dev_f = represent_corpus(data.dev(), c, provider);
  const auto dev = build_module_datasets(data.dev());
  const double e = unary_accuracy(m.modules.entity, dev.entity, dev_f, m.modules.queries, UnaryKind::Entity);
  v.record("module entity words", e >= 0.97, pct(e) + "% held-out object/word accuracy (need 97)");
  const double a = unary_accuracy(m.modules.attribute, dev.attribute, dev_f, m.modules.queries, UnaryKind::Attribute);
  v.record("module attribute colors", a >= 0.99, pct(a) + "% held-out crop/color accuracy (need 99)");

  const Vector left = m.modules.queries.average(split_words(relation_phrase(Relation::Left)));
  const auto bowl = find_instance(c, "bowl", "red"), mug = find_instance(c, "mug", "black"),
             book = find_instance(c, "book", "blue");
  Rng rng(4242);
  std::vector<std::pair<double, bool>> scored;
  for (int k = 0; k < 200; ++k) {
    const double y = rng.uniform(0.1, 0.9);
    std::vector<double> xs = {rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9)};
    const auto s = fixture(c, {{bowl, {xs[0], y}}, {mug, {xs[1], y}}, {book, {xs[2], y}}}, cfg.scene);
    const auto reps = represent_scene(s, c, provider);
    const Matrix p = pairwise_scores(m.modules.spatial, reps, left);
    const auto& truth = s.relation(Relation::Left);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        if (i != j) scored.emplace_back(p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), truth(i, j));
  }
  const double area = auc(scored);
  v.record("module spatial left", area >= 0.98, "AUC " + pct(area) + "% on 200 collinear 3-object scenes (need 98)");

  std::size_t right = 0, trials = 0;
  for (int k = 0; k < 100; ++k) {
    const double x0 = rng.uniform(-0.9, 0.6), dx = rng.uniform(0.2, 0.3);
    const double y0 = rng.uniform(0.1, 0.9), y1 = std::clamp(y0 + rng.uniform(-0.1, 0.1), 0.0, 1.0);
    const bool swap = rng.uniform() < 0.5;
    const double ax = swap ? x0 + dx : x0, bx = swap ? x0 : x0 + dx;
    const auto s = fixture(c, {{bowl, {ax, y0}}, {bowl, {bx, y1}}}, cfg.scene);
    const auto g = ground_text(m, represent_scene(s, c, provider), "grasp the leftmost bowl");
    ++trials;
    right += g.result.predicted == (ax < bx ? 0 : 1);
  }
  v.record("module leftmost fixture", right == trials,
           std::to_string(right) + "/" + std::to_string(trials) + " two-bowl fixtures pick the smaller world x");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"groundkit acceptance run"};
  std::string work = "acceptance_work";
  std::string source = GROUNDKIT_SOURCE_DIR;
  app.add_option("--work", work, "Scratch directory (wiped at start)");
  app.add_option("--source", source, "Repository root holding data/desk.json");
  CLI11_PARSE(app, argc, argv);

  Verdicts v;
  const fs::path root(work);
  fs::remove_all(root);
  fs::create_directories(root);

  Config cfg = load_config((fs::path(source) / "data" / "desk.json").string());
  if (!cfg.catalogue.empty() && fs::path(cfg.catalogue).is_relative()) cfg.catalogue = (fs::path(source) / cfg.catalogue).string();
  TrainOptions quiet;
  quiet.quiet = true;
  const fs::path data_dir = root / "data", model_dir = root / "models";

  const auto t0 = Clock::now();
  cmd_gen(cfg, data_dir, false);
  const double gen_min = minutes_since(t0);
  const auto t1 = Clock::now();
  cmd_train(cfg, data_dir, model_dir, Stage::Tagger, quiet);
  const double tagger_min = minutes_since(t1);
  const auto t2 = Clock::now();
  cmd_train(cfg, data_dir, model_dir, Stage::Modules, quiet);
  const double modules_min = minutes_since(t2);
  const double total_min = minutes_since(t0);
  std::printf("desk run: gen %.1f min, tagger %.1f min, modules %.1f min\n", gen_min, tagger_min, modules_min);

  Dataset data = load_dataset(data_dir);
  const Models models = load_models(model_dir);
  const auto provider = model_provider(models, cfg, data.catalogue);

  {
    const auto held = sentences_of(data.test(), 2000);
    const auto train_n = data.train().queries.size();
    const auto mt = models.tagger.evaluate(held);
    std::ostringstream os;
    os << "token " << pct(mt.token_accuracy) << "% sentence " << pct(mt.sentence_accuracy) << "% on " << held.size()
       << " held-out queries after training on " << train_n << " (" << std::fixed << std::setprecision(1)
       << tagger_min << " min)";
    v.record("1 tagger accuracy",
             mt.token_accuracy >= 0.99 && mt.sentence_accuracy >= 0.93 && train_n >= 20000 && held.size() == 2000 &&
                 tagger_min <= 30.0,
             os.str());
  }

  const EvalReport test_report = cmd_eval(cfg, data_dir, model_dir, "test", root / "reports");
  {
    std::ostringstream os;
    os << split_line(test_report) << " (" << std::fixed << std::setprecision(1) << total_min << " min)";
    v.record("2 grounding by split", meets_grounding_targets(test_report) && total_min <= 60.0, os.str());
  }

  oracle_validity(v, data);
  exhaustive_one_hop(v, models, data.catalogue, *provider, cfg);
  gradient_checks(v);
  predicate_properties(v, data.catalogue);

  {
    cmd_gen(cfg, root / "data_again", false);
    const auto gen_diff = tree_differences(data_dir, root / "data_again");
    fs::create_directories(root / "models_again");
    cmd_train(cfg, data_dir, root / "models_again", Stage::All, quiet);
    const auto train_diff = tree_differences(model_dir, root / "models_again");
    std::string detail = std::to_string(gen_diff.size()) + " differing dataset files, " +
                         std::to_string(train_diff.size()) + " differing training outputs";
    for (const auto& f : gen_diff) detail += " " + f;
    for (const auto& f : train_diff) detail += " " + f;
    v.record("7 determinism", gen_diff.empty() && train_diff.empty(), detail);
  }

  degenerate_cases(v, models, data.catalogue, *provider, data.test(), cfg);
  diagnosis_consistency(v, models, data.catalogue, *provider, data.test(), test_report);

  std::cout << "supplementary checks" << std::endl;
  module_checks(v, models, data, *provider, cfg);
  {
    const auto dev_standalone = cmd_eval(cfg, data_dir, model_dir, "dev", root / "reports");
    const bool same = slurp(root / "reports" / "dev_report.json") == slurp(model_dir / "dev_report.json");
    v.record("dev report skew", same, same ? "training-time dev report equals standalone eval" : "reports differ");
    double sum = 0.0;
    for (const auto& s : dev_standalone.splits) sum += s.accuracy();
    v.record("report average", std::abs(sum / kSplitCount - dev_standalone.average()) < 1e-15,
             "average " + pct(dev_standalone.average()) + "% equals the mean of the split accuracies");
  }
  v.record("symbolic baseline", test_report.overall.symbolic_accuracy() == 1.0,
           pct(test_report.overall.symbolic_accuracy()) + "% of test queries");
  {
    Config exact = cfg;
    exact.entity_sigma = 0.0;
    const fs::path dir = root / "models_sigma0";
    fs::create_directories(dir);
    fs::copy_file(model_dir / "tagger.ckpt", dir / "tagger.ckpt");
    cmd_train(exact, data_dir, dir, Stage::Modules, quiet);
    const auto r = cmd_eval(exact, data_dir, dir, "test", dir);
    v.record("oracle features", meets_grounding_targets(r), "sigma 0: " + split_line(r));
  }

  std::ofstream summary(root / "summary.txt");
  for (const auto& l : v.lines) summary << l << "\n";
  std::printf("%d failing\n", v.failed);
  return v.failed ? 1 : 0;
}
