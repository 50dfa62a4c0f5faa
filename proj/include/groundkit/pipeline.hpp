// SPDX-License-Identifier: Apache-2.0
//
// End-to-end commands: dataset generation, staged training with resumable
// checkpoints, evaluation by split, and single-query grounding.
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundkit/config.hpp"
#include "groundkit/features.hpp"
#include "groundkit/grounding.hpp"
#include "groundkit/lexicon.hpp"
#include "groundkit/querygen.hpp"
#include "groundkit/scene.hpp"
#include "groundkit/scenegen.hpp"
#include "groundkit/tagger.hpp"

namespace groundkit {

namespace fs = std::filesystem;

inline constexpr std::array<std::string_view, 3> kPartitions = {"train", "dev", "test"};

// Seed derivation tags.
inline constexpr std::uint64_t kSceneSeedTag = 0x5ce7e;
inline constexpr std::uint64_t kQuerySeedTag = 0x9e7a;
inline constexpr std::uint64_t kFeatureSeedTag = 0xfea7;
inline constexpr std::uint64_t kEmbeddingSeedTag = 0xe4b;
inline constexpr std::uint64_t kTaggerInitTag = 0x7a9;
inline constexpr std::uint64_t kModuleInitTag = 0x40d;

inline Catalogue catalogue_for(const Config& cfg) {
  return cfg.catalogue.empty() ? default_catalogue() : load_catalogue(cfg.catalogue);
}

inline std::size_t partition_index(std::string_view name) {
  for (std::size_t i = 0; i < kPartitions.size(); ++i)
    if (kPartitions[i] == name) return i;
  throw Error("unknown partition '" + std::string(name) + "' (expected train, dev or test)");
}

inline std::size_t partition_size(const Config& cfg, std::size_t p) {
  return p == 0 ? cfg.train_scenes : p == 1 ? cfg.dev_scenes : cfg.test_scenes;
}

/// Scene ids are global: train first, then dev, then test.
inline std::uint64_t first_scene_id(const Config& cfg, std::size_t p) {
  std::uint64_t id = 0;
  for (std::size_t i = 0; i < p; ++i) id += partition_size(cfg, i);
  return id;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

inline Split draw_split(const std::array<double, kSplitCount>& mix, Rng& rng) {
  double total = 0.0;
  for (double w : mix) total += w;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < kSplitCount; ++i) {
    if (mix[i] <= 0.0) continue;
    if (u < mix[i]) return kAllSplits[i];
    u -= mix[i];
  }
  for (std::size_t i = kSplitCount; i-- > 0;)
    if (mix[i] > 0.0) return kAllSplits[i];
  throw Error("empty split mix");
}

struct GenStats {
  std::size_t scenes = 0;
  std::size_t queries = 0;
  std::size_t unbound = 0;  // query slots the scene could not host
};

/// Generates one partition. Every record is oracle-checked; a violation
/// throws with the offending record.
inline Corpus generate_partition(const Config& cfg, const Catalogue& cat, std::size_t p, GenStats* stats = nullptr) {
  Corpus c;
  const std::size_t n = partition_size(cfg, p);
  const std::uint64_t base = first_scene_id(cfg, p);
  c.scenes.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t id = base + i;
    c.scenes.push_back(sample_scene(derive_seed({cfg.seed, kSceneSeedTag, id}), cat, cfg.scene, id));
    const auto& scene = c.scenes.back();
    for (std::size_t q = 0; q < cfg.queries_per_scene; ++q) {
      Rng pick(derive_seed({cfg.seed, kQuerySeedTag, id, q}));
      const Split split = draw_split(cfg.split_mix, pick);
      // A scene that cannot host the drawn split falls through to the next
      // split of the mix, so every slot is filled when any split fits.
      std::optional<QueryRecord> rec;
      for (std::size_t k = 0; k < kSplitCount && !rec; ++k) {
        const auto si = (static_cast<std::size_t>(split) + k) % kSplitCount;
        if (cfg.split_mix[si] <= 0.0) continue;
        for (std::uint64_t attempt = 0; attempt < 4 && !rec; ++attempt) {
          try {
            rec = generate_query(scene, cat, kAllSplits[si], derive_seed({cfg.seed, kQuerySeedTag, id, q, si, attempt}),
                                 cfg.query);
          } catch (const NoValidBinding&) {
          }
        }
      }
      if (!rec) {
        if (stats) ++stats->unbound;
        continue;
      }
      const auto problems = check_record(scene, cat, *rec);
      if (!problems.empty())
        throw Error("generator produced an invalid record (" + problems.front() + "): " + record_to_json(*rec).dump());
      c.queries.push_back(std::move(*rec));
    }
  }
  if (stats) {
    stats->scenes += c.scenes.size();
    stats->queries += c.queries.size();
  }
  return c;
}

inline json dataset_header(const Config& cfg, std::string_view partition, std::string_view kind, std::size_t count) {
  return {{"header",
           {{"format", "groundkit-" + std::string(kind) + "/1"},
            {"partition", partition},
            {"seed", cfg.seed},
            {"count", count}}}};
}

inline void write_lines(const fs::path& path, const json& header, const std::vector<json>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << header.dump() << '\n';
  for (const auto& r : rows) out << r.dump() << '\n';
}

/// Reads a line-delimited file, skipping the header record.
inline std::vector<json> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (j.contains("header")) continue;
    rows.push_back(std::move(j));
  }
  return rows;
}

inline void write_corpus(const fs::path& dir, const Config& cfg, std::string_view partition, const Corpus& c) {
  fs::create_directories(dir);
  std::vector<json> scenes, queries;
  for (const auto& s : c.scenes) scenes.push_back(scene_to_json(s));
  for (const auto& q : c.queries) queries.push_back(record_to_json(q));
  write_lines(dir / "scenes.jsonl", dataset_header(cfg, partition, "scenes", scenes.size()), scenes);
  write_lines(dir / "queries.jsonl", dataset_header(cfg, partition, "queries", queries.size()), queries);
}

inline Corpus read_corpus(const fs::path& dir) {
  Corpus c;
  for (const auto& j : read_lines(dir / "scenes.jsonl")) c.scenes.push_back(scene_from_json(j));
  for (const auto& j : read_lines(dir / "queries.jsonl")) c.queries.push_back(record_from_json(j));
  return c;
}

struct Dataset {
  Catalogue catalogue;
  std::array<Corpus, 3> parts;
  Corpus& train() { return parts[0]; }
  Corpus& dev() { return parts[1]; }
  Corpus& test() { return parts[2]; }
};

/// Writes <out>/config.json, catalogue.json and one directory per partition.
inline GenStats cmd_gen(const Config& cfg, const fs::path& out, bool render_images) {
  const Catalogue cat = catalogue_for(cfg);
  fs::create_directories(out);
  {
    std::ofstream c(out / "config.json", std::ios::binary);
    c << config_to_json(cfg).dump(2) << '\n';
    std::ofstream k(out / "catalogue.json", std::ios::binary);
    k << catalogue_to_json(cat).dump(2) << '\n';
  }
  GenStats stats;
  for (std::size_t p = 0; p < kPartitions.size(); ++p) {
    const Corpus c = generate_partition(cfg, cat, p, &stats);
    write_corpus(out / kPartitions[p], cfg, kPartitions[p], c);
    if (render_images) {
      fs::create_directories(out / kPartitions[p] / "images");
      for (const auto& s : c.scenes)
        write_ppm((out / kPartitions[p] / "images" / (std::to_string(s.scene_id) + ".ppm")).string(),
                  render_pixels(s, cat), "scene_id=" + std::to_string(s.scene_id) + " seed=" + std::to_string(cfg.seed));
    }
  }
  return stats;
}

inline Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  d.catalogue = load_catalogue((dir / "catalogue.json").string());
  for (std::size_t p = 0; p < kPartitions.size(); ++p) d.parts[p] = read_corpus(dir / kPartitions[p]);
  return d;
}

struct ValidationReport {
  std::size_t scenes = 0;
  std::size_t records = 0;
  std::vector<std::string> problems;
};

/// Re-runs every oracle check on a stored dataset.
inline ValidationReport cmd_validate(const fs::path& dir, const PredicateMargins& margins = {}) {
  ValidationReport r;
  const Dataset d = load_dataset(dir);
  for (std::size_t p = 0; p < kPartitions.size(); ++p) {
    const auto& c = d.parts[p];
    for (const auto& s : c.scenes) {
      ++r.scenes;
      for (const auto& msg : check_scene(s, d.catalogue, margins))
        r.problems.push_back(std::string(kPartitions[p]) + " scene " + std::to_string(s.scene_id) + ": " + msg);
    }
    for (const auto& q : c.queries) {
      ++r.records;
      std::size_t si = 0;
      try {
        si = c.scene_index(q.scene_id);
      } catch (const Error& e) {
        r.problems.push_back(e.what());
        continue;
      }
      for (const auto& msg : check_record(c.scenes[si], d.catalogue, q))
        r.problems.push_back(std::string(kPartitions[p]) + " " + record_to_json(q).dump() + ": " + msg);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

inline std::unique_ptr<EntityFeatureProvider> make_provider(const Config& cfg, const Catalogue& cat) {
  if (cfg.entity_provider == "file") return std::make_unique<FileFeatureProvider>(cfg.entity_file, cfg.entity_dim);
  return std::make_unique<PrototypeFeatureProvider>(cat.instances.size(), cfg.entity_dim, cfg.entity_sigma,
                                                    derive_seed({cfg.seed, kFeatureSeedTag}));
}

/// Closed vocabulary plus every token seen in the corpus.
inline std::vector<std::string> corpus_vocabulary(const Catalogue& cat, const Corpus& c) {
  std::set<std::string> words;
  for (auto& w : closed_vocabulary(cat)) words.insert(w);
  for (const auto& q : c.queries) words.insert(q.tokens.begin(), q.tokens.end());
  return {words.begin(), words.end()};
}

inline EmbeddingTable make_embeddings(const Config& cfg, const std::vector<std::string>& vocab) {
  Rng rng(derive_seed({cfg.seed, kEmbeddingSeedTag}));
  if (!cfg.embeddings.empty()) return load_embeddings(cfg.embeddings, vocab, cfg.embedding_dim, rng);
  return EmbeddingTable(vocab, cfg.embedding_dim, rng);
}

struct Models {
  Tagger tagger;
  GroundingModules modules;
  json modules_header;
};

inline fs::path tagger_path(const fs::path& dir) { return dir / "tagger.ckpt"; }
inline fs::path modules_path(const fs::path& dir) { return dir / "modules.ckpt"; }

inline Checkpoint tagger_checkpoint(Tagger& t, const TrainProgress& p, std::uint64_t seed) {
  Checkpoint ck;
  t.save(ck);
  store_parameters(ck, t.parameters(), true);
  store_progress(ck, p, "");
  ck.header = json{{"kind", "tagger"},
               {"seed", seed},
               {"hidden", t.hidden_dim()},
               {"words", t.table().words()},
               {"progress", progress_json(p)}}
                  .dump();
  return ck;
}

inline json checkpoint_header(const Checkpoint& ck) {
  try {
    return json::parse(ck.header);
  } catch (const json::parse_error& e) {
    throw Error(std::string("checkpoint: malformed header: ") + e.what());
  }
}

inline Tagger tagger_from_checkpoint(const Checkpoint& ck, TrainProgress* progress = nullptr) {
  const json header = checkpoint_header(ck);
  if (header.value("kind", "") != "tagger") throw Error("not a tagger checkpoint");
  Tagger t = Tagger::load(ck, header.at("words").get<std::vector<std::string>>());
  if (progress) {
    progress_from_json(header.at("progress"), *progress);
    auto ps = t.parameters();
    restore_parameters(ck, ps, true);
    restore_progress(ck, *progress, ps, "");
  }
  return t;
}

struct ModuleProgress {
  TrainProgress entity, attribute, spatial;
};

inline Checkpoint modules_checkpoint(GroundingModules& m, const ModuleProgress& p, const Config& cfg) {
  Checkpoint ck;
  m.save(ck);
  store_parameters(ck, m.parameters(), true);
  store_progress(ck, p.entity, "E/");
  store_progress(ck, p.attribute, "A/");
  store_progress(ck, p.spatial, "B/");
  ck.header = json{{"kind", "modules"},
               {"seed", cfg.seed},
               {"words", m.queries.words()},
               {"entity_provider", cfg.entity_provider},
               {"entity_dim", cfg.entity_dim},
               {"entity_sigma", cfg.entity_sigma},
               {"feature_seed", derive_seed({cfg.seed, kFeatureSeedTag})},
               {"progress",
                {{"E", progress_json(p.entity)}, {"A", progress_json(p.attribute)}, {"B", progress_json(p.spatial)}}}}
                  .dump();
  return ck;
}

inline GroundingModules modules_from_checkpoint(const Checkpoint& ck, ModuleProgress* progress = nullptr) {
  const json header = checkpoint_header(ck);
  if (header.value("kind", "") != "modules") throw Error("not a modules checkpoint");
  GroundingModules m = GroundingModules::load(ck, header.at("words").get<std::vector<std::string>>());
  if (progress) {
    const auto& j = header.at("progress");
    progress_from_json(j.at("E"), progress->entity);
    progress_from_json(j.at("A"), progress->attribute);
    progress_from_json(j.at("B"), progress->spatial);
    restore_parameters(ck, m.parameters(), true);
    auto with_queries = [&](MatchingNetwork& net) {
      auto ps = net.parameters();
      ps.push_back(&m.queries.parameter());
      return ps;
    };
    restore_progress(ck, progress->entity, with_queries(m.entity), "E/");
    restore_progress(ck, progress->attribute, with_queries(m.attribute), "A/");
    restore_progress(ck, progress->spatial, with_queries(m.spatial), "B/");
  }
  return m;
}

inline Models load_models(const fs::path& dir) {
  const Checkpoint mods = load_checkpoint(modules_path(dir).string());
  return {tagger_from_checkpoint(load_checkpoint(tagger_path(dir).string())), modules_from_checkpoint(mods),
          checkpoint_header(mods)};
}

/// The provider the modules were trained with.
inline std::unique_ptr<EntityFeatureProvider> model_provider(const Models& m, const Config& cfg, const Catalogue& cat) {
  const auto& h = m.modules_header;
  const int dim = h.at("entity_dim").get<int>();
  if (h.at("entity_provider").get<std::string>() == "file") return std::make_unique<FileFeatureProvider>(cfg.entity_file, dim);
  return std::make_unique<PrototypeFeatureProvider>(cat.instances.size(), dim, h.at("entity_sigma").get<double>(),
                                                    h.at("feature_seed").get<std::uint64_t>());
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct SplitStats {
  std::size_t total = 0;
  std::size_t correct = 0;
  std::size_t parsing = 0;
  std::size_t perception = 0;
  std::size_t lucky = 0;
  std::size_t low_confidence = 0;
  std::size_t symbolic_correct = 0;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
  double symbolic_accuracy() const {
    return total ? static_cast<double>(symbolic_correct) / static_cast<double>(total) : 0.0;
  }
  void add(const SplitStats& o) {
    total += o.total;
    correct += o.correct;
    parsing += o.parsing;
    perception += o.perception;
    lucky += o.lucky;
    low_confidence += o.low_confidence;
    symbolic_correct += o.symbolic_correct;
  }
};

struct QueryOutcome {
  std::size_t index = 0;
  int predicted = -1;
  int target = -1;
  double confidence = 0.0;
  Diagnosis diagnosis;
  std::vector<std::string> predicted_tags;
  std::string error;  // structure error from recovery, if any
};

struct EvalReport {
  std::array<SplitStats, kSplitCount> splits{};
  SplitStats overall;
  double tag_token_accuracy = 0.0;
  double tag_sentence_accuracy = 0.0;
  std::vector<QueryOutcome> outcomes;

  /// Unweighted mean over the splits present in the corpus.
  double average() const {
    double sum = 0.0;
    int n = 0;
    for (const auto& s : splits)
      if (s.total) {
        sum += s.accuracy();
        ++n;
      }
    return n ? sum / n : 0.0;
  }
};

/// Top-1 accuracy counts only correct answers; right answers reached with
/// wrong tags stay parsing failures and are counted in `lucky`.
inline QueryOutcome run_query(const Models& m, const SceneGraph& scene, const std::vector<ObjectRepresentation>& reps,
                              const QueryRecord& q, std::size_t index) {
  QueryOutcome o;
  o.index = index;
  o.target = q.target;
  const TagOutput tagged = m.tagger.tag(q.tokens);
  o.predicted_tags = tag_strings(tagged.tags);
  try {
    const ParsedQuery parsed = recover_structure(q.tokens, tagged.tags, m.modules.queries);
    const GroundingResult r = compose_and_ground(m.modules, reps, parsed);
    o.predicted = r.predicted;
    o.confidence = r.confidence;
  } catch (const StructureError& e) {
    o.error = e.what();
  }
  (void)scene;
  o.diagnosis = diagnose(tagged.tags, o.predicted, q.tags, q.target);
  return o;
}

inline EvalReport evaluate_corpus(const Models& m, const Corpus& c, const Catalogue& cat,
                                  const EntityFeatureProvider& provider) {
  EvalReport rep;
  const SceneFeatures feats = represent_corpus(c, cat, provider);
  std::size_t tok_ok = 0, tok_all = 0, sent_ok = 0;
  for (std::size_t i = 0; i < c.queries.size(); ++i) {
    const auto& q = c.queries[i];
    const std::size_t si = c.scene_index(q.scene_id);
    QueryOutcome o = run_query(m, c.scenes[si], feats[si], q, i);
    auto& s = rep.splits[static_cast<std::size_t>(q.split)];
    ++s.total;
    switch (o.diagnosis.failure) {
      case FailureClass::Correct: ++s.correct; break;
      case FailureClass::Parsing: o.diagnosis.lucky ? ++s.lucky : ++s.parsing; break;
      case FailureClass::Perception: ++s.perception; break;
    }
    if (o.predicted >= 0 && o.confidence < kLowConfidence) ++s.low_confidence;
    const auto sym = symbolic_execute(c.scenes[si], cat, q.tokens, q.tags);
    if (sym.size() == 1 && static_cast<int>(sym.front()) == q.target) ++s.symbolic_correct;
    const auto gold = tag_strings(q.tags);
    bool all = true;
    for (std::size_t t = 0; t < gold.size(); ++t) {
      const bool ok = gold[t] == o.predicted_tags[t];
      tok_ok += ok;
      all = all && ok;
    }
    tok_all += gold.size();
    sent_ok += all;
    rep.outcomes.push_back(std::move(o));
  }
  for (const auto& s : rep.splits) rep.overall.add(s);
  rep.tag_token_accuracy = tok_all ? static_cast<double>(tok_ok) / static_cast<double>(tok_all) : 0.0;
  rep.tag_sentence_accuracy = c.queries.empty() ? 0.0 : static_cast<double>(sent_ok) / static_cast<double>(c.queries.size());
  return rep;
}

inline json split_json(const SplitStats& s) {
  return {{"total", s.total},           {"accuracy", s.accuracy()},     {"correct", s.correct},
          {"parsing", s.parsing},       {"lucky", s.lucky},             {"perception", s.perception},
          {"low_confidence", s.low_confidence}, {"symbolic_accuracy", s.symbolic_accuracy()}};
}

inline json report_json(const EvalReport& r) {
  json splits;
  for (std::size_t i = 0; i < kSplitCount; ++i) splits[std::string(kSplitNames[i])] = split_json(r.splits[i]);
  return {{"splits", splits},
          {"average", r.average()},
          {"overall", split_json(r.overall)},
          {"tagger", {{"token_accuracy", r.tag_token_accuracy}, {"sentence_accuracy", r.tag_sentence_accuracy}}}};
}

inline std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "split     total   top-1   parsing  lucky  perception  symbolic\n";
  auto row = [&](std::string_view name, const SplitStats& s) {
    os << std::left << std::setw(8) << name << std::right << std::setw(7) << s.total << std::setw(8)
       << 100.0 * s.accuracy() << std::setw(10) << s.parsing << std::setw(7) << s.lucky << std::setw(12)
       << s.perception << std::setw(10) << 100.0 * s.symbolic_accuracy() << "\n";
  };
  for (std::size_t i = 0; i < kSplitCount; ++i) row(kSplitNames[i], r.splits[i]);
  row("all", r.overall);
  os << "average (unweighted over splits): " << 100.0 * r.average() << "\n";
  os << "tagger token accuracy: " << 100.0 * r.tag_token_accuracy
     << "  sentence accuracy: " << 100.0 * r.tag_sentence_accuracy << "\n";
  return os.str();
}

inline void write_report(const fs::path& dir, const std::string& stem, const EvalReport& r) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / (stem + ".json"), std::ios::binary);
    out << report_json(r).dump() << '\n';
  }
  {
    std::ofstream out(dir / (stem + ".txt"), std::ios::binary);
    out << report_table(r);
  }
  std::ofstream out(dir / (stem + "_queries.jsonl"), std::ios::binary);
  for (const auto& o : r.outcomes) {
    json j = {{"query", o.index},
              {"predicted", o.predicted},
              {"target", o.target},
              {"confidence", o.confidence},
              {"failure", failure_name(o.diagnosis.failure)},
              {"lucky", o.diagnosis.lucky},
              {"tags", o.predicted_tags}};
    if (!o.error.empty()) j["error"] = o.error;
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Stage { Tagger, Modules, All };

inline Stage parse_stage(std::string_view s) {
  if (s == "tagger") return Stage::Tagger;
  if (s == "modules") return Stage::Modules;
  if (s == "all") return Stage::All;
  throw Error("unknown stage '" + std::string(s) + "' (expected tagger, modules or all)");
}

struct TrainOptions {
  /// Epochs to run in this call per network (0: until done).
  int epoch_budget = 0;
  bool resume = true;
  bool quiet = false;
};

inline void log_line(const TrainOptions& o, const std::string& s) {
  if (!o.quiet) std::fprintf(stderr, "%s\n", s.c_str());
}

inline std::string curve_message(const char* what, const TrainProgress& p) {
  const auto& r = p.curve.back();
  std::ostringstream os;
  os << what << " epoch " << r.epoch << " loss " << std::setprecision(5) << r.loss << " dev " << r.dev_metric;
  return os.str();
}

inline void train_tagger_stage(const Config& cfg, Dataset& data, const fs::path& out, const TrainOptions& opt) {
  const auto ckpath = tagger_path(out);
  TrainProgress progress;
  Tagger tagger;
  if (opt.resume && fs::exists(ckpath)) {
    tagger = tagger_from_checkpoint(load_checkpoint(ckpath.string()), &progress);
  } else {
    Rng rng(derive_seed({cfg.seed, kTaggerInitTag}));
    tagger = Tagger(make_embeddings(cfg, corpus_vocabulary(data.catalogue, data.train())), cfg.tagger_hidden, rng);
  }
  const auto train = build_module_datasets(data.train()).tagger;
  const auto dev = build_module_datasets(data.dev()).tagger;
  TrainSchedule sched = cfg.schedule(cfg.tagger, kTaggerInitTag);
  sched.epoch_budget = opt.epoch_budget;
  sched.on_epoch = [&](const TrainProgress& p) {
    log_line(opt, curve_message("tagger", p));
    save_checkpoint(ckpath.string(), tagger_checkpoint(tagger, p, cfg.seed));
  };
  train_tagger(tagger, train, dev, sched, progress);
  save_checkpoint(ckpath.string(), tagger_checkpoint(tagger, progress, cfg.seed));
  write_curve_csv((out / "tagger_curve.csv").string(), progress.curve, cfg.seed);
}

inline void train_modules_stage(const Config& cfg, Dataset& data, const fs::path& out, const TrainOptions& opt) {
  if (!fs::exists(tagger_path(out))) throw Error("modules stage needs " + tagger_path(out).string() + " (run the tagger stage first)");
  const Tagger tagger = tagger_from_checkpoint(load_checkpoint(tagger_path(out).string()));
  const auto ckpath = modules_path(out);
  ModuleProgress progress;
  GroundingModules mods;
  if (opt.resume && fs::exists(ckpath)) {
    mods = modules_from_checkpoint(load_checkpoint(ckpath.string()), &progress);
  } else {
    Rng rng(derive_seed({cfg.seed, kModuleInitTag}));
    mods = GroundingModules(cfg.entity_dim, tagger.table(), rng);
  }
  mods.set_epsilon_floor(cfg.epsilon_floor);
  const auto provider = make_provider(cfg, data.catalogue);
  const SceneFeatures train_f = represent_corpus(data.train(), data.catalogue, *provider);
  const SceneFeatures dev_f = represent_corpus(data.dev(), data.catalogue, *provider);
  const auto train = build_module_datasets(data.train());
  const auto dev = build_module_datasets(data.dev());
  auto saver = [&](const char* what) {
    return [&, what](const TrainProgress& p) {
      log_line(opt, curve_message(what, p));
      save_checkpoint(ckpath.string(), modules_checkpoint(mods, progress, cfg));
    };
  };
  {
    TrainSchedule s = cfg.schedule(cfg.entity, 0xE);
    s.epoch_budget = opt.epoch_budget;
    s.on_epoch = saver("entity");
    train_unary(mods.entity, UnaryKind::Entity, train.entity, train_f, dev.entity, dev_f, mods.queries, s,
                progress.entity);
  }
  {
    TrainSchedule s = cfg.schedule(cfg.attribute, 0xA);
    s.epoch_budget = opt.epoch_budget;
    s.on_epoch = saver("attribute");
    train_unary(mods.attribute, UnaryKind::Attribute, train.attribute, train_f, dev.attribute, dev_f, mods.queries, s,
                progress.attribute);
  }
  {
    TrainSchedule s = cfg.schedule(cfg.spatial, 0xB);
    s.epoch_budget = opt.epoch_budget;
    s.on_epoch = saver("spatial");
    train_spatial(mods.spatial, train.spatial, pairs_for(train_f), dev.spatial, pairs_for(dev_f), mods.queries,
                  s, progress.spatial);
  }
  save_checkpoint(ckpath.string(), modules_checkpoint(mods, progress, cfg));
  write_curve_csv((out / "entity_curve.csv").string(), progress.entity.curve, cfg.seed);
  write_curve_csv((out / "attribute_curve.csv").string(), progress.attribute.curve, cfg.seed);
  write_curve_csv((out / "spatial_curve.csv").string(), progress.spatial.curve, cfg.seed);
}

inline bool training_finished(const fs::path& out) {
  if (!fs::exists(tagger_path(out)) || !fs::exists(modules_path(out))) return false;
  const auto t = checkpoint_header(load_checkpoint(tagger_path(out).string()));
  const auto m = checkpoint_header(load_checkpoint(modules_path(out).string()));
  const auto& p = m.at("progress");
  return t.at("progress").at("finished").get<bool>() && p.at("E").at("finished").get<bool>() &&
         p.at("A").at("finished").get<bool>() && p.at("B").at("finished").get<bool>();
}

/// Trains the requested stage(s) from <data>, writing checkpoints and
/// curves to <out>. When both stages have finished, writes the dev report.
inline void cmd_train(const Config& cfg, const fs::path& data_dir, const fs::path& out, Stage stage,
                      const TrainOptions& opt = {}) {
  Dataset data = load_dataset(data_dir);
  fs::create_directories(out);
  fs::copy_file(data_dir / "catalogue.json", out / "catalogue.json", fs::copy_options::overwrite_existing);
  if (stage == Stage::Tagger || stage == Stage::All) train_tagger_stage(cfg, data, out, opt);
  if (stage == Stage::Modules || stage == Stage::All) train_modules_stage(cfg, data, out, opt);
  if (training_finished(out)) {
    const Models m = load_models(out);
    const auto provider = model_provider(m, cfg, data.catalogue);
    write_report(out, "dev_report", evaluate_corpus(m, data.dev(), data.catalogue, *provider));
  }
}

inline EvalReport cmd_eval(const Config& cfg, const fs::path& data_dir, const fs::path& model_dir,
                           std::string_view partition, const fs::path& out) {
  const Catalogue cat = load_catalogue((data_dir / "catalogue.json").string());
  const Corpus c = read_corpus(data_dir / std::string(partition));
  const Models m = load_models(model_dir);
  const auto provider = model_provider(m, cfg, cat);
  EvalReport r = evaluate_corpus(m, c, cat, *provider);
  write_report(out, std::string(partition) + "_report", r);
  return r;
}

// ---------------------------------------------------------------------------
// Single-query grounding
// ---------------------------------------------------------------------------

struct GroundOutput {
  std::vector<std::string> tokens;
  TagOutput tags;
  ParsedQuery parsed;
  GroundingResult result;
};

/// Tags, recovers and grounds one free-form query. OOV words raise
/// OovError; malformed tag structures raise StructureError.
inline GroundOutput ground_text(const Models& m, const std::vector<ObjectRepresentation>& reps, std::string_view text) {
  GroundOutput g;
  g.tokens = tokenize(text);
  if (g.tokens.empty()) throw Error("empty query");
  m.tagger.table().ids(g.tokens);
  g.tags = m.tagger.tag(g.tokens);
  g.parsed = recover_structure(g.tokens, g.tags.tags, m.modules.queries);
  g.result = compose_and_ground(m.modules, reps, g.parsed);
  return g;
}

/// Human-readable module assembly, e.g. "E(bowl) * A(blue) -> [REL right from] -> E(mug) * L(right)".
inline std::string assembly_string(const ParsedQuery& q) {
  auto group = [](const Program& p, std::size_t k) {
    const auto& g = p.groups[k];
    std::string s = "E(" + join_words(g.entity_query()) + ")";
    if (g.has_attribute()) s += " * A(" + join_words(g.attribute) + ")";
    if (g.has_location()) s += " * L(" + join_words(g.location) + ")";
    return s;
  };
  std::string out = group(q.program, 0);
  for (std::size_t k = 0; k < q.program.relations.size(); ++k)
    out += " -> B(" + join_words(q.program.relations[k]) + ") -> " + group(q.program, k + 1);
  return out;
}

inline json ground_json(const GroundOutput& g) {
  json j = grounding_to_json(g.result);
  j["tokens"] = g.tokens;
  j["tags"] = tag_strings(g.tags.tags);
  j["assembly"] = assembly_string(g.parsed);
  return j;
}

inline Raster annotate(const SceneGraph& s, const Catalogue& cat, int predicted) {
  Raster img = render_pixels(s, cat);
  if (predicted >= 0) draw_outline(img, s.objects[static_cast<std::size_t>(predicted)].bbox, Rgb{255, 0, 0});
  return img;
}

inline std::string describe_scene(const SceneGraph& s, const Catalogue& cat) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  for (const auto& o : s.objects) {
    const auto& inst = cat.instances[o.instance];
    os << "[" << o.index << "] " << cat.color_of(o.instance).name << " " << cat.categories[inst.category];
    if (!inst.alias.empty()) os << " (" << inst.alias << ")";
    os << "  x=" << o.world_x << " y=" << o.world_y << " bbox=" << o.bbox.x << "," << o.bbox.y << "," << o.bbox.w
       << "x" << o.bbox.h << "\n";
  }
  return os.str();
}

}  // namespace groundkit
