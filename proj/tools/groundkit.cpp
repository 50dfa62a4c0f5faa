// SPDX-License-Identifier: Apache-2.0
//
// groundkit command-line front end: gen, train, eval, ground, repl, validate.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "groundkit/pipeline.hpp"

namespace gk = groundkit;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;

  gk::Config load() const {
    gk::Config cfg = config.empty() ? gk::Config{} : gk::load_config(config);
    if (seed) cfg.seed = *seed;
    return cfg;
  }
  fs::path out_dir(const gk::Config& cfg) const { return out.empty() ? fs::path(cfg.out) : fs::path(out); }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config file (defaults apply to missing keys)");
  app->add_option("--seed", c.seed, "Override the config seed");
  app->add_option("--out", c.out, "Output directory");
}

struct UsageError : gk::Error {
  using gk::Error::Error;
};

gk::SceneGraph scene_from_dataset(const fs::path& file, std::uint64_t id) {
  for (const auto& j : gk::read_lines(file)) {
    auto s = gk::scene_from_json(j);
    if (s.scene_id == id) return s;
  }
  throw gk::Error("scene " + std::to_string(id) + " not found in " + file.string());
}

gk::Catalogue model_catalogue(const fs::path& models, const gk::Config& cfg) {
  const auto path = models / "catalogue.json";
  return fs::exists(path) ? gk::load_catalogue(path.string()) : gk::catalogue_for(cfg);
}

void print_ground(const gk::GroundOutput& g, const gk::SceneGraph& s, const gk::Catalogue& cat) {
  std::cout << "tokens:   " << gk::join_words(g.tokens) << "\n";
  std::cout << "tags:     ";
  const auto tags = gk::tag_strings(g.tags.tags);
  for (std::size_t i = 0; i < tags.size(); ++i) std::cout << (i ? " " : "") << tags[i];
  std::cout << "\nassembly: " << gk::assembly_string(g.parsed) << "\n";
  std::cout << "scores:  ";
  for (Eigen::Index i = 0; i < g.result.scores.size(); ++i) std::printf(" [%ld] %.4f", static_cast<long>(i), g.result.scores[i]);
  std::cout << "\n";
  const auto& o = s.objects[static_cast<std::size_t>(g.result.predicted)];
  std::printf("predicted: %d (%s %s) confidence %.4f\n", g.result.predicted, cat.color_of(o.instance).name.c_str(),
              cat.categories[cat.instances[o.instance].category].c_str(), g.result.confidence);
  if (g.result.low_confidence) std::printf("warning: low confidence (< %.2f)\n", gk::kLowConfidence);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw gk::Error("cannot write " + path.string());
  out << j.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"groundkit: compositional visual grounding on synthetic desk scenes"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, ground_c, repl_c, val_c;

  auto* gen = app.add_subcommand("gen", "Generate an oracle-validated dataset");
  add_common(gen, gen_c);
  bool gen_render = false;
  std::string gen_split;
  gen->add_flag("--render", gen_render, "Also write one PPM per scene");
  gen->add_option("--split", gen_split, "Restrict every query to one split (Cat, Col, Loc, 1-Hop, 2-Hop)");

  auto* train = app.add_subcommand("train", "Train the tagger and/or the matching modules");
  add_common(train, train_c);
  std::string train_data, train_stage = "all";
  int train_epochs = 0;
  bool train_fresh = false;
  train->add_option("--data", train_data, "Dataset directory from gen")->required();
  train->add_option("--stage", train_stage, "tagger, modules or all")->check(CLI::IsMember({"tagger", "modules", "all"}));
  train->add_option("--epochs", train_epochs, "Run at most this many epochs per network, then stop resumably");
  train->add_flag("--fresh", train_fresh, "Ignore existing checkpoints in --out");

  auto* eval = app.add_subcommand("eval", "Evaluate trained models by split");
  add_common(eval, eval_c);
  std::string eval_data, eval_models, eval_split = "test";
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--models", eval_models, "Directory with tagger.ckpt and modules.ckpt")->required();
  eval->add_option("--split", eval_split, "Partition to evaluate")->check(CLI::IsMember({"train", "dev", "test"}));

  auto* ground = app.add_subcommand("ground", "Ground one query in a scene");
  add_common(ground, ground_c);
  std::string ground_models, ground_query, ground_scene_file;
  std::optional<std::uint64_t> ground_scene_seed, ground_scene_id;
  bool ground_render = false;
  ground->add_option("--models", ground_models, "Directory with trained checkpoints")->required();
  ground->add_option("--query", ground_query, "Query text");
  ground->add_option("--scene-seed", ground_scene_seed, "Sample the scene from this seed");
  ground->add_option("--scene", ground_scene_file, "scenes.jsonl to read the scene from");
  ground->add_option("--scene-id", ground_scene_id, "Scene id inside --scene");
  ground->add_flag("--render", ground_render, "Write an annotated PPM with the prediction outlined");

  auto* repl = app.add_subcommand("repl", "Interactive grounding on one sampled scene");
  add_common(repl, repl_c);
  std::string repl_models;
  repl->add_option("--models", repl_models, "Directory with trained checkpoints")->required();

  auto* validate = app.add_subcommand("validate", "Re-run the oracle checks on a dataset");
  add_common(validate, val_c);
  std::string val_data;
  validate->add_option("--data", val_data, "Dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      gk::Config cfg = gen_c.load();
      if (!gen_split.empty()) {
        cfg.split_mix.fill(0.0);
        cfg.split_mix[static_cast<std::size_t>(gk::parse_split(gen_split))] = 1.0;
      }
      const auto out = gen_c.out_dir(cfg);
      const auto stats = gk::cmd_gen(cfg, out, gen_render || cfg.render);
      std::printf("wrote %zu scenes, %zu queries to %s (%zu unbound slots skipped)\n", stats.scenes, stats.queries,
                  out.string().c_str(), stats.unbound);
    } else if (*train) {
      const gk::Config cfg = train_c.load();
      gk::TrainOptions opt;
      opt.epoch_budget = train_epochs;
      opt.resume = !train_fresh;
      const auto out = train_c.out_dir(cfg);
      if (train_fresh) {
        fs::remove(gk::tagger_path(out));
        fs::remove(gk::modules_path(out));
      }
      gk::cmd_train(cfg, train_data, out, gk::parse_stage(train_stage), opt);
      if (fs::exists(out / "dev_report.txt")) {
        std::ifstream in(out / "dev_report.txt");
        std::cout << in.rdbuf();
      } else {
        std::printf("training paused; rerun the same command to resume\n");
      }
    } else if (*eval) {
      const gk::Config cfg = eval_c.load();
      const auto out = eval_c.out.empty() ? fs::path(eval_models) : fs::path(eval_c.out);
      const auto report = gk::cmd_eval(cfg, eval_data, eval_models, eval_split, out);
      std::cout << gk::report_table(report);
    } else if (*ground) {
      if (ground_query.empty() || gk::tokenize(ground_query).empty()) throw UsageError("ground: --query must be a non-empty query");
      const gk::Config cfg = ground_c.load();
      const auto cat = model_catalogue(ground_models, cfg);
      gk::SceneGraph scene;
      if (!ground_scene_file.empty()) {
        if (!ground_scene_id) throw UsageError("ground: --scene needs --scene-id");
        scene = scene_from_dataset(ground_scene_file, *ground_scene_id);
      } else {
        scene = gk::sample_scene(ground_scene_seed.value_or(cfg.seed), cat, cfg.scene, 0);
      }
      const gk::Models m = gk::load_models(ground_models);
      const auto provider = gk::model_provider(m, cfg, cat);
      const auto reps = gk::represent_scene(scene, cat, *provider);
      const auto g = gk::ground_text(m, reps, ground_query);
      std::cout << gk::describe_scene(scene, cat);
      print_ground(g, scene, cat);
      const auto out = ground_c.out_dir(cfg);
      fs::create_directories(out);
      write_json(out / "trace.json", gk::ground_json(g));
      if (ground_render)
        gk::write_ppm((out / "grounded.ppm").string(), gk::annotate(scene, cat, g.result.predicted),
                      "query=" + gk::join_words(g.tokens) + " predicted=" + std::to_string(g.result.predicted));
    } else if (*repl) {
      const gk::Config cfg = repl_c.load();
      const auto cat = model_catalogue(repl_models, cfg);
      const auto scene = gk::sample_scene(cfg.seed, cat, cfg.scene, 0);
      const gk::Models m = gk::load_models(repl_models);
      const auto provider = gk::model_provider(m, cfg, cat);
      const auto reps = gk::represent_scene(scene, cat, *provider);
      const auto out = repl_c.out_dir(cfg);
      fs::create_directories(out);
      std::cout << "scene seed " << cfg.seed << ", " << scene.size() << " objects:\n" << gk::describe_scene(scene, cat);
      std::cout << "enter a query, optionally followed by '=> <gold index>' and '| <gold tags>'; '#' lines are skipped, an empty line quits\n";
      std::string line;
      int k = 0;
      while (std::cout << "> " << std::flush, std::getline(std::cin, line)) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) break;
        if (line[first] == '#') continue;
        std::string text = line, gold_tags_text;
        std::optional<int> gold;
        if (auto bar = text.find('|'); bar != std::string::npos) {
          gold_tags_text = text.substr(bar + 1);
          text = text.substr(0, bar);
        }
        if (auto arrow = text.find("=>"); arrow != std::string::npos) {
          gold = std::stoi(text.substr(arrow + 2));
          text = text.substr(0, arrow);
        }
        try {
          const auto g = gk::ground_text(m, reps, text);
          print_ground(g, scene, cat);
          auto j = gk::ground_json(g);
          if (gold) {
            const auto gold_tags = gold_tags_text.empty() ? g.tags.tags : gk::parse_tags(gk::split_words(gold_tags_text));
            const auto d = gk::diagnose(g.tags.tags, g.result.predicted, gold_tags, *gold);
            std::printf("gold %d: %s%s\n", *gold, std::string(gk::failure_name(d.failure)).c_str(),
                        d.lucky ? " (lucky)" : "");
            j["gold"] = *gold;
            j["failure"] = gk::failure_name(d.failure);
          }
          write_json(out / ("repl_" + std::to_string(k++) + ".json"), j);
        } catch (const gk::Error& e) {
          std::printf("error: %s\n", e.what());
          write_json(out / ("repl_" + std::to_string(k++) + ".json"), {{"query", text}, {"error", e.what()}});
        }
      }
    } else if (*validate) {
      const auto r = gk::cmd_validate(val_data);
      for (const auto& p : r.problems) std::printf("invalid: %s\n", p.c_str());
      std::printf("%zu scenes, %zu records, %zu problems\n", r.scenes, r.records, r.problems.size());
      return r.problems.empty() ? 0 : 1;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
