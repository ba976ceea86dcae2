// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. `run` is the whole program; tools/pros.cpp only
// forwards argv so the commands can be exercised in-process by the tests.
//
//   pros gen-data  --config run.json
//   pros train     --config run.json --stage pul
//   pros train     --config run.json --stage csl --from-checkpoint pul.ckpt
//   pros index     --config run.json [--baseline]
//   pros search    --config run.json --query s000123 [--k 10]
//   pros evaluate  --config run.json
//   pros diagnose  --config run.json

#pragma once

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pros/backbone.hpp"
#include "pros/caps.hpp"
#include "pros/errors.hpp"
#include "pros/model.hpp"
#include "pros/protocol.hpp"
#include "pros/retrieval.hpp"
#include "pros/training.hpp"

namespace pros::cli {

struct Paths {
  std::string manifest = "manifest.tsv";
  std::string samples = "samples.bin";
  std::string split = "split.json";
  std::string checkpoint = "model.ckpt";
  std::string embeddings = "embeddings.bin";
  std::string report = "report.json";
  std::string log = "train.log";
  std::string backbone_weights;  // empty: synthetic backbone
};

struct ProtocolArgs {
  Protocol protocol = Protocol::kUCDR;
  std::string query_domain = "infograph";
  GalleryMode gallery_mode = GalleryMode::kUnseen;
  std::optional<double> query_fraction;
  std::uint64_t seed = 0;
};

struct RunConfig {
  Paths paths;
  BackboneConfig backbone;
  CaPSConfig caps;
  TrainConfig train;
  ProtocolArgs protocol;
  SyntheticConfig synthetic;
  Ablations ablations;
  std::vector<std::size_t> eval_ks = {10, 100, 200};
  std::size_t search_k = 10;

  void set_seed(std::uint64_t seed) {
    backbone.seed = seed;
    caps.seed = seed;
    train.seed = seed;
    protocol.seed = seed;
    synthetic.seed = seed;
  }
};

namespace detail {

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return p;
  const std::filesystem::path path(p);
  return path.is_absolute() ? p : (base / path).string();
}

inline void check_keys(const nlohmann::json& j, const std::string& section, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in config section '" + section + "'");
  }
}

}  // namespace detail

/// Reads a JSON run configuration. Relative paths resolve against the
/// directory holding the file.
inline RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base = ".") {
  RunConfig c;
  try {
    detail::check_keys(j, "<root>", {"paths", "backbone", "caps", "train", "protocol", "synthetic", "ablate", "eval"});
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      detail::check_keys(p, "paths",
                         {"manifest", "samples", "split", "checkpoint", "embeddings", "report", "log", "backbone_weights"});
      c.paths.manifest = p.value("manifest", c.paths.manifest);
      c.paths.samples = p.value("samples", c.paths.samples);
      c.paths.split = p.value("split", c.paths.split);
      c.paths.checkpoint = p.value("checkpoint", c.paths.checkpoint);
      c.paths.embeddings = p.value("embeddings", c.paths.embeddings);
      c.paths.report = p.value("report", c.paths.report);
      c.paths.log = p.value("log", c.paths.log);
      c.paths.backbone_weights = p.value("backbone_weights", c.paths.backbone_weights);
    }
    if (j.contains("backbone")) {
      if (j.at("backbone").value("preset", std::string()) == "clip_vit_b32") c.backbone = BackboneConfig::clip_vit_b32();
      nlohmann::json b = j.at("backbone");
      b.erase("preset");
      c.backbone = [&] { BackboneConfig out = c.backbone; from_json(b, out); return out; }();
    }
    if (j.contains("caps")) from_json(j.at("caps"), c.caps);
    if (j.contains("train")) from_json(j.at("train"), c.train);
    if (j.contains("protocol")) {
      const auto& p = j.at("protocol");
      detail::check_keys(p, "protocol", {"protocol", "query_domain", "gallery_mode", "query_fraction", "seed"});
      if (p.contains("protocol")) c.protocol.protocol = parse_protocol(p.at("protocol").get<std::string>());
      c.protocol.query_domain = p.value("query_domain", c.protocol.query_domain);
      if (p.contains("gallery_mode")) c.protocol.gallery_mode = parse_gallery_mode(p.at("gallery_mode").get<std::string>());
      if (p.contains("query_fraction") && !p.at("query_fraction").is_null())
        c.protocol.query_fraction = p.at("query_fraction").get<double>();
      c.protocol.seed = p.value("seed", c.protocol.seed);
    }
    c.synthetic.num_patches = c.backbone.num_patches;
    c.synthetic.patch_dim = c.backbone.patch_dim;
    if (j.contains("synthetic")) {
      from_json(j.at("synthetic"), c.synthetic);
      if (c.synthetic.num_patches != c.backbone.num_patches || c.synthetic.patch_dim != c.backbone.patch_dim) {
        throw ConfigError("synthetic patch grid must match backbone.num_patches and backbone.patch_dim");
      }
    }
    if (j.contains("ablate")) {
      const auto& a = j.at("ablate");
      if (a.is_string()) {
        c.ablations = Ablations::parse(a.get<std::string>());
      } else {
        for (const auto& name : a.get<std::vector<std::string>>()) c.ablations.set(name);
        if (c.ablations.no_sp && c.ablations.no_dp) throw ConfigError("no_sp and no_dp together leave no prompt units");
      }
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      detail::check_keys(e, "eval", {"ks", "search_k"});
      c.eval_ks = e.value("ks", c.eval_ks);
      c.search_k = e.value("search_k", c.search_k);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  for (std::size_t k : c.eval_ks)
    if (k == 0) throw ConfigError("eval.ks entries must be at least 1");
  if (c.search_k == 0) throw ConfigError("eval.search_k must be at least 1");
  c.backbone.validate();
  c.caps.validate();
  c.train.validate();
  c.synthetic.validate();
  for (std::string* p : {&c.paths.manifest, &c.paths.samples, &c.paths.split, &c.paths.checkpoint, &c.paths.embeddings,
                         &c.paths.report, &c.paths.log, &c.paths.backbone_weights}) {
    *p = detail::resolve(base, *p);
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j, std::filesystem::path(path).parent_path());
}

struct Io {
  std::ostream& out;
  std::ostream& err;
};

// ---------------------------------------------------------------------------
// Commands

inline std::shared_ptr<const Backbone> make_backbone(const RunConfig& c) {
  return c.paths.backbone_weights.empty() ? Backbone::synthetic(c.backbone)
                                          : load_backbone_weights(c.paths.backbone_weights, c.backbone);
}

inline void cmd_gen_data(const RunConfig& c, Io io) {
  const SyntheticDataset ds = generate_synthetic_dataset(c.synthetic);
  write_manifest_file(c.paths.manifest, ds.manifest);
  write_samples(c.paths.samples, ds);
  SplitRequest req;
  req.protocol = c.protocol.protocol;
  req.query_domain = c.protocol.query_domain;
  req.gallery_mode = c.protocol.gallery_mode;
  req.query_fraction = c.protocol.query_fraction;
  req.seed = c.protocol.seed;
  req.classes = partition_classes(ds.manifest.classes(), c.protocol.seed);
  const ProtocolSplit split = build_split(ds.manifest, req);
  write_split_file(c.paths.split, split);
  io.out << "wrote " << ds.manifest.size() << " items (" << ds.manifest.domains().size() << " domains, "
         << ds.manifest.classes().size() << " classes) to " << c.paths.manifest << "\n";
  io.out << "split: " << split.train.size() << " train, " << split.validation_queries.size() << " validation queries, "
         << split.test_queries.size() << " test queries\n";
}

struct LoadedData {
  DatasetManifest manifest;
  std::vector<Mat> images;
  ProtocolSplit split;
};

inline LoadedData load_data(const RunConfig& c) {
  LoadedData d;
  d.manifest = read_manifest_file(c.paths.manifest);
  d.images = read_samples(c.paths.samples, d.manifest);
  d.split = read_split_file(c.paths.split, d.manifest);
  return d;
}

inline void cmd_train(const RunConfig& c, Stage stage, const std::optional<std::string>& from_checkpoint,
                      const std::string& out_path, Io io) {
  std::optional<Checkpoint> previous;
  if (stage == Stage::kCSL) {
    if (!from_checkpoint) throw PreconditionError("train --stage csl needs --from-checkpoint <stage-one checkpoint>");
    if (!std::filesystem::exists(*from_checkpoint)) {
      throw PreconditionError("checkpoint '" + *from_checkpoint + "' does not exist");
    }
    previous = load_checkpoint(*from_checkpoint);
    if (previous->stages.find("pul") == previous->stages.end()) {
      throw PreconditionError("checkpoint '" + *from_checkpoint + "' has no completed prompt-unit stage");
    }
    if (!(previous->backbone == c.backbone)) {
      throw PreconditionError("checkpoint backbone configuration differs from the run configuration");
    }
  }
  const LoadedData data = load_data(c);
  const auto backbone = make_backbone(c);
  TrainConfig tc = c.train;
  tc.stage = stage;
  std::ofstream log(c.paths.log, std::ios::app);
  if (!log) throw ConfigError("cannot open training log '" + c.paths.log + "'");
  log << "# epoch,step,stage,loss,lr\n";
  const StageData stage_data = make_stage_data(*backbone, data.manifest, data.images, data.split);
  Trainer trainer = stage == Stage::kPUL
                        ? Trainer::for_pul(backbone, data.split.train_domains, data.split.classes.train, tc, c.caps,
                                           c.ablations)
                        : Trainer::for_csl(*previous, tc, c.caps, c.ablations, backbone);
  Checkpoint best = train_stage(trainer, stage_data, [&](const std::string& line) { log << line << '\n'; });
  best.backbone_weights = c.paths.backbone_weights;
  save_checkpoint(out_path, best);
  const StageRecord& rec = best.stages.at(to_string(stage));
  io.out << "stage " << to_string(stage) << ": " << rec.epochs_run << " epochs, best epoch " << rec.best_epoch
         << ", validation map@" << tc.eval_k << " " << rec.best_validation_map << "\n";
  io.out << "checkpoint written to " << out_path << "\n";
}

/// Every item that any evaluation of the split touches.
inline std::vector<std::string> evaluation_ids(const ProtocolSplit& split) {
  std::set<std::string> ids(split.test_queries.begin(), split.test_queries.end());
  for (const auto& [_, g] : split.galleries) ids.insert(g.begin(), g.end());
  return {ids.begin(), ids.end()};
}

inline void cmd_index(const RunConfig& c, const std::optional<std::string>& checkpoint_path, bool baseline, Io io) {
  const LoadedData data = load_data(c);
  const std::vector<std::string> ids = evaluation_ids(data.split);
  EmbeddingGallery g;
  if (baseline) {
    ProsModel model;
    model.backbone = make_backbone(c);
    g = extract_features(model, data.manifest, data.images, ids, FeatureMode::kBackboneOnly);
  } else {
    const std::string path = checkpoint_path.value_or(c.paths.checkpoint);
    if (!std::filesystem::exists(path)) throw PreconditionError("checkpoint '" + path + "' does not exist");
    const Checkpoint ck = load_checkpoint(path);
    if (!(ck.backbone == c.backbone)) throw PreconditionError("checkpoint backbone configuration differs from the run configuration");
    ProsModel model = ck.model(make_backbone(c));
    if (c.ablations.no_caps) model.ablations.no_caps = true;
    g = extract_features(model, data.manifest, data.images, ids, model.retrieval_mode());
    io.out << "feature mode: " << to_string(model.retrieval_mode()) << "\n";
  }
  write_embeddings(c.paths.embeddings, g);
  io.out << "indexed " << g.size() << " items (dim " << g.dim() << ") to " << c.paths.embeddings << "\n";
}

inline EmbeddingGallery load_checked_embeddings(const RunConfig& c, const std::optional<std::string>& checkpoint_path) {
  EmbeddingGallery g = read_embeddings(c.paths.embeddings);
  if (checkpoint_path) {
    const Checkpoint ck = load_checkpoint(*checkpoint_path);
    if (ck.backbone.proj_dim != g.dim()) {
      throw PreconditionError("embedding width " + std::to_string(g.dim()) + " does not match checkpoint width " +
                              std::to_string(ck.backbone.proj_dim));
    }
  } else if (g.dim() != c.backbone.proj_dim) {
    throw PreconditionError("embedding width " + std::to_string(g.dim()) + " does not match backbone.proj_dim " +
                            std::to_string(c.backbone.proj_dim));
  }
  g.validate();
  return g;
}

inline void cmd_search(const RunConfig& c, const std::vector<std::string>& query_ids, std::size_t k,
                       const std::optional<std::string>& checkpoint_path, Io io) {
  require(!query_ids.empty(), "search needs at least one --query id");
  const DatasetManifest manifest = read_manifest_file(c.paths.manifest);
  const ProtocolSplit split = read_split_file(c.paths.split, manifest);
  const EmbeddingGallery all = load_checked_embeddings(c, checkpoint_path);
  if (!split.galleries.count(c.protocol.gallery_mode)) {
    throw PreconditionError("split has no " + to_string(c.protocol.gallery_mode) + " gallery");
  }
  const EmbeddingGallery gallery = all.subset(split.galleries.at(c.protocol.gallery_mode));
  const EmbeddingGallery queries = all.subset(query_ids);
  if (k > gallery.size()) {
    io.err << "warning: k=" << k << " exceeds the gallery size; clipped to " << gallery.size() << "\n";
    k = gallery.size();
  }
  io.out << "query\trank\tid\tclass\tscore\n";
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const RankedResult r = rank(queries.ids[q], queries.vectors.row(static_cast<Eigen::Index>(q)), gallery);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t gi = r.order[i];
      io.out << queries.ids[q] << '\t' << i + 1 << '\t' << gallery.ids[gi] << '\t' << gallery.classes[gi] << '\t'
             << std::setprecision(6) << std::fixed << r.scores[i] << std::defaultfloat << '\n';
    }
  }
}

/// Sigma over the unseen-class test queries plus the unseen gallery.
inline nlohmann::json sigma_report(const EmbeddingGallery& all, const ProtocolSplit& split) {
  std::vector<std::string> ids = split.test_queries;
  if (split.galleries.count(GalleryMode::kUnseen)) {
    const auto& g = split.galleries.at(GalleryMode::kUnseen);
    ids.insert(ids.end(), g.begin(), g.end());
  } else {
    ids.insert(ids.end(), split.gallery().begin(), split.gallery().end());
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  const EmbeddingGallery set = all.subset(ids);
  const SigmaReport s = sigma_diagnostic(set.vectors, set.classes);
  return {{"sigma", s.infinite ? nlohmann::json("inf") : nlohmann::json(s.sigma)},
          {"max_intra", s.max_intra},
          {"min_inter", s.min_inter},
          {"infinite", s.infinite},
          {"excluded_classes", s.excluded_classes},
          {"items", set.size()}};
}

inline nlohmann::json evaluation_report(const EmbeddingGallery& all, const ProtocolSplit& split,
                                        const std::vector<std::size_t>& ks) {
  const EmbeddingGallery queries = all.subset(split.test_queries);
  nlohmann::json galleries = nlohmann::json::object();
  for (const auto& [mode, ids] : split.galleries) galleries[to_string(mode)] = retrieval_metrics(queries, all.subset(ids), ks);
  nlohmann::json sigma;
  try {
    sigma = sigma_report(all, split);
  } catch (const PreconditionError& e) {
    sigma = {{"sigma", nullptr}, {"unavailable", e.what()}};
  }
  return {{"protocol", to_string(split.protocol)},
          {"query_domain", split.query_domain},
          {"gallery_domain", split.gallery_domain},
          {"query_fraction", split.query_fraction},
          {"galleries", galleries},
          {"sigma", sigma}};
}

inline void write_report(const std::string& path, const nlohmann::json& report, Io io) {
  const std::string text = report.dump(2) + "\n";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open report '" + path + "' for writing");
  out << text;
  io.out << text;
}

inline void cmd_evaluate(const RunConfig& c, const std::optional<std::string>& checkpoint_path, Io io) {
  const DatasetManifest manifest = read_manifest_file(c.paths.manifest);
  const ProtocolSplit split = read_split_file(c.paths.split, manifest);
  const EmbeddingGallery all = load_checked_embeddings(c, checkpoint_path);
  write_report(c.paths.report, evaluation_report(all, split, c.eval_ks), io);
}

inline void cmd_diagnose(const RunConfig& c, const std::optional<std::string>& checkpoint_path, Io io) {
  const DatasetManifest manifest = read_manifest_file(c.paths.manifest);
  const ProtocolSplit split = read_split_file(c.paths.split, manifest);
  const EmbeddingGallery all = load_checked_embeddings(c, checkpoint_path);
  io.out << sigma_report(all, split).dump(2) << "\n";
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Prompt tuning for universal cross-domain retrieval", "pros"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string ablate;
  std::optional<std::string> from_checkpoint;
  auto shared = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration")->required();
    sub->add_option("--seed", seed, "override every seed in the configuration");
    sub->add_option("--ablate", ablate, "comma-separated ablations: no_sp,no_dp,no_mask,no_caps,no_cls_train");
    sub->add_option("--from-checkpoint", from_checkpoint, "checkpoint to start from or evaluate");
  };
  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic dataset and its split");
  CLI::App* train = app.add_subcommand("train", "run one training stage");
  CLI::App* index = app.add_subcommand("index", "embed the evaluation items");
  CLI::App* search = app.add_subcommand("search", "rank the gallery for query ids");
  CLI::App* evaluate = app.add_subcommand("evaluate", "retrieval metrics for the split");
  CLI::App* diagnose = app.add_subcommand("diagnose", "feature-space sigma diagnostic");
  for (CLI::App* sub : {gen, train, index, search, evaluate, diagnose}) shared(sub);
  std::string stage;
  std::string out_path;
  train->add_option("--stage", stage, "pul or csl")->required();
  train->add_option("--out", out_path, "checkpoint to write (default paths.checkpoint)");
  bool baseline = false;
  index->add_flag("--baseline", baseline, "index with the frozen backbone only");
  std::vector<std::string> queries;
  std::optional<std::size_t> k;
  search->add_option("--query", queries, "query sample id (repeatable)")->required();
  search->add_option("--k", k, "number of results per query");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }

  Io io{out, err};
  try {
    RunConfig c = load_config(config_path);
    if (seed) c.set_seed(*seed);
    if (!ablate.empty()) {
      const Ablations extra = Ablations::parse(ablate);
      for (const auto& name : extra.names()) c.ablations.set(name);
      if (c.ablations.no_sp && c.ablations.no_dp) throw ConfigError("no_sp and no_dp together leave no prompt units");
    }
    if (*gen) {
      cmd_gen_data(c, io);
    } else if (*train) {
      cmd_train(c, parse_stage(stage), from_checkpoint, out_path.empty() ? c.paths.checkpoint : out_path, io);
    } else if (*index) {
      cmd_index(c, from_checkpoint, baseline, io);
    } else if (*search) {
      cmd_search(c, queries, k.value_or(c.search_k), from_checkpoint, io);
    } else if (*evaluate) {
      cmd_evaluate(c, from_checkpoint, io);
    } else if (*diagnose) {
      cmd_diagnose(c, from_checkpoint, io);
    }
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kConfig);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace pros::cli
