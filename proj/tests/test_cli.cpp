// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0

#include "pros/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <sys/wait.h>
#include <sstream>

#include "test_util.hpp"

using namespace pros;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run pros_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "pros");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Small enough that a full pipeline runs in seconds.
std::string write_config(const pros::testing::TempDir& dir, nlohmann::json extra = nlohmann::json::object(),
                         const std::string& name = "config.json") {
  nlohmann::json j = {{"synthetic", {{"per_pair", 6}}},
                      {"train", {{"epochs", 1}, {"steps_per_epoch", 2}, {"batch_size", 8}, {"eval_k", 10}}},
                      {"eval", {{"ks", {5, 10}}, {"search_k", 3}}}};
  j.merge_patch(extra);
  const std::string path = dir.file(name);
  std::ofstream(path) << j.dump(2);
  return path;
}

}  // namespace

TEST_CASE("config parsing rejects unknown keys and bad values") {
  CHECK_THROWS_AS(cli::parse_config(nlohmann::json{{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(cli::parse_config(nlohmann::json{{"eval", {{"ks", {0}}}}}), ConfigError);
  CHECK_THROWS_AS(cli::parse_config(nlohmann::json{{"synthetic", {{"patch_dim", 8}}}}), ConfigError);
  const cli::RunConfig c = cli::parse_config(nlohmann::json{{"paths", {{"manifest", "m.tsv"}}}}, "/data");
  CHECK(c.paths.manifest == "/data/m.tsv");
  const cli::RunConfig clip = cli::parse_config(nlohmann::json{{"backbone", {{"preset", "clip_vit_b32"}}}});
  CHECK(clip.backbone.embed_dim == 768);
}

TEST_CASE("a single-domain dataset fails as a precondition naming the constraint") {
  pros::testing::TempDir dir("cli");
  const Run r = pros_cli({"gen-data", "--config", write_config(dir, {{"synthetic", {{"num_domains", 1}}}})});
  CHECK(r.code == 3);
  CHECK(r.err.find("K >= 2") != std::string::npos);
}

TEST_CASE("unknown subcommands and missing flags exit 2") {
  CHECK(pros_cli({"fly"}).code == 2);
  CHECK(pros_cli({"train", "--stage", "pul"}).code == 2);
  pros::testing::TempDir dir("cli");
  CHECK(pros_cli({"train", "--config", write_config(dir), "--stage", "warp"}).code == 2);
  CHECK(pros_cli({"gen-data", "--config", dir.file("absent.json")}).code == 2);
}

TEST_CASE("stage two without a checkpoint exits 3") {
  pros::testing::TempDir dir("cli");
  const std::string cfg = write_config(dir);
  REQUIRE(pros_cli({"gen-data", "--config", cfg}).code == 0);
  const Run r = pros_cli({"train", "--config", cfg, "--stage", "csl"});
  CHECK(r.code == 3);
  CHECK(r.err.find("--from-checkpoint") != std::string::npos);
  CHECK(pros_cli({"train", "--config", cfg, "--stage", "csl", "--from-checkpoint", dir.file("nope.ckpt")}).code == 3);
}

TEST_CASE("gen-data is byte-identical for a fixed seed") {
  pros::testing::TempDir a("cli");
  pros::testing::TempDir b("cli");
  REQUIRE(pros_cli({"gen-data", "--config", write_config(a), "--seed", "3"}).code == 0);
  REQUIRE(pros_cli({"gen-data", "--config", write_config(b), "--seed", "3"}).code == 0);
  for (const char* f : {"manifest.tsv", "samples.bin", "split.json"}) CHECK(slurp(a.file(f)) == slurp(b.file(f)));
  pros::testing::TempDir c("cli");
  REQUIRE(pros_cli({"gen-data", "--config", write_config(c), "--seed", "4"}).code == 0);
  CHECK(slurp(a.file("samples.bin")) != slurp(c.file("samples.bin")));
}

TEST_CASE("end to end: train both stages, index, search, evaluate, diagnose") {
  pros::testing::TempDir dir("cli");
  const std::string cfg = write_config(dir);
  REQUIRE(pros_cli({"gen-data", "--config", cfg}).code == 0);
  const Run pul = pros_cli({"train", "--config", cfg, "--stage", "pul", "--out", dir.file("pul.ckpt")});
  INFO(pul.err);
  REQUIRE(pul.code == 0);
  const Run csl = pros_cli({"train", "--config", cfg, "--stage", "csl", "--from-checkpoint", dir.file("pul.ckpt"),
                            "--ablate", "no_mask"});
  INFO(csl.err);
  REQUIRE(csl.code == 0);
  const Checkpoint ck = load_checkpoint(dir.file("model.ckpt"));
  CHECK(ck.ablations.no_mask);
  CHECK(ck.stages.count("pul") == 1);
  CHECK(ck.stages.count("csl") == 1);
  const std::string log = slurp(dir.file("train.log"));
  CHECK(log.find(",pul,") != std::string::npos);
  CHECK(log.find(",csl,") != std::string::npos);

  const Run idx = pros_cli({"index", "--config", cfg});
  REQUIRE(idx.code == 0);
  CHECK(idx.out.find("feature mode: full") != std::string::npos);
  CHECK(pros_cli({"index", "--config", cfg, "--ablate", "no_caps"}).out.find("units_only") != std::string::npos);

  const auto manifest = read_manifest_file(dir.file("manifest.tsv"));
  const auto split = read_split_file(dir.file("split.json"), manifest);
  const Run search = pros_cli({"search", "--config", cfg, "--query", split.test_queries.front(), "--k", "100000"});
  REQUIRE(search.code == 0);
  CHECK(search.err.find("clipped") != std::string::npos);
  const auto lines = std::count(search.out.begin(), search.out.end(), '\n');
  CHECK(static_cast<std::size_t>(lines) == 1 + split.galleries.at(GalleryMode::kUnseen).size());

  const Run eval = pros_cli({"evaluate", "--config", cfg});
  REQUIRE(eval.code == 0);
  const auto report = nlohmann::json::parse(slurp(dir.file("report.json")));
  CHECK(report["galleries"].contains("unseen"));
  CHECK(report["galleries"].contains("mixed"));
  CHECK(report["galleries"]["unseen"].contains("map@10"));
  CHECK(report.contains("sigma"));
  CHECK(eval.out == slurp(dir.file("report.json")));

  // one unseen class: sigma is undefined
  CHECK(report["sigma"]["sigma"].is_null());
  CHECK(pros_cli({"diagnose", "--config", cfg}).code == 3);
}

TEST_CASE("diagnose reports sigma over the unseen classes") {
  pros::testing::TempDir dir("cli");
  const std::string cfg = write_config(dir, {{"synthetic", {{"num_classes", 14}}}});
  REQUIRE(pros_cli({"gen-data", "--config", cfg}).code == 0);
  REQUIRE(pros_cli({"index", "--config", cfg, "--baseline"}).code == 0);
  const Run diag = pros_cli({"diagnose", "--config", cfg});
  REQUIRE(diag.code == 0);
  const auto j = nlohmann::json::parse(diag.out);
  CHECK(j["sigma"].get<double>() > 0.0);
  CHECK(j["items"].get<int>() > 0);
}

TEST_CASE("baseline index and embedding width checks") {
  pros::testing::TempDir dir("cli");
  const std::string cfg = write_config(dir);
  REQUIRE(pros_cli({"gen-data", "--config", cfg}).code == 0);
  REQUIRE(pros_cli({"index", "--config", cfg, "--baseline"}).code == 0);
  CHECK(pros_cli({"evaluate", "--config", cfg}).code == 0);
  const std::string narrow = write_config(dir, {{"backbone", {{"proj_dim", 16}}}}, "narrow.json");
  const Run r = pros_cli({"evaluate", "--config", narrow});
  CHECK(r.code == 3);
  CHECK(r.err.find("32") != std::string::npos);
  CHECK(r.err.find("16") != std::string::npos);
  CHECK(pros_cli({"index", "--config", cfg}).code == 3);
}

TEST_CASE("the installed binary maps errors to exit codes") {
  pros::testing::TempDir dir("cli");
  std::ofstream(dir.file("broken.json")) << "{ not json";
  auto exit_code = [](const std::string& args) {
    const std::string cmd = std::string(PROS_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  CHECK(exit_code("gen-data --config " + dir.file("broken.json")) == 2);
  const std::string cfg = write_config(dir, {{"synthetic", {{"num_classes", 2}}}}, "two.json");
  CHECK(exit_code("gen-data --config " + cfg) == 3);
  CHECK(exit_code("gen-data --config " + write_config(dir)) == 0);
}
