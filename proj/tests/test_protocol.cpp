// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0

#include "pros/protocol.hpp"

#include <sstream>

#include "test_util.hpp"

using namespace pros;

namespace {

SyntheticDataset dataset(int domains, int classes, int per_pair = 4, std::uint64_t seed = 0) {
  SyntheticConfig c;
  c.seed = seed;
  c.num_domains = domains;
  c.num_classes = classes;
  c.per_pair = per_pair;
  return generate_synthetic_dataset(c);
}

SplitRequest request(const DatasetManifest& m, Protocol p, const std::string& query_domain, std::uint64_t seed = 0) {
  SplitRequest r;
  r.protocol = p;
  r.query_domain = query_domain;
  r.classes = partition_classes(m.classes(), seed);
  r.seed = seed;
  return r;
}

std::set<std::string> classes_of(const DatasetManifest& m, const std::vector<std::string>& ids) {
  std::set<std::string> out;
  for (const auto& id : ids) out.insert(m.item(id).class_name);
  return out;
}

std::set<std::string> domains_of(const DatasetManifest& m, const std::vector<std::string>& ids) {
  std::set<std::string> out;
  for (const auto& id : ids) out.insert(m.item(id).domain);
  return out;
}

}  // namespace

TEST_CASE("default synthetic dataset has K*C*n items") {
  const SyntheticDataset ds = generate_synthetic_dataset(SyntheticConfig{});
  CHECK(ds.manifest.size() == 4 * 10 * 50);
  CHECK(ds.images.size() == 2000);
  CHECK(ds.images[0].rows() == 16);
  CHECK(ds.images[0].cols() == 32);
  CHECK(ds.manifest.domains().front() == "real");
}

TEST_CASE("synthetic generation is seed-deterministic") {
  const SyntheticDataset a = dataset(4, 6, 5, 3);
  const SyntheticDataset b = dataset(4, 6, 5, 3);
  const SyntheticDataset c = dataset(4, 6, 5, 4);
  CHECK(a.manifest == b.manifest);
  bool same = true;
  for (std::size_t i = 0; i < a.images.size(); ++i) same = same && a.images[i] == b.images[i];
  CHECK(same);
  CHECK(a.images[0] != c.images[0]);
}

TEST_CASE("nearest-prototype oracle recovers classes on the undistorted domain") {
  const SyntheticDataset ds = generate_synthetic_dataset(SyntheticConfig{});
  CHECK(nearest_prototype_accuracy(ds, "real") >= 0.9);
}

TEST_CASE("domain distortions are orthogonal rotations") {
  const SyntheticDataset ds = dataset(4, 4);
  for (const auto& d : ds.distortions) {
    const Mat eye = Mat::Identity(d.rotation.rows(), d.rotation.cols());
    CHECK((d.rotation * d.rotation.transpose() - eye).cwiseAbs().maxCoeff() < 1e-10);
  }
  CHECK(ds.distortions[0].rotation == Mat::Identity(32, 32));
}

TEST_CASE("degenerate generator settings name the violated constraint") {
  SyntheticConfig c;
  c.num_domains = 1;
  try {
    generate_synthetic_dataset(c);
    FAIL("expected a precondition error");
  } catch (const PreconditionError& e) {
    CHECK(std::string(e.what()).find("K >= 2") != std::string::npos);
  }
  c = SyntheticConfig{};
  c.num_classes = 3;
  CHECK_THROWS_AS(generate_synthetic_dataset(c), PreconditionError);
  c = SyntheticConfig{};
  c.per_pair = 1;
  CHECK_THROWS_AS(generate_synthetic_dataset(c), PreconditionError);
}

TEST_CASE("manifest text round trip") {
  const SyntheticDataset ds = dataset(3, 4, 2);
  std::stringstream buf;
  write_manifest(buf, ds.manifest);
  const std::string text = buf.str();
  CHECK(text.rfind("#pros-manifest v1\n", 0) == 0);
  CHECK(text.find("s000000\tsamples:0\treal\tclass_000\n") != std::string::npos);
  std::stringstream in(text);
  CHECK(read_manifest(in) == ds.manifest);
}

TEST_CASE("malformed manifests are rejected") {
  std::stringstream no_header("a\tb\tc\td\n");
  CHECK_THROWS_AS(read_manifest(no_header), ConfigError);
  std::stringstream short_line("#pros-manifest v1\na\tb\tc\n");
  CHECK_THROWS_AS(read_manifest(short_line), ConfigError);
  std::stringstream dup("#pros-manifest v1\na\tx\treal\tc\na\ty\treal\tc\n");
  CHECK_THROWS_AS(read_manifest(dup), ConfigError);
}

TEST_CASE("class partition follows the 71/16/13 ratios") {
  std::vector<std::string> classes;
  for (int i = 0; i < 14; ++i) classes.push_back(synthetic_class_name(i));
  const ClassPartition p = partition_classes(classes, 0);
  CHECK(p.train.size() == 10);
  CHECK(p.validation.size() == 2);
  CHECK(p.test.size() == 2);
  CHECK(partition_classes(classes, 0).train == p.train);
  CHECK(partition_classes(classes, 1).train != p.train);
}

TEST_CASE("holding out one of six domains trains on exactly five") {
  const SyntheticDataset ds = dataset(6, 8);
  const ProtocolSplit s = build_split(ds.manifest, request(ds.manifest, Protocol::kUCDR, "infograph"));
  CHECK(s.train_domains.size() == 5);
  CHECK(domains_of(ds.manifest, s.train).size() == 5);
  CHECK(!domains_of(ds.manifest, s.train).count("infograph"));
  CHECK(s.held_out_domain == std::optional<std::string>("infograph"));
}

TEST_CASE("UCDR test classes never appear in training") {
  const SyntheticDataset ds = dataset(5, 14);
  const ProtocolSplit s = build_split(ds.manifest, request(ds.manifest, Protocol::kUCDR, "infograph"));
  const auto train_c = classes_of(ds.manifest, s.train);
  for (const auto& c : classes_of(ds.manifest, s.test_queries)) CHECK(!train_c.count(c));
  CHECK(split_violations(ds.manifest, s).empty());
}

TEST_CASE("mixed gallery adds every seen-class real item to the unseen gallery") {
  const SyntheticDataset ds = dataset(5, 14, 3);
  const ProtocolSplit s = build_split(ds.manifest, request(ds.manifest, Protocol::kUCDR, "sketch"));
  const auto& unseen = s.galleries.at(GalleryMode::kUnseen);
  const auto& mixed = s.galleries.at(GalleryMode::kMixed);
  std::size_t seen_real = 0;
  for (const auto& it : ds.manifest.items())
    if (it.domain == "real" && std::count(s.classes.train.begin(), s.classes.train.end(), it.class_name)) ++seen_real;
  CHECK(mixed.size() == unseen.size() + seen_real);
  CHECK(domains_of(ds.manifest, mixed) == std::set<std::string>{"real"});
}

TEST_CASE("UcCDR keeps the query domain in training") {
  const SyntheticDataset ds = dataset(4, 10);
  const ProtocolSplit s = build_split(ds.manifest, request(ds.manifest, Protocol::kUcCDR, "sketch"));
  CHECK(!s.held_out_domain);
  CHECK(domains_of(ds.manifest, s.train).count("sketch"));
  const auto train_c = classes_of(ds.manifest, s.train);
  for (const auto& c : classes_of(ds.manifest, s.test_queries)) CHECK(!train_c.count(c));
}

TEST_CASE("UdCDR subsamples seen-class queries from the held-out domain") {
  const SyntheticDataset ds = dataset(4, 10, 20);
  const ProtocolSplit s = build_split(ds.manifest, request(ds.manifest, Protocol::kUdCDR, "sketch"));
  CHECK(s.query_fraction == 0.25);
  const auto train_c = classes_of(ds.manifest, s.train);
  CHECK(classes_of(ds.manifest, s.test_queries) == std::set<std::string>(train_c.begin(), train_c.end()));
  // stratified: 5 of 20 per class
  CHECK(s.test_queries.size() == 5 * s.classes.train.size());
  CHECK(!domains_of(ds.manifest, s.train).count("sketch"));
  const ProtocolSplit q = build_split(ds.manifest, request(ds.manifest, Protocol::kUdCDR, "quickdraw"));
  CHECK(q.query_fraction == 0.10);
  CHECK(q.test_queries.size() == 2 * q.classes.train.size());
}

TEST_CASE("splits are reproducible") {
  const SyntheticDataset ds = dataset(4, 10, 8);
  const SplitRequest r = request(ds.manifest, Protocol::kUdCDR, "sketch", 5);
  CHECK(build_split(ds.manifest, r) == build_split(ds.manifest, r));
}

TEST_CASE("overlapping or partial class partitions are rejected") {
  const SyntheticDataset ds = dataset(4, 6);
  SplitRequest r = request(ds.manifest, Protocol::kUCDR, "sketch");
  r.classes.test.push_back(r.classes.train.front());
  CHECK_THROWS_AS(build_split(ds.manifest, r), PreconditionError);
  r = request(ds.manifest, Protocol::kUCDR, "sketch");
  r.classes.test.pop_back();
  CHECK_THROWS_AS(build_split(ds.manifest, r), PreconditionError);
  r = request(ds.manifest, Protocol::kUCDR, "nowhere");
  CHECK_THROWS_AS(build_split(ds.manifest, r), PreconditionError);
  r = request(ds.manifest, Protocol::kUCDR, "real");
  CHECK_THROWS_AS(build_split(ds.manifest, r), PreconditionError);
}

TEST_CASE("a held-out domain leaking into training is detected") {
  const SyntheticDataset ds = dataset(4, 10);
  ProtocolSplit s = build_split(ds.manifest, request(ds.manifest, Protocol::kUCDR, "sketch"));
  for (const auto& it : ds.manifest.items()) {
    if (it.domain == "sketch" && std::count(s.classes.train.begin(), s.classes.train.end(), it.class_name)) {
      s.train.push_back(it.sample_id);
      break;
    }
  }
  CHECK(!split_violations(ds.manifest, s).empty());
}

TEST_CASE("split file round trip validates against the manifest") {
  pros::testing::TempDir dir("split");
  const SyntheticDataset ds = dataset(5, 14, 3);
  const ProtocolSplit s = build_split(ds.manifest, request(ds.manifest, Protocol::kUCDR, "infograph"));
  write_split_file(dir.file("split.json"), s);
  CHECK(read_split_file(dir.file("split.json"), ds.manifest) == s);
  std::ofstream(dir.file("bad.json")) << "{}\n";
  CHECK_THROWS_AS(read_split_file(dir.file("bad.json"), ds.manifest), ConfigError);
}

TEST_CASE("validation sets use validation classes only") {
  const SyntheticDataset ds = dataset(5, 14, 3);
  const ProtocolSplit s = build_split(ds.manifest, request(ds.manifest, Protocol::kUCDR, "infograph"));
  const std::set<std::string> val(s.classes.validation.begin(), s.classes.validation.end());
  CHECK(classes_of(ds.manifest, s.validation_queries) == val);
  CHECK(classes_of(ds.manifest, s.validation_gallery) == val);
  CHECK(domains_of(ds.manifest, s.validation_gallery) == std::set<std::string>{"real"});
  CHECK(!domains_of(ds.manifest, s.validation_queries).count("real"));
  CHECK(!domains_of(ds.manifest, s.validation_queries).count("infograph"));
}

TEST_CASE("samples file round trip") {
  pros::testing::TempDir dir("samples");
  const SyntheticDataset ds = dataset(3, 4, 2);
  write_samples(dir.file("s.bin"), ds);
  const std::vector<Mat> back = read_samples(dir.file("s.bin"), ds.manifest);
  REQUIRE(back.size() == ds.images.size());
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i] == ds.images[i]);
}

TEST_CASE("random splits satisfy every protocol invariant") {
  const SyntheticDataset ds = dataset(6, 14, 4);
  const std::vector<std::string> queries = {"sketch", "quickdraw", "infograph", "clipart", "painting"};
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = static_cast<Protocol>(trial % 3);
    const std::string& q = queries[rng() % queries.size()];
    const ProtocolSplit s = build_split(ds.manifest, request(ds.manifest, p, q, rng()));
    const auto bad = split_violations(ds.manifest, s);
    INFO(to_string(p) << " " << q << ": " << (bad.empty() ? "" : bad.front()));
    CHECK(bad.empty());
  }
}
