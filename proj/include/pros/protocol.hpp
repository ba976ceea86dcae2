// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dataset manifests, the three cross-domain retrieval protocols and a
// synthetic multi-domain data generator.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "pros/errors.hpp"
#include "pros/linalg.hpp"
#include "pros/serialize.hpp"

namespace pros {

struct ManifestItem {
  std::string sample_id;
  std::string source;  // uri or generator key
  std::string domain;
  std::string class_name;

  friend bool operator==(const ManifestItem&, const ManifestItem&) = default;
};

class DatasetManifest {
 public:
  DatasetManifest() = default;

  DatasetManifest(std::vector<ManifestItem> items, std::vector<std::string> domains, std::vector<std::string> classes)
      : items_(std::move(items)), domains_(std::move(domains)), classes_(std::move(classes)) {
    validate();
  }

  /// Vocabularies in order of first appearance.
  static DatasetManifest from_items(std::vector<ManifestItem> items) {
    std::vector<std::string> domains;
    std::vector<std::string> classes;
    for (const auto& it : items) {
      if (std::find(domains.begin(), domains.end(), it.domain) == domains.end()) domains.push_back(it.domain);
      if (std::find(classes.begin(), classes.end(), it.class_name) == classes.end()) classes.push_back(it.class_name);
    }
    return DatasetManifest(std::move(items), std::move(domains), std::move(classes));
  }

  const std::vector<ManifestItem>& items() const { return items_; }
  const std::vector<std::string>& domains() const { return domains_; }
  const std::vector<std::string>& classes() const { return classes_; }
  std::size_t size() const { return items_.size(); }

  const ManifestItem& item(const std::string& sample_id) const { return items_[index_of(sample_id)]; }

  std::size_t index_of(const std::string& sample_id) const {
    auto it = index_.find(sample_id);
    if (it == index_.end()) throw PreconditionError("unknown sample id '" + sample_id + "'");
    return it->second;
  }

  bool has_domain(const std::string& d) const { return std::find(domains_.begin(), domains_.end(), d) != domains_.end(); }

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.items_ == b.items_ && a.domains_ == b.domains_ && a.classes_ == b.classes_;
  }

 private:
  void validate() {
    const std::set<std::string> dset(domains_.begin(), domains_.end());
    const std::set<std::string> cset(classes_.begin(), classes_.end());
    if (dset.size() != domains_.size()) throw ConfigError("manifest domain vocabulary has duplicates");
    if (cset.size() != classes_.size()) throw ConfigError("manifest class vocabulary has duplicates");
    index_.clear();
    for (std::size_t i = 0; i < items_.size(); ++i) {
      const auto& it = items_[i];
      if (!index_.emplace(it.sample_id, i).second) throw ConfigError("duplicate sample id '" + it.sample_id + "'");
      if (!dset.count(it.domain)) throw ConfigError("item '" + it.sample_id + "' has unknown domain '" + it.domain + "'");
      if (!cset.count(it.class_name)) {
        throw ConfigError("item '" + it.sample_id + "' has unknown class '" + it.class_name + "'");
      }
    }
  }

  std::vector<ManifestItem> items_;
  std::vector<std::string> domains_;
  std::vector<std::string> classes_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr const char* kManifestHeader = "#pros-manifest v1";
inline constexpr const char* kSplitHeader = "#pros-split v1";

namespace detail {
inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, '\t')) out.push_back(field);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

inline std::string join_tabs(const std::vector<std::string>& fields) {
  std::string s;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) s += '\t';
    s += fields[i];
  }
  return s;
}
}  // namespace detail

inline void write_manifest(std::ostream& out, const DatasetManifest& m) {
  out << kManifestHeader << '\n';
  out << "#domains\t" << detail::join_tabs(m.domains()) << '\n';
  out << "#classes\t" << detail::join_tabs(m.classes()) << '\n';
  for (const auto& it : m.items()) {
    out << it.sample_id << '\t' << it.source << '\t' << it.domain << '\t' << it.class_name << '\n';
  }
}

inline DatasetManifest read_manifest(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw ConfigError(std::string("manifest must start with '") + kManifestHeader + "'");
  }
  std::vector<ManifestItem> items;
  std::optional<std::vector<std::string>> domains;
  std::optional<std::vector<std::string>> classes;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split_tabs(line);
    if (line[0] == '#') {
      if (fields[0] == "#domains") domains.emplace(fields.begin() + 1, fields.end());
      else if (fields[0] == "#classes") classes.emplace(fields.begin() + 1, fields.end());
      continue;
    }
    if (fields.size() != 4) {
      throw ConfigError("manifest line " + std::to_string(line_no) + ": expected 4 tab-separated fields");
    }
    items.push_back(ManifestItem{fields[0], fields[1], fields[2], fields[3]});
  }
  if (domains && classes) return DatasetManifest(std::move(items), std::move(*domains), std::move(*classes));
  return DatasetManifest::from_items(std::move(items));
}

inline void write_manifest_file(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  write_manifest(out, m);
}

inline DatasetManifest read_manifest_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest '" + path + "'");
  return read_manifest(in);
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticConfig {
  std::uint64_t seed = 0;
  int num_domains = 4;
  int num_classes = 10;
  int per_pair = 50;  // samples per (domain, class)
  int num_patches = 16;
  int patch_dim = 32;
  int min_object_patches = 5;
  int max_object_patches = 9;
  double objectness = 0.6;      // weight of the component shared by every class prototype
  double within_class = 0.35;   // per-sample deviation from the class prototype
  double rotation = 0.35;       // Cayley-transform scale of each domain's rotation
  double bias = 1.2;            // per-coordinate std of each domain's additive bias
  double min_noise = 0.2;       // per-domain noise level range (non-real domains)
  double max_noise = 0.5;
  double real_noise = 0.1;
  double clutter = 0.6;         // std of background patches

  void validate() const {
    require(num_domains >= 2, "synthetic data needs K >= 2 domains, got K=" + std::to_string(num_domains));
    require(num_classes >= 4, "synthetic data needs C >= 4 classes, got C=" + std::to_string(num_classes));
    require(per_pair >= 2, "synthetic data needs n >= 2 samples per (domain, class), got n=" + std::to_string(per_pair));
    require(num_patches >= 1 && patch_dim >= 2, "synthetic data needs positive patch grid dimensions");
    require(min_object_patches >= 1 && min_object_patches <= max_object_patches && max_object_patches <= num_patches,
            "synthetic data needs 1 <= min_object_patches <= max_object_patches <= num_patches");
  }

  friend bool operator==(const SyntheticConfig&, const SyntheticConfig&) = default;
};

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = {{"seed", c.seed},
       {"num_domains", c.num_domains},
       {"num_classes", c.num_classes},
       {"per_pair", c.per_pair},
       {"num_patches", c.num_patches},
       {"patch_dim", c.patch_dim},
       {"min_object_patches", c.min_object_patches},
       {"max_object_patches", c.max_object_patches},
       {"objectness", c.objectness},
       {"within_class", c.within_class},
       {"rotation", c.rotation},
       {"bias", c.bias},
       {"min_noise", c.min_noise},
       {"max_noise", c.max_noise},
       {"real_noise", c.real_noise},
       {"clutter", c.clutter}};
}

inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  c.seed = j.value("seed", c.seed);
  c.num_domains = j.value("num_domains", c.num_domains);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.per_pair = j.value("per_pair", c.per_pair);
  c.num_patches = j.value("num_patches", c.num_patches);
  c.patch_dim = j.value("patch_dim", c.patch_dim);
  c.min_object_patches = j.value("min_object_patches", c.min_object_patches);
  c.max_object_patches = j.value("max_object_patches", c.max_object_patches);
  c.objectness = j.value("objectness", c.objectness);
  c.within_class = j.value("within_class", c.within_class);
  c.rotation = j.value("rotation", c.rotation);
  c.bias = j.value("bias", c.bias);
  c.min_noise = j.value("min_noise", c.min_noise);
  c.max_noise = j.value("max_noise", c.max_noise);
  c.real_noise = j.value("real_noise", c.real_noise);
  c.clutter = j.value("clutter", c.clutter);
}

/// A fixed invertible distortion applied to everything rendered in a domain.
struct DomainDistortion {
  Mat rotation;  // patch_dim x patch_dim, orthogonal
  Mat bias;      // 1 x patch_dim
  double noise = 0.0;
};

inline const std::vector<std::string>& domain_name_pool() {
  static const std::vector<std::string> names = {"real", "sketch", "quickdraw", "infograph", "clipart", "painting"};
  return names;
}

inline constexpr const char* kRealDomain = "real";

inline std::string synthetic_domain_name(int d) {
  const auto& pool = domain_name_pool();
  return d < static_cast<int>(pool.size()) ? pool[static_cast<std::size_t>(d)] : "domain_" + std::to_string(d);
}

inline std::string synthetic_class_name(int c) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "class_%03d", c);
  return buf;
}

/// Images are patch grids (num_patches x patch_dim). Each class has a
/// prototype sharing an "objectness" component; an image places the
/// (per-sample jittered) prototype on a random subset of patches and
/// background clutter elsewhere. Domain 0 ("real") is distortion-free.
struct SyntheticDataset {
  SyntheticConfig config;
  DatasetManifest manifest;
  std::vector<Mat> images;  // parallel to manifest.items()
  Mat prototypes;           // num_classes x patch_dim
  std::vector<DomainDistortion> distortions;

  const Mat& image(const std::string& sample_id) const { return images[manifest.index_of(sample_id)]; }
};

inline std::string sample_id_for(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%06zu", index);
  return buf;
}

inline SyntheticDataset generate_synthetic_dataset(const SyntheticConfig& config) {
  config.validate();
  const Eigen::Index p = config.patch_dim;
  SyntheticDataset ds;
  ds.config = config;

  Rng proto_rng(derive_seed(config.seed, 1));
  const Mat objectness = normal_matrix(proto_rng, 1, p, 1.0);
  ds.prototypes = normal_matrix(proto_rng, config.num_classes, p, 1.0);
  ds.prototypes.rowwise() += config.objectness * objectness.row(0);

  Rng domain_rng(derive_seed(config.seed, 2));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int d = 0; d < config.num_domains; ++d) {
    DomainDistortion dist;
    if (d == 0) {
      dist.rotation = Mat::Identity(p, p);
      dist.bias = Mat::Zero(1, p);
      dist.noise = config.real_noise;
    } else {
      Mat a = normal_matrix(domain_rng, p, p, 1.0);
      Mat skew = (a - a.transpose()) * (config.rotation / std::sqrt(2.0 * static_cast<double>(p)));
      const Mat id = Mat::Identity(p, p);
      dist.rotation = (id - skew).partialPivLu().solve(id + skew);  // Cayley transform: orthogonal
      dist.bias = normal_matrix(domain_rng, 1, p, config.bias);
      dist.noise = config.min_noise + (config.max_noise - config.min_noise) * unit(domain_rng);
    }
    ds.distortions.push_back(std::move(dist));
  }

  std::vector<std::string> domains;
  std::vector<std::string> classes;
  for (int d = 0; d < config.num_domains; ++d) domains.push_back(synthetic_domain_name(d));
  for (int c = 0; c < config.num_classes; ++c) classes.push_back(synthetic_class_name(c));

  std::vector<ManifestItem> items;
  const std::size_t total = static_cast<std::size_t>(config.num_domains) * static_cast<std::size_t>(config.num_classes) *
                            static_cast<std::size_t>(config.per_pair);
  items.reserve(total);
  ds.images.reserve(total);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<int> slots(static_cast<std::size_t>(config.num_patches));
  for (int d = 0; d < config.num_domains; ++d) {
    const auto& dist = ds.distortions[static_cast<std::size_t>(d)];
    for (int c = 0; c < config.num_classes; ++c) {
      for (int i = 0; i < config.per_pair; ++i) {
        const std::size_t index = items.size();
        Rng rng(derive_seed(config.seed, 0x10000 + index));
        std::uniform_int_distribution<int> count(config.min_object_patches, config.max_object_patches);
        const int n_obj = count(rng);
        std::iota(slots.begin(), slots.end(), 0);
        std::shuffle(slots.begin(), slots.end(), rng);
        const Mat object = ds.prototypes.row(c) + normal_matrix(rng, 1, p, config.within_class);
        const Mat rendered = object * dist.rotation.transpose();
        Mat img = normal_matrix(rng, config.num_patches, p, config.clutter);
        for (int k = 0; k < n_obj; ++k) img.row(slots[static_cast<std::size_t>(k)]) = rendered.row(0);
        img += normal_matrix(rng, config.num_patches, p, dist.noise);
        img.rowwise() += dist.bias.row(0);
        ds.images.push_back(std::move(img));
        items.push_back(ManifestItem{sample_id_for(index), "samples:" + std::to_string(index), domains[d], classes[c]});
      }
    }
  }
  ds.manifest = DatasetManifest(std::move(items), std::move(domains), std::move(classes));
  return ds;
}

/// Nearest-prototype classification by cosine between the patch-mean and
/// each class prototype. Returns accuracy over the items of `domain`.
inline double nearest_prototype_accuracy(const SyntheticDataset& ds, const std::string& domain) {
  std::size_t hits = 0;
  std::size_t total = 0;
  const auto& cls = ds.manifest.classes();
  for (std::size_t i = 0; i < ds.manifest.size(); ++i) {
    const auto& it = ds.manifest.items()[i];
    if (it.domain != domain) continue;
    const RowVec mean = ds.images[i].colwise().mean();
    Eigen::Index best = 0;
    double best_cos = -2.0;
    for (Eigen::Index c = 0; c < ds.prototypes.rows(); ++c) {
      const double cos = mean.dot(ds.prototypes.row(c)) / (mean.norm() * ds.prototypes.row(c).norm());
      if (cos > best_cos) {
        best_cos = cos;
        best = c;
      }
    }
    hits += cls[static_cast<std::size_t>(best)] == it.class_name;
    ++total;
  }
  require(total > 0, "no items in domain '" + domain + "'");
  return static_cast<double>(hits) / static_cast<double>(total);
}

/// Writes all images as one tensor archive ("PROSSMPL"); row i of the
/// stacked tensor block i belongs to item i.
inline void write_samples(const std::string& path, const SyntheticDataset& ds) {
  io::TensorArchive archive;
  archive.meta["count"] = ds.images.size();
  archive.meta["num_patches"] = ds.config.num_patches;
  archive.meta["patch_dim"] = ds.config.patch_dim;
  const Eigen::Index np = ds.config.num_patches;
  Mat all(static_cast<Eigen::Index>(ds.images.size()) * np, ds.config.patch_dim);
  for (std::size_t i = 0; i < ds.images.size(); ++i) all.middleRows(static_cast<Eigen::Index>(i) * np, np) = ds.images[i];
  archive.add("samples", std::move(all));
  io::write_archive(path, archive, "PROSSMPL");
}

/// Loads images for manifest items whose source is "samples:<row>".
inline std::vector<Mat> read_samples(const std::string& path, const DatasetManifest& manifest) {
  const io::TensorArchive archive = io::read_archive(path, "PROSSMPL");
  const auto count = archive.meta.at("count").get<std::size_t>();
  const auto np = archive.meta.at("num_patches").get<Eigen::Index>();
  const Mat& all = archive.at("samples");
  std::vector<Mat> images;
  images.reserve(manifest.size());
  for (const auto& it : manifest.items()) {
    const std::string prefix = "samples:";
    if (it.source.rfind(prefix, 0) != 0) throw ConfigError("item '" + it.sample_id + "' has unsupported source '" + it.source + "'");
    const std::size_t row = std::stoull(it.source.substr(prefix.size()));
    if (row >= count) throw ConfigError("item '" + it.sample_id + "' refers to missing sample " + std::to_string(row));
    images.push_back(all.middleRows(static_cast<Eigen::Index>(row) * np, np));
  }
  return images;
}

// ---------------------------------------------------------------------------
// Protocols and splits

enum class Protocol { kUCDR, kUcCDR, kUdCDR };
enum class GalleryMode { kUnseen, kMixed };

inline std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::kUCDR: return "UCDR";
    case Protocol::kUcCDR: return "UcCDR";
    case Protocol::kUdCDR: return "UdCDR";
  }
  return "?";
}

inline Protocol parse_protocol(const std::string& s) {
  if (s == "UCDR" || s == "ucdr") return Protocol::kUCDR;
  if (s == "UcCDR" || s == "uccdr") return Protocol::kUcCDR;
  if (s == "UdCDR" || s == "udcdr") return Protocol::kUdCDR;
  throw ConfigError("unknown protocol '" + s + "' (expected UCDR, UcCDR or UdCDR)");
}

inline std::string to_string(GalleryMode m) { return m == GalleryMode::kUnseen ? "unseen" : "mixed"; }

inline GalleryMode parse_gallery_mode(const std::string& s) {
  if (s == "unseen") return GalleryMode::kUnseen;
  if (s == "mixed") return GalleryMode::kMixed;
  throw ConfigError("unknown gallery mode '" + s + "' (expected unseen or mixed)");
}

struct ClassPartition {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;

  friend bool operator==(const ClassPartition&, const ClassPartition&) = default;
};

/// Seeded shuffle of the class vocabulary into train / validation / test
/// with the given fractions (test takes the remainder, at least one each).
inline ClassPartition partition_classes(const std::vector<std::string>& classes, std::uint64_t seed,
                                        double train_fraction = 0.71, double validation_fraction = 0.16) {
  require(classes.size() >= 3, "class partition needs at least 3 classes");
  std::vector<std::string> order = classes;
  Rng rng(derive_seed(seed, 0xC1A55));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<long>(order.size());
  long n_train = std::lround(train_fraction * static_cast<double>(n));
  long n_val = std::lround(validation_fraction * static_cast<double>(n));
  n_train = std::clamp(n_train, 1L, n - 2);
  n_val = std::clamp(n_val, 1L, n - n_train - 1);
  ClassPartition p;
  p.train.assign(order.begin(), order.begin() + n_train);
  p.validation.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  p.test.assign(order.begin() + n_train + n_val, order.end());
  // keep vocabulary order inside each group
  auto by_vocab = [&](std::vector<std::string>& v) {
    std::sort(v.begin(), v.end(), [&](const std::string& a, const std::string& b) {
      return std::find(classes.begin(), classes.end(), a) < std::find(classes.begin(), classes.end(), b);
    });
  };
  by_vocab(p.train);
  by_vocab(p.validation);
  by_vocab(p.test);
  return p;
}

struct SplitRequest {
  Protocol protocol = Protocol::kUCDR;
  std::string query_domain;  // held out for UCDR / UdCDR, kept in training for UcCDR
  ClassPartition classes;
  GalleryMode gallery_mode = GalleryMode::kUnseen;
  std::optional<double> query_fraction;  // UdCDR subsample; default 0.25 (0.10 for quickdraw)
  bool both_galleries = true;            // also build the other gallery mode when it applies
  std::uint64_t seed = 0;
  std::string gallery_domain = kRealDomain;
};

struct ProtocolSplit {
  Protocol protocol = Protocol::kUCDR;
  GalleryMode gallery_mode = GalleryMode::kUnseen;
  std::string query_domain;
  std::optional<std::string> held_out_domain;
  std::string gallery_domain = kRealDomain;
  ClassPartition classes;
  std::vector<std::string> train_domains;
  double query_fraction = 1.0;
  std::uint64_t seed = 0;

  std::vector<std::string> train;
  std::vector<std::string> validation_queries;
  std::vector<std::string> validation_gallery;
  std::vector<std::string> test_queries;
  std::map<GalleryMode, std::vector<std::string>> galleries;

  const std::vector<std::string>& gallery() const { return galleries.at(gallery_mode); }

  friend bool operator==(const ProtocolSplit&, const ProtocolSplit&) = default;
};

inline double default_query_fraction(const std::string& domain) { return domain == "quickdraw" ? 0.10 : 0.25; }

/// Checks every protocol invariant; returns human-readable violations.
inline std::vector<std::string> split_violations(const DatasetManifest& m, const ProtocolSplit& s) {
  std::vector<std::string> bad;
  std::set<std::string> train_ids;
  std::set<std::string> train_classes;
  std::set<std::string> train_domains;
  for (const auto& id : s.train) {
    const auto& it = m.item(id);
    train_ids.insert(id);
    train_classes.insert(it.class_name);
    train_domains.insert(it.domain);
  }
  std::set<std::string> query_classes;
  for (const auto& id : s.test_queries) {
    const auto& it = m.item(id);
    if (train_ids.count(id)) bad.push_back("test query " + id + " is also a training item");
    if (it.domain != s.query_domain) bad.push_back("test query " + id + " is not from the query domain");
    query_classes.insert(it.class_name);
  }
  const bool unseen_classes = s.protocol != Protocol::kUdCDR;
  const bool unseen_domain = s.protocol != Protocol::kUcCDR;
  for (const auto& c : query_classes) {
    if (unseen_classes && train_classes.count(c)) bad.push_back("test query class " + c + " appears in training");
    if (!unseen_classes && !train_classes.count(c)) bad.push_back("test query class " + c + " is not a training class");
  }
  if (unseen_domain) {
    if (train_domains.count(s.query_domain)) bad.push_back("query domain " + s.query_domain + " appears in training");
    if (!s.held_out_domain || *s.held_out_domain != s.query_domain) bad.push_back("held-out domain is not the query domain");
  } else if (!s.train.empty() && !train_domains.count(s.query_domain)) {
    bad.push_back("query domain " + s.query_domain + " is not a training domain");
  }
  if (s.held_out_domain && train_domains.count(*s.held_out_domain)) {
    bad.push_back("held-out domain " + *s.held_out_domain + " appears in training");
  }
  if (!s.galleries.count(s.gallery_mode)) bad.push_back("split has no gallery for its gallery mode");
  for (const auto& [mode, ids] : s.galleries) {
    for (const auto& id : ids) {
      const auto& it = m.item(id);
      if (it.domain != s.gallery_domain) bad.push_back("gallery item " + id + " is not from " + s.gallery_domain);
      if (unseen_classes && mode == GalleryMode::kUnseen && train_classes.count(it.class_name)) {
        bad.push_back("unseen gallery item " + id + " belongs to a training class");
      }
    }
  }
  if (s.galleries.count(GalleryMode::kUnseen) && s.galleries.count(GalleryMode::kMixed)) {
    const auto& unseen = s.galleries.at(GalleryMode::kUnseen);
    const std::set<std::string> mixed(s.galleries.at(GalleryMode::kMixed).begin(), s.galleries.at(GalleryMode::kMixed).end());
    for (const auto& id : unseen)
      if (!mixed.count(id)) bad.push_back("mixed gallery is missing unseen item " + id);
  }
  const std::set<std::string> val_classes(s.classes.validation.begin(), s.classes.validation.end());
  for (const auto& id : s.validation_queries) {
    if (train_ids.count(id)) bad.push_back("validation query " + id + " is also a training item");
    if (!val_classes.count(m.item(id).class_name)) bad.push_back("validation query " + id + " is not a validation class");
  }
  return bad;
}

inline void check_partition(const DatasetManifest& m, const ClassPartition& p) {
  std::set<std::string> seen;
  for (const auto* group : {&p.train, &p.validation, &p.test}) {
    for (const auto& c : *group) {
      if (std::find(m.classes().begin(), m.classes().end(), c) == m.classes().end()) {
        throw PreconditionError("class partition names unknown class '" + c + "'");
      }
      if (!seen.insert(c).second) throw PreconditionError("class partition is not disjoint: '" + c + "' repeats");
    }
  }
  if (seen.size() != m.classes().size()) throw PreconditionError("class partition does not cover every class");
  require(p.train.size() >= 2, "class partition needs at least 2 training classes");
  require(!p.test.empty(), "class partition needs at least one test class");
}

inline ProtocolSplit build_split(const DatasetManifest& m, const SplitRequest& req) {
  check_partition(m, req.classes);
  require(m.has_domain(req.query_domain), "query domain '" + req.query_domain + "' is not in the manifest");
  require(m.has_domain(req.gallery_domain), "gallery domain '" + req.gallery_domain + "' is not in the manifest");
  require(req.query_domain != req.gallery_domain, "the query domain must differ from the gallery domain");

  ProtocolSplit s;
  s.protocol = req.protocol;
  s.gallery_mode = req.gallery_mode;
  s.query_domain = req.query_domain;
  s.gallery_domain = req.gallery_domain;
  s.classes = req.classes;
  s.seed = req.seed;
  const bool hold_out = req.protocol != Protocol::kUcCDR;
  if (hold_out) s.held_out_domain = req.query_domain;
  for (const auto& d : m.domains())
    if (!(hold_out && d == req.query_domain)) s.train_domains.push_back(d);
  require(s.train_domains.size() >= 2, "training needs at least 2 source domains");

  const std::set<std::string> train_c(s.classes.train.begin(), s.classes.train.end());
  const std::set<std::string> val_c(s.classes.validation.begin(), s.classes.validation.end());
  const std::set<std::string> test_c(s.classes.test.begin(), s.classes.test.end());
  const std::set<std::string> train_d(s.train_domains.begin(), s.train_domains.end());

  std::map<std::string, std::vector<std::string>> udcdr_pool;  // class -> held-out items
  std::vector<std::string> unseen_gallery;
  std::vector<std::string> seen_gallery;
  for (const auto& it : m.items()) {
    const bool in_train_domain = train_d.count(it.domain) > 0;
    if (in_train_domain && train_c.count(it.class_name)) s.train.push_back(it.sample_id);
    if (val_c.count(it.class_name)) {
      if (it.domain == s.gallery_domain) s.validation_gallery.push_back(it.sample_id);
      else if (in_train_domain) s.validation_queries.push_back(it.sample_id);
    }
    if (it.domain == s.query_domain) {
      if (req.protocol == Protocol::kUdCDR) {
        if (train_c.count(it.class_name)) udcdr_pool[it.class_name].push_back(it.sample_id);
      } else if (test_c.count(it.class_name)) {
        s.test_queries.push_back(it.sample_id);
      }
    }
    if (it.domain == s.gallery_domain) {
      if (test_c.count(it.class_name)) unseen_gallery.push_back(it.sample_id);
      if (train_c.count(it.class_name)) seen_gallery.push_back(it.sample_id);
    }
  }

  if (req.protocol == Protocol::kUdCDR) {
    // stratified by class
    s.query_fraction = req.query_fraction.value_or(default_query_fraction(req.query_domain));
    require(s.query_fraction > 0.0 && s.query_fraction <= 1.0, "query fraction must lie in (0, 1]");
    Rng rng(derive_seed(req.seed, 0x0D0D));
    for (const auto& c : s.classes.train) {
      auto pool = udcdr_pool[c];
      if (pool.empty()) continue;
      std::shuffle(pool.begin(), pool.end(), rng);
      const auto take = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::lround(s.query_fraction * static_cast<double>(pool.size()))));
      pool.resize(std::min(take, pool.size()));
      std::sort(pool.begin(), pool.end());
      s.test_queries.insert(s.test_queries.end(), pool.begin(), pool.end());
    }
    // queries come from seen classes, so the gallery is the seen-class real set
    s.galleries[req.gallery_mode] = seen_gallery;
  } else {
    std::vector<std::string> mixed = unseen_gallery;
    mixed.insert(mixed.end(), seen_gallery.begin(), seen_gallery.end());
    std::sort(mixed.begin(), mixed.end());
    if (req.gallery_mode == GalleryMode::kUnseen || req.both_galleries) s.galleries[GalleryMode::kUnseen] = unseen_gallery;
    if (req.gallery_mode == GalleryMode::kMixed || req.both_galleries) s.galleries[GalleryMode::kMixed] = mixed;
  }

  require(!s.train.empty(), "split has an empty training set");
  require(!s.test_queries.empty(), "split has no test queries");
  const auto bad = split_violations(m, s);
  if (!bad.empty()) throw PreconditionError("split violates protocol invariants: " + bad.front());
  return s;
}

inline void to_json(nlohmann::json& j, const ProtocolSplit& s) {
  nlohmann::json galleries = nlohmann::json::object();
  for (const auto& [mode, ids] : s.galleries) galleries[to_string(mode)] = ids;
  j = {{"protocol", to_string(s.protocol)},
       {"gallery_mode", to_string(s.gallery_mode)},
       {"query_domain", s.query_domain},
       {"held_out_domain", s.held_out_domain ? nlohmann::json(*s.held_out_domain) : nlohmann::json(nullptr)},
       {"gallery_domain", s.gallery_domain},
       {"train_domains", s.train_domains},
       {"query_fraction", s.query_fraction},
       {"seed", s.seed},
       {"classes", {{"train", s.classes.train}, {"validation", s.classes.validation}, {"test", s.classes.test}}},
       {"train", s.train},
       {"validation_queries", s.validation_queries},
       {"validation_gallery", s.validation_gallery},
       {"test_queries", s.test_queries},
       {"galleries", galleries}};
}

inline void from_json(const nlohmann::json& j, ProtocolSplit& s) {
  s.protocol = parse_protocol(j.at("protocol").get<std::string>());
  s.gallery_mode = parse_gallery_mode(j.at("gallery_mode").get<std::string>());
  s.query_domain = j.at("query_domain").get<std::string>();
  if (j.contains("held_out_domain") && !j.at("held_out_domain").is_null()) {
    s.held_out_domain = j.at("held_out_domain").get<std::string>();
  }
  s.gallery_domain = j.value("gallery_domain", std::string(kRealDomain));
  s.train_domains = j.at("train_domains").get<std::vector<std::string>>();
  s.query_fraction = j.value("query_fraction", 1.0);
  s.seed = j.value("seed", std::uint64_t{0});
  const auto& c = j.at("classes");
  s.classes.train = c.at("train").get<std::vector<std::string>>();
  s.classes.validation = c.at("validation").get<std::vector<std::string>>();
  s.classes.test = c.at("test").get<std::vector<std::string>>();
  s.train = j.at("train").get<std::vector<std::string>>();
  s.validation_queries = j.at("validation_queries").get<std::vector<std::string>>();
  s.validation_gallery = j.at("validation_gallery").get<std::vector<std::string>>();
  s.test_queries = j.at("test_queries").get<std::vector<std::string>>();
  s.galleries.clear();
  for (const auto& [mode, ids] : j.at("galleries").items()) {
    s.galleries[parse_gallery_mode(mode)] = ids.get<std::vector<std::string>>();
  }
}

inline void write_split_file(const std::string& path, const ProtocolSplit& s) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  out << kSplitHeader << '\n' << nlohmann::json(s).dump(1) << '\n';
}

/// Reads and validates a split against its manifest.
inline ProtocolSplit read_split_file(const std::string& path, const DatasetManifest& m) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open split '" + path + "'");
  std::string header;
  if (!std::getline(in, header) || header != kSplitHeader) {
    throw ConfigError(std::string("split file must start with '") + kSplitHeader + "'");
  }
  ProtocolSplit s;
  try {
    s = nlohmann::json::parse(in).get<ProtocolSplit>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed split '" + path + "': " + e.what());
  }
  const auto bad = split_violations(m, s);
  if (!bad.empty()) throw PreconditionError("split '" + path + "' violates protocol invariants: " + bad.front());
  return s;
}

}  // namespace pros
