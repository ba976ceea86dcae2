// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0
//
// Gallery indexing, cosine ranking and retrieval metrics.
//
// Average precision at k uses the truncated convention
//   AP@k = (1 / min(R, k)) * sum_{i<=k} rel_i * Prec@i,
// with R the number of relevant gallery items. Queries with R == 0 are
// excluded from the mean and counted in MetricValue::excluded.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pros/errors.hpp"
#include "pros/linalg.hpp"
#include "pros/model.hpp"
#include "pros/protocol.hpp"
#include "pros/serialize.hpp"

namespace pros {

struct EmbeddingGallery {
  std::vector<std::string> ids;
  Mat vectors;  // one unit-norm row per item
  std::vector<std::string> classes;
  std::vector<std::string> domains;

  std::size_t size() const { return ids.size(); }
  Eigen::Index dim() const { return vectors.cols(); }

  void validate() const {
    require(static_cast<std::size_t>(vectors.rows()) == ids.size() && classes.size() == ids.size() &&
                domains.size() == ids.size(),
            "gallery arrays have different lengths");
    std::set<std::string> unique(ids.begin(), ids.end());
    require(unique.size() == ids.size(), "gallery ids are not unique");
    for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
      const double n = vectors.row(r).norm();
      if (!std::isfinite(n)) throw NumericError("gallery vector " + ids[static_cast<std::size_t>(r)] + " is non-finite");
      require(std::abs(n - 1.0) <= 1e-6, "gallery vector " + ids[static_cast<std::size_t>(r)] + " is not unit-norm");
    }
  }

  /// Rows whose id is in `wanted`, in the order given.
  EmbeddingGallery subset(const std::vector<std::string>& wanted) const {
    std::map<std::string, std::size_t> where;
    for (std::size_t i = 0; i < ids.size(); ++i) where.emplace(ids[i], i);
    EmbeddingGallery out;
    out.vectors.resize(static_cast<Eigen::Index>(wanted.size()), dim());
    for (std::size_t i = 0; i < wanted.size(); ++i) {
      auto it = where.find(wanted[i]);
      if (it == where.end()) throw PreconditionError("embedding file has no entry for '" + wanted[i] + "'");
      out.ids.push_back(ids[it->second]);
      out.classes.push_back(classes[it->second]);
      out.domains.push_back(domains[it->second]);
      out.vectors.row(static_cast<Eigen::Index>(i)) = vectors.row(static_cast<Eigen::Index>(it->second));
    }
    return out;
  }
};

/// Gallery indices ordered by descending cosine; ties by ascending id.
struct RankedResult {
  std::string query_id;
  std::vector<std::size_t> order;
  std::vector<double> scores;  // parallel to order
};

inline RankedResult rank(const std::string& query_id, const RowVec& query, const EmbeddingGallery& gallery) {
  require(gallery.size() > 0, "rank: the gallery is empty");
  require(query.size() == gallery.dim(), "rank: query has dimension " + std::to_string(query.size()) +
                                             ", gallery has " + std::to_string(gallery.dim()));
  const Eigen::VectorXd sims = gallery.vectors * query.transpose();
  RankedResult r;
  r.query_id = query_id;
  r.order.resize(gallery.size());
  std::iota(r.order.begin(), r.order.end(), std::size_t{0});
  std::sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = sims(static_cast<Eigen::Index>(a));
    const double sb = sims(static_cast<Eigen::Index>(b));
    if (sa != sb) return sa > sb;
    return gallery.ids[a] < gallery.ids[b];
  });
  r.scores.reserve(r.order.size());
  for (std::size_t i : r.order) r.scores.push_back(sims(static_cast<Eigen::Index>(i)));
  return r;
}

inline std::vector<RankedResult> rank_all(const EmbeddingGallery& queries, const EmbeddingGallery& gallery) {
  std::vector<RankedResult> out;
  out.reserve(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    out.push_back(rank(queries.ids[q], queries.vectors.row(static_cast<Eigen::Index>(q)), gallery));
  }
  return out;
}

/// relevance[q][g] != 0 when gallery item g is relevant to query q.
using Relevance = std::vector<std::vector<std::uint8_t>>;

inline Relevance class_relevance(const std::vector<std::string>& query_classes, const EmbeddingGallery& gallery) {
  Relevance rel(query_classes.size(), std::vector<std::uint8_t>(gallery.size(), 0));
  for (std::size_t q = 0; q < query_classes.size(); ++q)
    for (std::size_t g = 0; g < gallery.size(); ++g) rel[q][g] = gallery.classes[g] == query_classes[q];
  return rel;
}

struct MetricValue {
  double value = 0.0;
  std::size_t evaluated = 0;  // queries that entered the mean
  std::size_t excluded = 0;   // queries without any relevant gallery item
  std::size_t k = 0;          // effective cutoff
  bool clipped = false;       // requested k exceeded the gallery size
};

namespace detail {
inline void check_results(std::span<const RankedResult> results, const Relevance& relevance) {
  require(results.size() == relevance.size(), "metrics: one relevance row per ranked query is required");
  for (std::size_t q = 0; q < results.size(); ++q) {
    require(results[q].order.size() == relevance[q].size(), "metrics: relevance row does not match the gallery size");
  }
}
}  // namespace detail

inline MetricValue map_at_k(std::span<const RankedResult> results, const Relevance& relevance, std::size_t k) {
  require(k >= 1, "map_at_k: k must be at least 1");
  detail::check_results(results, relevance);
  MetricValue m;
  m.k = k;
  double sum = 0.0;
  for (std::size_t q = 0; q < results.size(); ++q) {
    const auto& order = results[q].order;
    const auto& rel = relevance[q];
    const std::size_t total_relevant = static_cast<std::size_t>(std::count(rel.begin(), rel.end(), 1));
    if (total_relevant == 0) {
      ++m.excluded;
      continue;
    }
    const std::size_t cutoff = std::min(k, order.size());
    if (k > order.size()) m.clipped = true;
    std::size_t hits = 0;
    double ap = 0.0;
    for (std::size_t i = 0; i < cutoff; ++i) {
      if (rel[order[i]]) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(i + 1);
      }
    }
    sum += ap / static_cast<double>(std::min(total_relevant, k));
    ++m.evaluated;
  }
  m.value = m.evaluated > 0 ? sum / static_cast<double>(m.evaluated) : 0.0;
  return m;
}

inline MetricValue prec_at_k(std::span<const RankedResult> results, const Relevance& relevance, std::size_t k) {
  require(k >= 1, "prec_at_k: k must be at least 1");
  detail::check_results(results, relevance);
  MetricValue m;
  m.k = k;
  double sum = 0.0;
  for (std::size_t q = 0; q < results.size(); ++q) {
    const auto& order = results[q].order;
    const std::size_t cutoff = std::min(k, order.size());
    if (k > order.size()) m.clipped = true;
    m.k = std::min(m.k, cutoff);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < cutoff; ++i) hits += relevance[q][order[i]];
    sum += static_cast<double>(hits) / static_cast<double>(cutoff);
    ++m.evaluated;
  }
  m.value = m.evaluated > 0 ? sum / static_cast<double>(m.evaluated) : 0.0;
  return m;
}

inline MetricValue map_all(std::span<const RankedResult> results, const Relevance& relevance) {
  std::size_t gallery_size = 1;
  for (const auto& r : results) gallery_size = std::max(gallery_size, r.order.size());
  return map_at_k(results, relevance, gallery_size);
}

struct SigmaReport {
  double sigma = 0.0;
  double max_intra = 0.0;
  double min_inter = 0.0;
  bool infinite = false;
  std::vector<std::string> excluded_classes;  // fewer than two samples
};

/// sigma = (max over classes of the largest within-class distance) /
///         (min over class pairs of the smallest cross-class distance).
inline SigmaReport sigma_diagnostic(const Mat& vectors, const std::vector<std::string>& labels) {
  require(static_cast<std::size_t>(vectors.rows()) == labels.size(), "sigma: one label per vector is required");
  std::map<std::string, std::vector<Eigen::Index>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(static_cast<Eigen::Index>(i));
  require(groups.size() >= 2, "sigma: at least two classes are required");
  SigmaReport rep;
  bool any_intra = false;
  for (const auto& [label, rows] : groups) {
    if (rows.size() < 2) {
      rep.excluded_classes.push_back(label);
      continue;
    }
    any_intra = true;
    for (std::size_t a = 0; a < rows.size(); ++a)
      for (std::size_t b = a + 1; b < rows.size(); ++b)
        rep.max_intra = std::max(rep.max_intra, (vectors.row(rows[a]) - vectors.row(rows[b])).norm());
  }
  require(any_intra, "sigma: every class has a single sample");
  rep.min_inter = std::numeric_limits<double>::infinity();
  for (auto i = groups.begin(); i != groups.end(); ++i) {
    for (auto j = std::next(i); j != groups.end(); ++j) {
      for (Eigen::Index a : i->second)
        for (Eigen::Index b : j->second) rep.min_inter = std::min(rep.min_inter, (vectors.row(a) - vectors.row(b)).norm());
    }
  }
  if (rep.min_inter == 0.0) {
    rep.infinite = true;
    rep.sigma = std::numeric_limits<double>::infinity();
  } else {
    rep.sigma = rep.max_intra / rep.min_inter;
  }
  return rep;
}

/// Indexes items through the model (or the bare backbone for kBackboneOnly).
inline EmbeddingGallery extract_features(const ProsModel& model, const DatasetManifest& manifest,
                                         const std::vector<Mat>& images, const std::vector<std::string>& ids,
                                         FeatureMode mode) {
  EmbeddingGallery g;
  g.vectors.resize(static_cast<Eigen::Index>(ids.size()), model.backbone->config().proj_dim);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::size_t index = manifest.index_of(ids[i]);
    const auto& item = manifest.items()[index];
    const PatchEmbeddings patches = model.backbone->embed_patches(images[index]);
    g.vectors.row(static_cast<Eigen::Index>(i)) = model.feature(patches, mode);
    g.ids.push_back(item.sample_id);
    g.classes.push_back(item.class_name);
    g.domains.push_back(item.domain);
  }
  return g;
}

// Embedding file:
//   "PROSEMBD" | u32 version | u32 dim | u64 count
//   count x { str id | str class | str domain | f32[dim] }   (str = u32 len + bytes)
inline constexpr std::uint32_t kEmbeddingVersion = 1;

inline void write_embeddings(const std::string& path, const EmbeddingGallery& g) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  out.write("PROSEMBD", 8);
  io::write_pod(out, kEmbeddingVersion);
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(g.dim()));
  io::write_pod<std::uint64_t>(out, g.size());
  std::vector<float> buf(static_cast<std::size_t>(g.dim()));
  for (std::size_t i = 0; i < g.size(); ++i) {
    io::write_string(out, g.ids[i]);
    io::write_string(out, g.classes[i]);
    io::write_string(out, g.domains[i]);
    for (Eigen::Index c = 0; c < g.dim(); ++c) buf[static_cast<std::size_t>(c)] = static_cast<float>(g.vectors(static_cast<Eigen::Index>(i), c));
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw ConfigError("failed writing '" + path + "'");
}

inline EmbeddingGallery read_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open embedding file '" + path + "'");
  char magic[8] = {};
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != "PROSEMBD") throw ConfigError("'" + path + "' is not an embedding file");
  const auto version = io::read_pod<std::uint32_t>(in, "embedding version");
  if (version != kEmbeddingVersion) throw ConfigError("'" + path + "' has unsupported version " + std::to_string(version));
  const auto dim = io::read_pod<std::uint32_t>(in, "embedding dim");
  const auto count = io::read_pod<std::uint64_t>(in, "embedding count");
  EmbeddingGallery g;
  g.vectors.resize(static_cast<Eigen::Index>(count), dim);
  std::vector<float> buf(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    g.ids.push_back(io::read_string(in, "embedding id"));
    g.classes.push_back(io::read_string(in, "embedding class"));
    g.domains.push_back(io::read_string(in, "embedding domain"));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(dim * sizeof(float)));
    if (!in) throw ConfigError("truncated embedding record in '" + path + "'");
    for (std::uint32_t c = 0; c < dim; ++c) g.vectors(static_cast<Eigen::Index>(i), c) = buf[c];
  }
  return g;
}

inline nlohmann::json to_json(const MetricValue& m) {
  return {{"value", m.value}, {"k", m.k}, {"evaluated", m.evaluated}, {"excluded", m.excluded}, {"clipped", m.clipped}};
}

/// mAP@k and Prec@k for every requested k, plus mAP@all.
inline nlohmann::json retrieval_metrics(const EmbeddingGallery& queries, const EmbeddingGallery& gallery,
                                        const std::vector<std::size_t>& ks) {
  const auto results = rank_all(queries, gallery);
  const Relevance rel = class_relevance(queries.classes, gallery);
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t k : ks) {
    j["map@" + std::to_string(k)] = to_json(map_at_k(results, rel, k));
    j["prec@" + std::to_string(k)] = to_json(prec_at_k(results, rel, k));
  }
  j["map@all"] = to_json(map_all(results, rel));
  j["queries"] = queries.size();
  j["gallery_size"] = gallery.size();
  return j;
}

}  // namespace pros
