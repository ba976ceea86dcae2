// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary helpers and a named-tensor archive:
//
//   magic[8] | u32 version | u64 meta_len | meta (JSON, UTF-8)
//   u64 count | count x { u32 name_len | name | u64 rows | u64 cols | f64[rows*cols] }

#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pros/errors.hpp"
#include "pros/linalg.hpp"

namespace pros::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw ConfigError("truncated file while reading " + what);
  return value;
}

inline void write_string(std::ostream& out, std::string_view s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const std::string& what) {
  const auto n = read_pod<std::uint32_t>(in, what);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw ConfigError("truncated file while reading " + what);
  return s;
}

struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Mat>> tensors;

  void add(std::string name, Mat tensor) { tensors.emplace_back(std::move(name), std::move(tensor)); }

  const Mat* find(std::string_view name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }

  const Mat& at(std::string_view name) const {
    const Mat* t = find(name);
    if (t == nullptr) throw ConfigError("archive is missing tensor '" + std::string(name) + "'");
    return *t;
  }
};

inline constexpr std::uint32_t kArchiveVersion = 1;

inline void write_archive(const std::string& path, const TensorArchive& archive, std::string_view magic) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  char tag[8] = {};
  std::memcpy(tag, magic.data(), std::min<std::size_t>(magic.size(), 8));
  out.write(tag, 8);
  write_pod(out, kArchiveVersion);
  const std::string meta = archive.meta.dump();
  write_pod<std::uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  write_pod<std::uint64_t>(out, archive.tensors.size());
  for (const auto& [name, t] : archive.tensors) {
    write_string(out, name);
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t.rows()));
    write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t.cols()));
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw ConfigError("failed writing '" + path + "'");
}

inline TensorArchive read_archive(const std::string& path, std::string_view magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  char tag[8] = {};
  in.read(tag, 8);
  char expected[8] = {};
  std::memcpy(expected, magic.data(), std::min<std::size_t>(magic.size(), 8));
  if (!in || std::memcmp(tag, expected, 8) != 0) {
    throw ConfigError("'" + path + "' is not a " + std::string(magic) + " file");
  }
  const auto version = read_pod<std::uint32_t>(in, "archive version");
  if (version != kArchiveVersion) {
    throw ConfigError("'" + path + "' has unsupported version " + std::to_string(version));
  }
  TensorArchive archive;
  const auto meta_len = read_pod<std::uint64_t>(in, "metadata length");
  std::string meta(meta_len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw ConfigError("truncated metadata in '" + path + "'");
  try {
    archive.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("corrupt metadata in '" + path + "': " + e.what());
  }
  const auto count = read_pod<std::uint64_t>(in, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = read_string(in, "tensor name");
    const auto rows = read_pod<std::uint64_t>(in, name);
    const auto cols = read_pod<std::uint64_t>(in, name);
    Mat t(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw ConfigError("truncated tensor '" + name + "' in '" + path + "'");
    archive.add(std::move(name), std::move(t));
  }
  return archive;
}

/// Copies archive tensors into a module's parameters, checking shapes.
template <typename Module>
void load_module(const TensorArchive& archive, const std::string& prefix, Module& module) {
  Module::visit(module, prefix, [&](const std::string& name, Mat& t) {
    const Mat& src = archive.at(name);
    if (src.rows() != t.rows() || src.cols() != t.cols()) {
      throw ConfigError("tensor '" + name + "' has shape " + shape_string(src) + ", expected " + shape_string(t));
    }
    t = src;
  });
}

template <typename Module>
void store_module(TensorArchive& archive, const std::string& prefix, const Module& module) {
  Module::visit(module, prefix, [&](const std::string& name, const Mat& t) { archive.add(name, t); });
}

}  // namespace pros::io
