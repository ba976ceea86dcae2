// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0

#include "pros/serialize.hpp"

#include "pros/nn.hpp"
#include "test_util.hpp"

using namespace pros;
using pros::testing::random_mat;

TEST_CASE("tensor archive round trip is bit exact") {
  pros::testing::TempDir dir("archive");
  io::TensorArchive a;
  a.meta = {{"kind", "test"}, {"n", 3}};
  a.add("x", random_mat(1, 3, 5));
  a.add("empty", Mat(0, 4));
  a.add("y", random_mat(2, 1, 1));
  io::write_archive(dir.file("a.bin"), a, "PROSTEST");
  const io::TensorArchive b = io::read_archive(dir.file("a.bin"), "PROSTEST");
  CHECK(b.meta == a.meta);
  REQUIRE(b.tensors.size() == 3);
  CHECK(b.at("x") == a.at("x"));
  CHECK(b.at("empty").rows() == 0);
  CHECK(b.at("empty").cols() == 4);
  CHECK(b.tensors[2].first == "y");
  CHECK_THROWS_AS(b.at("missing"), ConfigError);
}

TEST_CASE("archive readers reject the wrong magic") {
  pros::testing::TempDir dir("archive");
  io::TensorArchive a;
  a.add("x", random_mat(1, 2, 2));
  io::write_archive(dir.file("a.bin"), a, "PROSTEST");
  CHECK_THROWS_AS(io::read_archive(dir.file("a.bin"), "PROSCKPT"), ConfigError);
  CHECK_THROWS_AS(io::read_archive(dir.file("missing.bin"), "PROSTEST"), ConfigError);
}

TEST_CASE("truncated archives are reported") {
  pros::testing::TempDir dir("archive");
  io::TensorArchive a;
  a.add("x", random_mat(1, 8, 8));
  io::write_archive(dir.file("a.bin"), a, "PROSTEST");
  std::ifstream in(dir.file("a.bin"), std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::ofstream(dir.file("cut.bin"), std::ios::binary) << bytes.substr(0, bytes.size() - 16);
  try {
    io::read_archive(dir.file("cut.bin"), "PROSTEST");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
  }
}

TEST_CASE("unsupported archive versions are rejected") {
  pros::testing::TempDir dir("archive");
  {
    std::ofstream out(dir.file("v9.bin"), std::ios::binary);
    out.write("PROSTEST", 8);
    io::write_pod<std::uint32_t>(out, 9);
  }
  CHECK_THROWS_AS(io::read_archive(dir.file("v9.bin"), "PROSTEST"), ConfigError);
}

TEST_CASE("modules store and load by prefixed name") {
  Rng rng(4);
  const nn::Encoder e = nn::Encoder::init(rng, 1, 8, 2, 2, false, 0.02);
  io::TensorArchive a;
  io::store_module(a, "enc.", e);
  CHECK(a.find("enc.blocks.0.attn.qkv.weight") != nullptr);
  Rng other(5);
  nn::Encoder f = nn::Encoder::init(other, 1, 8, 2, 2, false, 0.02);
  io::load_module(a, "enc.", f);
  CHECK(f.blocks[0].attn.qkv.weight == e.blocks[0].attn.qkv.weight);
  Rng wide(6);
  nn::Encoder g = nn::Encoder::init(wide, 1, 16, 2, 2, false, 0.02);
  CHECK_THROWS_AS(io::load_module(a, "enc.", g), ConfigError);
}
