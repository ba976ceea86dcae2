// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0

#include "pros/nn.hpp"

#include "test_util.hpp"

using namespace pros;
using pros::testing::numeric_grad;
using pros::testing::random_mat;
using pros::testing::relative_error;

namespace {

// Scalar probe: L = sum(W .* y) so that dL/dy = W.
double probe(const Mat& y, const Mat& w) { return (y.array() * w.array()).sum(); }

}  // namespace

TEST_CASE("linear forward matches a hand computation") {
  nn::Linear lin;
  lin.weight = Mat{{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}};
  lin.bias = Mat{{0.5, -0.5}};
  const Mat x{{1.0, 0.0, -1.0}};
  const Mat y = lin.forward(x);
  CHECK(y(0, 0) == Catch::Approx(1.0 - 5.0 + 0.5));
  CHECK(y(0, 1) == Catch::Approx(2.0 - 6.0 - 0.5));
}

TEST_CASE("linear backward agrees with finite differences") {
  Rng rng(3);
  nn::Linear lin = nn::Linear::init(rng, 5, 4, 0.5);
  Mat x = random_mat(4, 3, 5);
  const Mat w = random_mat(5, 3, 4);
  nn::Linear grad = nn::zeros_like(lin);
  const Mat dx = lin.backward(x, w, &grad);
  CHECK(relative_error(dx, numeric_grad(x, [&] { return probe(lin.forward(x), w); })) < 1e-7);
  CHECK(relative_error(grad.weight, numeric_grad(lin.weight, [&] { return probe(lin.forward(x), w); })) < 1e-7);
  CHECK(relative_error(grad.bias, numeric_grad(lin.bias, [&] { return probe(lin.forward(x), w); })) < 1e-7);
}

TEST_CASE("layer norm normalizes rows and backpropagates") {
  nn::LayerNorm ln = nn::LayerNorm::init(6);
  ln.gamma = random_mat(8, 1, 6);
  ln.beta = random_mat(9, 1, 6);
  Mat x = random_mat(10, 3, 6, 2.0);
  nn::LayerNorm unit = nn::LayerNorm::init(6);
  const Mat y = unit.forward(x, nullptr);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    CHECK(std::abs(y.row(r).mean()) < 1e-12);
    CHECK(y.row(r).squaredNorm() / 6.0 == Catch::Approx(1.0).epsilon(1e-4));
  }
  const Mat w = random_mat(11, 3, 6);
  nn::LayerNorm::Cache cache;
  ln.forward(x, &cache);
  nn::LayerNorm grad = nn::zeros_like(ln);
  const Mat dx = ln.backward(cache, w, &grad);
  auto f = [&] { return probe(ln.forward(x, nullptr), w); };
  CHECK(relative_error(dx, numeric_grad(x, f)) < 1e-6);
  CHECK(relative_error(grad.gamma, numeric_grad(ln.gamma, f)) < 1e-6);
  CHECK(relative_error(grad.beta, numeric_grad(ln.beta, f)) < 1e-6);
}

TEST_CASE("gelu uses the exact erf form") {
  CHECK(nn::gelu(0.0) == 0.0);
  CHECK(nn::gelu(1.0) == Catch::Approx(0.8413447460685429));
  CHECK(nn::gelu(-1.0) == Catch::Approx(-0.15865525393145707));
  for (double v : {-2.0, -0.3, 0.0, 0.7, 3.0}) {
    const double h = 1e-6;
    CHECK(nn::gelu_grad(v) == Catch::Approx((nn::gelu(v + h) - nn::gelu(v - h)) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("attention backward agrees with finite differences", "[nn]") {
  for (bool causal : {false, true}) {
    Rng rng(21);
    nn::SelfAttention attn = nn::SelfAttention::init(rng, 8, 2, causal, 0.4);
    Mat x = random_mat(22, 5, 8);
    const Mat w = random_mat(23, 5, 8);
    nn::SelfAttention::Cache cache;
    attn.forward(x, &cache);
    nn::SelfAttention grad = nn::zeros_like(attn);
    const Mat dx = attn.backward(cache, w, &grad);
    auto f = [&] { return probe(attn.forward(x, nullptr), w); };
    CHECK(relative_error(dx, numeric_grad(x, f)) < 1e-6);
    CHECK(relative_error(grad.qkv.weight, numeric_grad(attn.qkv.weight, f)) < 1e-6);
    CHECK(relative_error(grad.out.weight, numeric_grad(attn.out.weight, f)) < 1e-6);
  }
}

TEST_CASE("causal attention ignores later tokens") {
  Rng rng(30);
  nn::SelfAttention attn = nn::SelfAttention::init(rng, 8, 2, true, 0.4);
  Mat x = random_mat(31, 4, 8);
  const Mat before = attn.forward(x, nullptr);
  x.row(3) += random_mat(32, 1, 8);
  const Mat after = attn.forward(x, nullptr);
  CHECK(before.topRows(3) == after.topRows(3));
  CHECK(before.row(3) != after.row(3));
}

TEST_CASE("encoder backward agrees with finite differences") {
  Rng rng(40);
  nn::Encoder enc = nn::Encoder::init(rng, 2, 8, 2, 2, false, 0.3);
  Mat x = random_mat(41, 4, 8);
  const Mat w = random_mat(42, 4, 8);
  nn::Encoder::Cache cache;
  enc.forward(x, &cache);
  nn::Encoder grad = nn::zeros_like(enc);
  const Mat dx = enc.backward(cache, w, &grad);
  auto f = [&] { return probe(enc.forward(x, nullptr), w); };
  CHECK(relative_error(dx, numeric_grad(x, f)) < 1e-6);
  CHECK(relative_error(grad.blocks[0].mlp.fc1.weight, numeric_grad(enc.blocks[0].mlp.fc1.weight, f)) < 1e-6);
  CHECK(relative_error(grad.blocks[1].ln1.gamma, numeric_grad(enc.blocks[1].ln1.gamma, f)) < 1e-6);
}

TEST_CASE("encoder reports the layer of a non-finite activation") {
  Rng rng(50);
  nn::Encoder enc = nn::Encoder::init(rng, 2, 8, 2, 2, false, 0.3);
  enc.blocks[1].mlp.fc2.bias(0, 0) = std::numeric_limits<double>::infinity();
  try {
    enc.forward(random_mat(51, 3, 8), nullptr, "image tower");
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
    CHECK(e.code() == ExitCode::kNumeric);
  }
}

TEST_CASE("adam first step moves each coordinate by about lr against the gradient sign") {
  nn::Adam adam;
  Mat p = Mat::Zero(2, 3);
  const Mat g{{1.0, -2.0, 0.5}, {-0.1, 3.0, -4.0}};
  adam.begin_step();
  adam.update("p", p, g, 0.01);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    CHECK(p.data()[i] == Catch::Approx(-0.01 * (g.data()[i] > 0 ? 1.0 : -1.0)).epsilon(1e-6));
  }
}

TEST_CASE("row-sparse adam leaves untouched rows bit-identical") {
  nn::Adam adam;
  Mat p = random_mat(60, 4, 3);
  const Mat before = p;
  const Mat g = random_mat(61, 4, 3);
  const std::vector<Eigen::Index> rows{2};
  for (int i = 0; i < 3; ++i) {
    adam.begin_step();
    adam.update("p", p, g, 0.1, &rows);
  }
  CHECK(p.row(0) == before.row(0));
  CHECK(p.row(1) == before.row(1));
  CHECK(p.row(3) == before.row(3));
  CHECK(p.row(2) != before.row(2));
}

TEST_CASE("zero learning rate is an identity update") {
  nn::Adam adam;
  Mat p = random_mat(70, 3, 3);
  const Mat before = p;
  adam.begin_step();
  adam.update("p", p, random_mat(71, 3, 3), 0.0);
  CHECK(p == before);
}

TEST_CASE("adam rejects a gradient of the wrong shape") {
  nn::Adam adam;
  Mat p = Mat::Zero(2, 2);
  adam.begin_step();
  CHECK_THROWS_AS(adam.update("p", p, Mat::Zero(3, 2), 0.1), PreconditionError);
}

TEST_CASE("parameter count and zeros_like cover every tensor") {
  Rng rng(80);
  const nn::Block block = nn::Block::init(rng, 8, 2, 4, false, 0.1);
  // ln1 + ln2: 2*16; qkv: 8*24+24; out: 8*8+8; fc1: 8*32+32; fc2: 32*8+8
  CHECK(nn::parameter_count(block) == 32 + 216 + 72 + 288 + 264);
  const nn::Block z = nn::zeros_like(block);
  CHECK(z.mlp.fc1.weight.isZero(0.0));
  CHECK(z.ln1.gamma.isZero(0.0));
}
