// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0

#include "pros/caps.hpp"

#include "test_util.hpp"

using namespace pros;
using pros::testing::numeric_grad;
using pros::testing::random_mat;
using pros::testing::relative_error;

namespace {

struct Fixture {
  CaPSConfig config;
  PromptTemplates templates;
  PromptUnitBank bank;

  Fixture() {
    templates.domain_template = random_mat(1, 1, 64, 0.02);
    templates.semantic_template = random_mat(2, 1, 64, 0.02);
    templates.cls = random_mat(3, 1, 64);
    templates.text_prompts = random_mat(4, 16, 32, 0.02);
    bank.domain = random_mat(5, 4, 64, 0.02);
    bank.semantic = random_mat(6, 10, 64, 0.02);
  }
};

}  // namespace

TEST_CASE("one-and-one dynamic prompts come out as two vectors of token width") {
  Fixture fx;
  const Simulator sim(fx.config, 4, 10, 16);
  const CaDPPair out = sim.simulate(fx.templates, apply_mask(fx.bank, MaskSpec::keep_all(4, 10)),
                                    PatchEmbeddings{random_mat(7, 16, 64)});
  CHECK(out.domain.rows() == 1);
  CHECK(out.semantic.rows() == 1);
  CHECK(out.domain.cols() == 64);
  CHECK(out.semantic.cols() == 64);
}

TEST_CASE("dynamic prompts depend on the image content") {
  Fixture fx;
  const Simulator sim(fx.config, 4, 10, 16);
  const SelectedUnits units = apply_mask(fx.bank, build_mask(1, 2, 4, 10, MaskMode::kRelevance));
  const CaDPPair a = sim.simulate(fx.templates, units, PatchEmbeddings{random_mat(8, 16, 64)});
  const CaDPPair b = sim.simulate(fx.templates, units, PatchEmbeddings{random_mat(9, 16, 64)});
  const CaDPPair a2 = sim.simulate(fx.templates, units, PatchEmbeddings{random_mat(8, 16, 64)});
  CHECK((a.domain - b.domain).cwiseAbs().maxCoeff() > 0.0);
  CHECK((a.semantic - b.semantic).cwiseAbs().maxCoeff() > 0.0);
  CHECK(a.domain == a2.domain);
  CHECK(a.semantic == a2.semantic);
}

TEST_CASE("pairwise dynamic-prompt distances over a batch are not all zero") {
  Fixture fx;
  const Simulator sim(fx.config, 4, 10, 16);
  const SelectedUnits units = apply_mask(fx.bank, MaskSpec::keep_all(4, 10));
  std::vector<Mat> outs;
  for (std::uint64_t s = 0; s < 5; ++s) outs.push_back(sim.simulate(fx.templates, units, PatchEmbeddings{random_mat(100 + s, 16, 64)}).domain);
  double total = 0.0;
  for (std::size_t i = 0; i < outs.size(); ++i)
    for (std::size_t j = i + 1; j < outs.size(); ++j) total += (outs[i] - outs[j]).norm();
  CHECK(total > 0.0);
}

TEST_CASE("simulator initialisation is seeded") {
  Fixture fx;
  CaPSConfig other = fx.config;
  other.seed = 1;
  const Simulator a(fx.config, 4, 10, 16);
  const Simulator b(fx.config, 4, 10, 16);
  const Simulator c(other, 4, 10, 16);
  CHECK(a.positions == b.positions);
  CHECK(a.encoder.blocks[0].attn.qkv.weight == b.encoder.blocks[0].attn.qkv.weight);
  CHECK(a.positions != c.positions);
  CHECK(a.positions.rows() == 2 + 4 + 10 + 16);
}

TEST_CASE("simulator rejects inputs of the wrong width") {
  Fixture fx;
  const Simulator sim(fx.config, 4, 10, 16);
  const SelectedUnits units = apply_mask(fx.bank, MaskSpec::keep_all(4, 10));
  CHECK_THROWS_AS(sim.simulate(fx.templates, units, PatchEmbeddings{random_mat(8, 16, 63)}), PreconditionError);
  PromptTemplates bad = fx.templates;
  bad.domain_template = random_mat(1, 1, 32);
  CHECK_THROWS_AS(sim.simulate(bad, units, PatchEmbeddings{random_mat(8, 16, 64)}), PreconditionError);
}

TEST_CASE("simulator configuration validation") {
  CaPSConfig c;
  c.num_layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = CaPSConfig{};
  c.num_heads = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("a narrower patch width adds an input projection") {
  Fixture fx;
  CaPSConfig c = fx.config;
  c.input_dim = 48;
  const Simulator sim(c, 4, 10, 16);
  CHECK(sim.has_input_projection());
  const CaDPPair out = sim.simulate(fx.templates, apply_mask(fx.bank, MaskSpec::keep_all(4, 10)),
                                    PatchEmbeddings{random_mat(7, 16, 48)});
  CHECK(out.domain.cols() == 64);
}

TEST_CASE("simulator backward agrees with finite differences") {
  Fixture fx;
  CaPSConfig c = fx.config;
  c.input_dim = 48;
  Simulator sim(c, 4, 10, 16);
  const SelectedUnits units = apply_mask(fx.bank, build_mask(0, 3, 4, 10, MaskMode::kRelevance));
  const PatchEmbeddings patches{random_mat(11, 16, 48)};
  const Mat wd = random_mat(12, 1, 64);
  const Mat ws = random_mat(13, 1, 64);
  auto f = [&] {
    const CaDPPair o = sim.simulate(fx.templates, units, patches);
    return (o.domain.array() * wd.array()).sum() + (o.semantic.array() * ws.array()).sum();
  };
  const SimulatorTrace trace = sim.simulate_traced(fx.templates, units, patches);
  Simulator grad = nn::zeros_like(sim);
  const TemplateGrads tg = sim.backward(trace, wd, ws, &grad);
  CHECK(relative_error(tg.domain_template, numeric_grad(fx.templates.domain_template, f)) < 1e-6);
  CHECK(relative_error(tg.semantic_template, numeric_grad(fx.templates.semantic_template, f)) < 1e-6);
  CHECK(relative_error(grad.positions, numeric_grad(sim.positions, f)) < 1e-6);
  CHECK(relative_error(grad.input_proj.weight, numeric_grad(sim.input_proj.weight, f)) < 1e-6);
  CHECK(relative_error(grad.encoder.blocks[1].mlp.fc2.weight, numeric_grad(sim.encoder.blocks[1].mlp.fc2.weight, f)) < 1e-6);
  // hidden units keep a zero positional gradient
  CHECK(grad.positions.row(2 + 0).isZero(0.0));
  CHECK(grad.positions.row(2 + 4 + 3).isZero(0.0));
}

TEST_CASE("inference input is [cls, P_d, P_s, patches]") {
  Fixture fx;
  const Simulator sim(fx.config, 4, 10, 16);
  const PatchEmbeddings p{random_mat(7, 16, 64)};
  const CaDPPair cadp = sim.simulate(fx.templates, apply_mask(fx.bank, MaskSpec::keep_all(4, 10)), p);
  const PromptedSequence seq = assemble_inference_input(fx.templates.cls, cadp, p);
  CHECK(seq.length() == 19);
  CHECK(seq.stacked().row(1) == cadp.domain.row(0));
  CHECK(seq.stacked().row(2) == cadp.semantic.row(0));
  // same layout as the stage-one sequence
  const PromptedSequence pul =
      assemble_pul_input(fx.templates.cls, fx.bank, build_mask(0, 0, 4, 10, MaskMode::kIrrelevance), p);
  CHECK(pul.length() == seq.length());
  CHECK_THROWS_AS(assemble_inference_input(fx.templates.cls, CaDPPair{random_mat(1, 1, 32), cadp.semantic}, p),
                  PreconditionError);
}

TEST_CASE("full-bank simulator input has 2 + K + C + patches rows") {
  Fixture fx;
  const Simulator sim(fx.config, 4, 10, 16);
  const SimulatorTrace t = sim.simulate_traced(fx.templates, apply_mask(fx.bank, MaskSpec::keep_all(4, 10)),
                                               PatchEmbeddings{random_mat(7, 16, 64)});
  CHECK(t.rows == 2 + 4 + 10 + 16);
}
