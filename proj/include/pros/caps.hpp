// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0
//
// Content-aware prompt simulator: a small randomly initialized transformer
// over [PT_d, PT_s, surviving dp..., surviving sp..., patches...]. The
// dynamic prompts are read back at the template positions.

#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "pros/backbone.hpp"
#include "pros/errors.hpp"
#include "pros/nn.hpp"
#include "pros/prompts.hpp"

namespace pros {

struct CaPSConfig {
  int num_layers = 2;
  int num_heads = 8;
  int mlp_ratio = 4;
  int width = 64;      // must equal the backbone token width
  int input_dim = 64;  // patch token width; != width adds an input projection
  int domain_prompts = 1;
  int semantic_prompts = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_layers < 1) throw ConfigError("caps.num_layers must be at least 1");
    if (num_heads < 1 || width % num_heads != 0) throw ConfigError("caps.width must be divisible by caps.num_heads");
    if (mlp_ratio < 1) throw ConfigError("caps.mlp_ratio must be positive");
    if (input_dim < 1) throw ConfigError("caps.input_dim must be positive");
    if (domain_prompts < 1 || semantic_prompts < 1) throw ConfigError("caps prompt lengths must be at least 1");
  }

  friend bool operator==(const CaPSConfig&, const CaPSConfig&) = default;
};

inline void to_json(nlohmann::json& j, const CaPSConfig& c) {
  j = {{"num_layers", c.num_layers}, {"num_heads", c.num_heads}, {"mlp_ratio", c.mlp_ratio},
       {"width", c.width},           {"input_dim", c.input_dim}, {"domain_prompts", c.domain_prompts},
       {"semantic_prompts", c.semantic_prompts}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, CaPSConfig& c) {
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.width = j.value("width", c.width);
  c.input_dim = j.value("input_dim", c.input_dim);
  c.domain_prompts = j.value("domain_prompts", c.domain_prompts);
  c.semantic_prompts = j.value("semantic_prompts", c.semantic_prompts);
  c.seed = j.value("seed", c.seed);
}

struct SimulatorTrace {
  Mat patch_tokens;
  nn::Encoder::Cache encoder;
  std::vector<Eigen::Index> positions;
  Eigen::Index rows = 0;
  CaDPPair output;
};

struct TemplateGrads {
  Mat domain_template;
  Mat semantic_template;
};

class Simulator {
 public:
  Simulator() = default;

  /// Positions are fixed per slot (templates, dp j, sp c, patch p) so a
  /// unit keeps its positional vector when its neighbours are discarded.
  Simulator(const CaPSConfig& config, Eigen::Index num_domains, Eigen::Index num_classes, Eigen::Index num_patches)
      : config_(config), num_domains_(num_domains), num_classes_(num_classes), num_patches_(num_patches) {
    config_.validate();
    Rng rng(derive_seed(config_.seed, 0xCA95));
    const double stddev = 0.02;
    encoder = nn::Encoder::init(rng, config_.num_layers, config_.width, config_.num_heads, config_.mlp_ratio, false,
                                stddev);
    positions = truncated_normal_matrix(rng, num_templates() + num_domains + num_classes + num_patches, config_.width,
                                        stddev);
    if (config_.input_dim != config_.width) {
      input_proj = nn::Linear::init(rng, config_.input_dim, config_.width,
                                    1.0 / std::sqrt(static_cast<double>(config_.input_dim)));
    }
  }

  const CaPSConfig& config() const { return config_; }
  Eigen::Index num_domains() const { return num_domains_; }
  Eigen::Index num_classes() const { return num_classes_; }
  Eigen::Index num_patches() const { return num_patches_; }
  Eigen::Index num_templates() const { return config_.domain_prompts + config_.semantic_prompts; }
  bool has_input_projection() const { return input_proj.weight.size() != 0; }

  CaDPPair simulate(const PromptTemplates& templates, const SelectedUnits& units, const PatchEmbeddings& patches) const {
    return run(templates, units, patches, nullptr);
  }

  SimulatorTrace simulate_traced(const PromptTemplates& templates, const SelectedUnits& units,
                                 const PatchEmbeddings& patches) const {
    SimulatorTrace trace;
    trace.output = run(templates, units, patches, &trace);
    return trace;
  }

  /// Backpropagates dL/d(P_d, P_s). Accumulates weight gradients into
  /// `grad` when given and returns the gradients of the two templates.
  TemplateGrads backward(const SimulatorTrace& trace, const Mat& d_domain, const Mat& d_semantic,
                         Simulator* grad) const {
    const Eigen::Index nd = config_.domain_prompts;
    const Eigen::Index ns = config_.semantic_prompts;
    Mat dy = Mat::Zero(trace.rows, config_.width);
    dy.topRows(nd) = d_domain;
    dy.middleRows(nd, ns) = d_semantic;
    Mat dx = encoder.backward(trace.encoder, std::move(dy), grad ? &grad->encoder : nullptr);
    if (grad != nullptr) {
      for (std::size_t i = 0; i < trace.positions.size(); ++i)
        grad->positions.row(trace.positions[i]) += dx.row(static_cast<Eigen::Index>(i));
      if (has_input_projection()) {
        input_proj.backward(trace.patch_tokens, dx.bottomRows(trace.patch_tokens.rows()), &grad->input_proj);
      }
    }
    return TemplateGrads{dx.topRows(nd), dx.middleRows(nd, ns)};
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "positions", self.positions);
    if (self.input_proj.weight.size() != 0) nn::Linear::visit(self.input_proj, prefix + "input_proj.", f);
    nn::Encoder::visit(self.encoder, prefix + "encoder.", f);
  }

  nn::Encoder encoder;
  Mat positions;
  nn::Linear input_proj;

 private:
  CaDPPair run(const PromptTemplates& templates, const SelectedUnits& units, const PatchEmbeddings& patches,
               SimulatorTrace* trace) const {
    const Eigen::Index w = config_.width;
    const Eigen::Index nd = config_.domain_prompts;
    const Eigen::Index ns = config_.semantic_prompts;
    auto check_width = [&](const Mat& m, Eigen::Index width, const char* what) {
      if (m.rows() > 0 && m.cols() != width) {
        throw PreconditionError(std::string("simulate: ") + what + " has width " + std::to_string(m.cols()) +
                                ", expected " + std::to_string(width));
      }
    };
    check_width(templates.domain_template, w, "domain template");
    check_width(templates.semantic_template, w, "semantic template");
    check_width(units.domain, w, "domain units");
    check_width(units.semantic, w, "semantic units");
    check_width(patches.tokens, config_.input_dim, "patch tokens");
    require(templates.domain_template.rows() == nd && templates.semantic_template.rows() == ns,
            "simulate: template lengths do not match the simulator configuration");
    require(patches.tokens.rows() == num_patches_, "simulate: expected " + std::to_string(num_patches_) + " patches");

    const Eigen::Index n_units = units.count();
    const Eigen::Index rows = nd + ns + n_units + patches.tokens.rows();
    std::vector<Eigen::Index> pos;
    pos.reserve(static_cast<std::size_t>(rows));
    for (Eigen::Index i = 0; i < nd + ns; ++i) pos.push_back(i);
    for (Eigen::Index r : units.domain_rows) {
      require(r < num_domains_, "simulate: domain unit index outside the simulator's range");
      pos.push_back(nd + ns + r);
    }
    for (Eigen::Index r : units.semantic_rows) {
      require(r < num_classes_, "simulate: semantic unit index outside the simulator's range");
      pos.push_back(nd + ns + num_domains_ + r);
    }
    for (Eigen::Index p = 0; p < patches.tokens.rows(); ++p) pos.push_back(nd + ns + num_domains_ + num_classes_ + p);
    require(static_cast<Eigen::Index>(pos.size()) == rows, "simulate: unit rows do not match selected units");

    Mat x(rows, w);
    x.topRows(nd) = templates.domain_template;
    x.middleRows(nd, ns) = templates.semantic_template;
    if (units.domain.rows() > 0) x.middleRows(nd + ns, units.domain.rows()) = units.domain;
    if (units.semantic.rows() > 0) x.middleRows(nd + ns + units.domain.rows(), units.semantic.rows()) = units.semantic;
    x.bottomRows(patches.tokens.rows()) = has_input_projection() ? input_proj.forward(patches.tokens) : patches.tokens;
    for (Eigen::Index i = 0; i < rows; ++i) x.row(i) += positions.row(pos[static_cast<std::size_t>(i)]);

    Mat y = encoder.forward(std::move(x), trace ? &trace->encoder : nullptr, "prompt simulator");
    CaDPPair out{y.topRows(nd), y.middleRows(nd, ns)};
    if (!out.domain.allFinite() || !out.semantic.allFinite()) throw NumericError("simulate: non-finite prompts");
    if (trace != nullptr) {
      trace->patch_tokens = patches.tokens;
      trace->positions = std::move(pos);
      trace->rows = rows;
    }
    return out;
  }

  CaPSConfig config_;
  Eigen::Index num_domains_ = 0;
  Eigen::Index num_classes_ = 0;
  Eigen::Index num_patches_ = 0;
};

/// Retrieval-time image input [cls, P_d, P_s, patches].
inline PromptedSequence assemble_inference_input(const Mat& cls, const CaDPPair& cadp, const PatchEmbeddings& patches) {
  const Eigen::Index w = cls.cols();
  if (cadp.domain.cols() != w || cadp.semantic.cols() != w) {
    throw PreconditionError("assemble_inference_input: dynamic prompts have width " +
                            std::to_string(cadp.domain.cols()) + "/" + std::to_string(cadp.semantic.cols()) +
                            ", expected " + std::to_string(w));
  }
  return PromptedSequence{cls, vstack(cadp.domain, cadp.semantic), patches};
}

}  // namespace pros
