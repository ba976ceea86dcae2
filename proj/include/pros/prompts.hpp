// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pros/backbone.hpp"
#include "pros/errors.hpp"
#include "pros/linalg.hpp"

namespace pros {

/// One learnable token per source domain (rows of `domain`) and per
/// training class (rows of `semantic`).
struct PromptUnitBank {
  Mat domain;    // K x embed_dim
  Mat semantic;  // |C_train| x embed_dim

  Eigen::Index num_domains() const { return domain.rows(); }
  Eigen::Index num_classes() const { return semantic.rows(); }

  void validate() const {
    require(num_domains() >= 2, "prompt bank needs at least 2 source domains, got " + std::to_string(num_domains()));
    require(num_classes() >= 2, "prompt bank needs at least 2 training classes, got " + std::to_string(num_classes()));
    require(domain.cols() == semantic.cols(), "domain and semantic units must share a width");
    if (!domain.allFinite() || !semantic.allFinite()) throw NumericError("prompt bank holds non-finite values");
  }
};

/// Learnable templates: simulator query tokens, caption prompts and cls.
struct PromptTemplates {
  Mat domain_template;    // n_d x embed_dim
  Mat semantic_template;  // n_s x embed_dim
  Mat text_prompts;       // N_t x text_dim
  Mat cls;                // 1 x embed_dim
};

/// Content-aware dynamic prompts emitted by the simulator.
struct CaDPPair {
  Mat domain;    // n_d x embed_dim
  Mat semantic;  // n_s x embed_dim
};

enum class MaskMode {
  kIrrelevance,  // keep only the sample's own units
  kRelevance,    // hide the sample's own units
  kKeepAll,
};

inline const char* to_string(MaskMode mode) {
  switch (mode) {
    case MaskMode::kIrrelevance: return "irrelevance";
    case MaskMode::kRelevance: return "relevance";
    case MaskMode::kKeepAll: return "keep_all";
  }
  return "?";
}

struct MaskSpec {
  std::vector<std::uint8_t> domain;
  std::vector<std::uint8_t> semantic;
  MaskMode mode = MaskMode::kKeepAll;

  static MaskSpec keep_all(std::size_t num_domains, std::size_t num_classes) {
    return MaskSpec{std::vector<std::uint8_t>(num_domains, 1), std::vector<std::uint8_t>(num_classes, 1),
                    MaskMode::kKeepAll};
  }
};

inline MaskSpec build_mask(std::size_t domain_idx, std::size_t class_idx, std::size_t num_domains,
                           std::size_t num_classes, MaskMode mode) {
  require(domain_idx < num_domains,
          "domain index " + std::to_string(domain_idx) + " out of range [0, " + std::to_string(num_domains) + ")");
  require(class_idx < num_classes,
          "class index " + std::to_string(class_idx) + " out of range [0, " + std::to_string(num_classes) + ")");
  if (mode == MaskMode::kKeepAll) return MaskSpec::keep_all(num_domains, num_classes);
  const std::uint8_t on = mode == MaskMode::kIrrelevance ? 1 : 0;
  MaskSpec m{std::vector<std::uint8_t>(num_domains, 1 - on), std::vector<std::uint8_t>(num_classes, 1 - on), mode};
  m.domain[domain_idx] = on;
  m.semantic[class_idx] = on;
  return m;
}

/// Which unit groups take part at all (the no_dp / no_sp ablations).
struct UnitUsage {
  bool domain = true;
  bool semantic = true;
};

/// Surviving units in original index order, plus the rows they came from.
struct SelectedUnits {
  Mat domain;
  Mat semantic;
  std::vector<Eigen::Index> domain_rows;
  std::vector<Eigen::Index> semantic_rows;

  Eigen::Index count() const { return domain.rows() + semantic.rows(); }
};

namespace detail {
inline Mat gather_rows(const Mat& src, const std::vector<Eigen::Index>& rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
  return out;
}
}  // namespace detail

/// Discard semantics: units whose mask entry is 0 contribute no token.
inline SelectedUnits apply_mask(const PromptUnitBank& bank, const MaskSpec& mask, UnitUsage usage = {}) {
  require(mask.domain.size() == static_cast<std::size_t>(bank.num_domains()),
          "domain mask has length " + std::to_string(mask.domain.size()) + ", bank has " +
              std::to_string(bank.num_domains()) + " domain units");
  require(mask.semantic.size() == static_cast<std::size_t>(bank.num_classes()),
          "semantic mask has length " + std::to_string(mask.semantic.size()) + ", bank has " +
              std::to_string(bank.num_classes()) + " semantic units");
  SelectedUnits s;
  if (usage.domain) {
    for (std::size_t i = 0; i < mask.domain.size(); ++i)
      if (mask.domain[i] != 0) s.domain_rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (usage.semantic) {
    for (std::size_t i = 0; i < mask.semantic.size(); ++i)
      if (mask.semantic[i] != 0) s.semantic_rows.push_back(static_cast<Eigen::Index>(i));
  }
  s.domain = detail::gather_rows(bank.domain, s.domain_rows);
  s.semantic = detail::gather_rows(bank.semantic, s.semantic_rows);
  return s;
}

inline Mat vstack(const Mat& a, const Mat& b) {
  const Eigen::Index width = a.rows() > 0 ? a.cols() : b.cols();
  Mat out(a.rows() + b.rows(), width);
  if (a.rows() > 0) out.topRows(a.rows()) = a;
  if (b.rows() > 0) out.bottomRows(b.rows()) = b;
  return out;
}

/// Stage-one image input [cls, dp_d, sp_c, patches].
inline PromptedSequence assemble_pul_input(const Mat& cls, const PromptUnitBank& bank, const MaskSpec& mask,
                                           const PatchEmbeddings& patches, UnitUsage usage = {}) {
  require(mask.mode == MaskMode::kIrrelevance,
          std::string("assemble_pul_input needs an irrelevance mask, got ") + to_string(mask.mode));
  const SelectedUnits s = apply_mask(bank, mask, usage);
  return PromptedSequence{cls, vstack(s.domain, s.semantic), patches};
}

/// Every learnable prompt-side tensor of the model.
struct PromptParameters {
  PromptUnitBank units;
  PromptTemplates templates;

  /// Truncated-normal (std 0.02) init; cls starts from the backbone's value.
  static PromptParameters init(const Backbone& backbone, Eigen::Index num_domains, Eigen::Index num_classes,
                               int text_prompt_length, int domain_prompt_length, int semantic_prompt_length,
                               std::uint64_t seed) {
    require(text_prompt_length >= 1, "text prompt length must be at least 1");
    require(domain_prompt_length >= 1 && semantic_prompt_length >= 1, "dynamic prompt lengths must be at least 1");
    const auto& c = backbone.config();
    Rng rng(derive_seed(seed, 0x9E));
    PromptParameters p;
    p.units.domain = truncated_normal_matrix(rng, num_domains, c.embed_dim, 0.02);
    p.units.semantic = truncated_normal_matrix(rng, num_classes, c.embed_dim, 0.02);
    p.templates.domain_template = truncated_normal_matrix(rng, domain_prompt_length, c.embed_dim, 0.02);
    p.templates.semantic_template = truncated_normal_matrix(rng, semantic_prompt_length, c.embed_dim, 0.02);
    p.templates.text_prompts = truncated_normal_matrix(rng, text_prompt_length, c.text_dim, 0.02);
    p.templates.cls = backbone.pretrained_cls();
    p.units.validate();
    return p;
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "dp", self.units.domain);
    f(prefix + "sp", self.units.semantic);
    f(prefix + "cls", self.templates.cls);
    f(prefix + "text_prompts", self.templates.text_prompts);
    f(prefix + "pt_d", self.templates.domain_template);
    f(prefix + "pt_s", self.templates.semantic_template);
  }
};

}  // namespace pros
