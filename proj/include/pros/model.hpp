// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pros/backbone.hpp"
#include "pros/caps.hpp"
#include "pros/prompts.hpp"

namespace pros {

/// Component ablations; each flag is independent.
struct Ablations {
  bool no_sp = false;         // no semantic units
  bool no_dp = false;         // no domain units
  bool no_mask = false;       // no relevance mask while training the simulator
  bool no_caps = false;       // retrieval bypasses the simulator
  bool no_cls_train = false;  // cls token stays at its pretrained value

  UnitUsage usage() const { return UnitUsage{!no_dp, !no_sp}; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    if (no_sp) out.emplace_back("no_sp");
    if (no_dp) out.emplace_back("no_dp");
    if (no_mask) out.emplace_back("no_mask");
    if (no_caps) out.emplace_back("no_caps");
    if (no_cls_train) out.emplace_back("no_cls_train");
    return out;
  }

  void set(const std::string& name) {
    if (name == "no_sp") no_sp = true;
    else if (name == "no_dp") no_dp = true;
    else if (name == "no_mask") no_mask = true;
    else if (name == "no_caps") no_caps = true;
    else if (name == "no_cls_train") no_cls_train = true;
    else throw ConfigError("unknown ablation '" + name + "' (expected no_sp, no_dp, no_mask, no_caps, no_cls_train)");
  }

  /// Parses a comma-separated flag list such as "no_mask,no_sp".
  static Ablations parse(const std::string& list) {
    Ablations a;
    std::stringstream in(list);
    std::string item;
    while (std::getline(in, item, ',')) {
      if (!item.empty()) a.set(item);
    }
    if (a.no_sp && a.no_dp) throw ConfigError("no_sp and no_dp together leave no prompt units");
    return a;
  }

  friend bool operator==(const Ablations&, const Ablations&) = default;
};

enum class FeatureMode {
  kFull,          // [cls, P_d, P_s, patches] with the simulator over all units
  kUnitsOnly,     // [cls, all units, patches]
  kBackboneOnly,  // [pretrained cls, patches]
};

inline const char* to_string(FeatureMode m) {
  switch (m) {
    case FeatureMode::kFull: return "full";
    case FeatureMode::kUnitsOnly: return "units_only";
    case FeatureMode::kBackboneOnly: return "backbone_only";
  }
  return "?";
}

/// Frozen backbone plus all learned state.
struct ProsModel {
  std::shared_ptr<const Backbone> backbone;
  PromptParameters prompts;
  std::optional<Simulator> simulator;
  std::vector<std::string> domains;  // source-domain vocabulary, index = dp row
  std::vector<std::string> classes;  // training-class vocabulary, index = sp row
  Ablations ablations;

  FeatureMode retrieval_mode() const {
    if (ablations.no_caps || !simulator) return FeatureMode::kUnitsOnly;
    return FeatureMode::kFull;
  }

  MaskSpec full_mask() const {
    return MaskSpec::keep_all(static_cast<std::size_t>(prompts.units.num_domains()),
                              static_cast<std::size_t>(prompts.units.num_classes()));
  }

  /// Unit-normalized retrieval feature of one image.
  RowVec feature(const PatchEmbeddings& patches, FeatureMode mode) const {
    const Mat& cls = prompts.templates.cls;
    switch (mode) {
      case FeatureMode::kBackboneOnly:
        return unit_normalized(backbone->forward_image(PromptedSequence{backbone->pretrained_cls(), Mat(0, cls.cols()), patches}).vector);
      case FeatureMode::kUnitsOnly: {
        const SelectedUnits units = apply_mask(prompts.units, full_mask(), ablations.usage());
        return unit_normalized(
            backbone->forward_image(PromptedSequence{cls, vstack(units.domain, units.semantic), patches}).vector);
      }
      case FeatureMode::kFull: {
        if (!simulator) throw PreconditionError("full retrieval needs simulator weights (run the second stage first)");
        const SelectedUnits units = apply_mask(prompts.units, full_mask(), ablations.usage());
        const CaDPPair cadp = simulator->simulate(prompts.templates, units, patches);
        return unit_normalized(backbone->forward_image(assemble_inference_input(cls, cadp, patches)).vector);
      }
    }
    throw PreconditionError("unknown feature mode");
  }
};

}  // namespace pros
