// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-stage prompt training with a shared mask-and-align objective.
//
//   stage 1 (PUL): input [cls, dp_d, sp_c, patches]; trains DP, SP, P_t, cls.
//   stage 2 (CSL): the simulator sees the units minus the sample's own
//                  (d, c) and emits [P_d, P_s]; input [cls, P_d, P_s, patches];
//                  trains PT_d, PT_s and the simulator.
//
// The objective is softmax cross-entropy over cosine similarities between
// the image feature and per-class caption features, scaled by 1/temperature.

#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pros/backbone.hpp"
#include "pros/caps.hpp"
#include "pros/errors.hpp"
#include "pros/model.hpp"
#include "pros/nn.hpp"
#include "pros/prompts.hpp"
#include "pros/protocol.hpp"
#include "pros/retrieval.hpp"
#include "pros/serialize.hpp"

namespace pros {

enum class Stage { kPUL, kCSL };

inline std::string to_string(Stage s) { return s == Stage::kPUL ? "pul" : "csl"; }

inline Stage parse_stage(const std::string& s) {
  if (s == "pul" || s == "PUL") return Stage::kPUL;
  if (s == "csl" || s == "CSL") return Stage::kCSL;
  throw ConfigError("unknown stage '" + s + "' (expected pul or csl)");
}

struct TrainConfig {
  Stage stage = Stage::kPUL;
  int epochs = 10;
  int early_stop_patience = 2;
  int batch_size = 50;
  double lr = 1e-3;
  double temperature = 0.01;
  std::uint64_t seed = 0;
  int text_prompt_length = 16;
  int eval_k = 200;          // validation mAP cutoff for early stopping
  int steps_per_epoch = 0;   // 0: ceil(train size / batch size)

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
    if (early_stop_patience < 0) throw ConfigError("train.early_stop_patience must be non-negative");
    if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (!(lr >= 0.0)) throw ConfigError("train.lr must be non-negative");
    if (!(temperature > 0.0)) throw ConfigError("train.temperature must be positive");
    if (text_prompt_length < 1) throw ConfigError("train.text_prompt_length must be at least 1");
    if (eval_k < 1) throw ConfigError("train.eval_k must be at least 1");
    if (steps_per_epoch < 0) throw ConfigError("train.steps_per_epoch must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"stage", to_string(c.stage)}, {"epochs", c.epochs}, {"early_stop_patience", c.early_stop_patience},
       {"batch_size", c.batch_size},  {"lr", c.lr},         {"lr_schedule", "cosine"},
       {"temperature", c.temperature}, {"seed", c.seed},    {"text_prompt_length", c.text_prompt_length},
       {"eval_k", c.eval_k},          {"steps_per_epoch", c.steps_per_epoch}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("stage")) c.stage = parse_stage(j.at("stage").get<std::string>());
  c.epochs = j.value("epochs", c.epochs);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  if (j.value("lr_schedule", std::string("cosine")) != "cosine") throw ConfigError("only the cosine lr schedule exists");
  c.temperature = j.value("temperature", c.temperature);
  c.seed = j.value("seed", c.seed);
  c.text_prompt_length = j.value("text_prompt_length", c.text_prompt_length);
  c.eval_k = j.value("eval_k", c.eval_k);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
}

/// Cosine decay from base_lr at step 0 towards zero at total_steps.
inline double cosine_lr(double base_lr, long step, long total_steps) {
  if (total_steps <= 0) return base_lr;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Captions and the alignment loss

inline std::string caption_for(const std::string& class_name) {
  return "a photo of " + class_name + " from {prompt} domain.";
}

/// Unit-normalized text feature per training class.
struct CaptionBank {
  Mat features;                  // |C| x proj_dim
  std::vector<TextTrace> traces;  // filled when built for backpropagation
  std::vector<double> norms;
};

inline CaptionBank build_caption_bank(const Backbone& backbone, const std::vector<std::string>& class_names,
                                      const Mat& text_prompts, bool traced = false) {
  require(!class_names.empty(), "caption bank needs at least one class name");
  std::set<std::string> unique;
  for (const auto& c : class_names) {
    if (!unique.insert(c).second) throw PreconditionError("duplicate class name '" + c + "' in caption bank");
  }
  CaptionBank bank;
  bank.features.resize(static_cast<Eigen::Index>(class_names.size()), backbone.config().proj_dim);
  for (std::size_t i = 0; i < class_names.size(); ++i) {
    const TextTokens tokens = tokenize(caption_for(class_names[i]));
    RowVec raw;
    if (traced) {
      bank.traces.push_back(backbone.encode_text_traced(tokens, text_prompts));
      raw = bank.traces.back().feature.vector;
    } else {
      raw = backbone.encode_text(tokens, text_prompts).vector;
    }
    bank.norms.push_back(raw.norm());
    bank.features.row(static_cast<Eigen::Index>(i)) = unit_normalized(raw);
  }
  return bank;
}

struct AlignResult {
  double loss = 0.0;
  RowVec d_feature;  // dL / d(raw image feature)
  Mat d_bank;        // dL / d(normalized caption features)
};

/// -log softmax_i(cos(f, g_i) / temperature)[label].
inline AlignResult align_loss_with_grad(const RowVec& feature, const Mat& bank, std::size_t label, double temperature) {
  if (!(temperature > 0.0)) throw PreconditionError("align_loss: temperature must be positive");
  require(label < static_cast<std::size_t>(bank.rows()), "align_loss: label " + std::to_string(label) + " out of range");
  require(feature.size() == bank.cols(), "align_loss: feature and caption widths differ");
  if (!feature.allFinite() || !bank.allFinite()) throw NumericError("align_loss: non-finite input");
  const double fnorm = feature.norm();
  if (!(fnorm > 0.0)) throw NumericError("align_loss: zero image feature");
  const RowVec f = feature / fnorm;
  Eigen::VectorXd cos(bank.rows());
  for (Eigen::Index i = 0; i < bank.rows(); ++i) cos(i) = f.dot(bank.row(i)) / bank.row(i).norm();
  const Eigen::VectorXd logits = cos / temperature;
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  AlignResult r;
  r.loss = lse - logits(static_cast<Eigen::Index>(label));
  Eigen::VectorXd dlogits = (logits.array() - lse).exp();
  dlogits(static_cast<Eigen::Index>(label)) -= 1.0;
  const Eigen::VectorXd dcos = dlogits / temperature;
  // bank rows are treated as unit vectors by the callers
  const RowVec df = dcos.transpose() * bank;
  r.d_feature = (df - f * f.dot(df)) / fnorm;
  r.d_bank = dcos * f;
  if (!std::isfinite(r.loss)) throw NumericError("align_loss: non-finite loss");
  return r;
}

inline double align_loss(const RowVec& feature, const Mat& bank, std::size_t label, double temperature) {
  Mat normed = bank;
  for (Eigen::Index i = 0; i < normed.rows(); ++i) normed.row(i) = unit_normalized(bank.row(i));
  return align_loss_with_grad(feature, normed, label, temperature).loss;
}

// ---------------------------------------------------------------------------
// Samples

struct TrainingSample {
  std::string sample_id;
  PatchEmbeddings patches;  // frozen embedding, computed once
  std::size_t domain = 0;   // index into the source-domain vocabulary
  std::size_t cls = 0;      // index into the training-class vocabulary
};

inline std::vector<TrainingSample> make_training_samples(const Backbone& backbone, const DatasetManifest& manifest,
                                                         const std::vector<Mat>& images,
                                                         const std::vector<std::string>& ids,
                                                         const std::vector<std::string>& domains,
                                                         const std::vector<std::string>& classes) {
  std::map<std::string, std::size_t> d_index;
  std::map<std::string, std::size_t> c_index;
  for (std::size_t i = 0; i < domains.size(); ++i) d_index[domains[i]] = i;
  for (std::size_t i = 0; i < classes.size(); ++i) c_index[classes[i]] = i;
  std::vector<TrainingSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const std::size_t index = manifest.index_of(id);
    const auto& item = manifest.items()[index];
    auto d = d_index.find(item.domain);
    auto c = c_index.find(item.class_name);
    if (d == d_index.end()) throw PreconditionError("sample " + id + " has domain '" + item.domain + "' outside the training domains");
    if (c == c_index.end()) throw PreconditionError("sample " + id + " has class '" + item.class_name + "' outside the training classes");
    out.push_back(TrainingSample{id, backbone.embed_patches(images[index]), d->second, c->second});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint

struct StageRecord {
  TrainConfig config;
  int best_epoch = 0;
  double best_validation_map = 0.0;
  int epochs_run = 0;
  std::vector<double> validation_history;
};

inline void to_json(nlohmann::json& j, const StageRecord& r) {
  j = {{"config", r.config},
       {"best_epoch", r.best_epoch},
       {"best_validation_map", r.best_validation_map},
       {"epochs_run", r.epochs_run},
       {"validation_history", r.validation_history}};
}

inline void from_json(const nlohmann::json& j, StageRecord& r) {
  r.config = j.at("config").get<TrainConfig>();
  r.best_epoch = j.value("best_epoch", 0);
  r.best_validation_map = j.value("best_validation_map", 0.0);
  r.epochs_run = j.value("epochs_run", 0);
  r.validation_history = j.value("validation_history", std::vector<double>{});
}

struct Checkpoint {
  Stage stage = Stage::kPUL;  // last completed stage
  BackboneConfig backbone;
  std::string backbone_weights;  // empty: synthetic backbone from backbone.seed
  CaPSConfig caps;
  PromptParameters prompts;
  std::optional<Simulator> simulator;
  std::vector<std::string> domains;
  std::vector<std::string> classes;
  Ablations ablations;
  double temperature = 0.01;
  std::map<std::string, StageRecord> stages;  // keyed by stage name

  std::shared_ptr<const Backbone> load_backbone() const {
    return backbone_weights.empty() ? Backbone::synthetic(backbone) : load_backbone_weights(backbone_weights, backbone);
  }

  ProsModel model(std::shared_ptr<const Backbone> bb = nullptr) const {
    if (!bb) bb = load_backbone();
    require(bb->config() == backbone, "checkpoint backbone configuration does not match the supplied backbone");
    return ProsModel{std::move(bb), prompts, simulator, domains, classes, ablations};
  }
};

inline constexpr int kCheckpointFormat = 1;

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  io::TensorArchive a;
  a.meta["format_version"] = kCheckpointFormat;
  a.meta["stage"] = to_string(ck.stage);
  a.meta["backbone"] = ck.backbone;
  a.meta["backbone_weights"] = ck.backbone_weights;
  a.meta["caps"] = ck.caps;
  a.meta["domains"] = ck.domains;
  a.meta["classes"] = ck.classes;
  a.meta["ablations"] = ck.ablations.names();
  a.meta["temperature"] = ck.temperature;
  a.meta["text_prompt_length"] = ck.prompts.templates.text_prompts.rows();
  a.meta["has_simulator"] = ck.simulator.has_value();
  nlohmann::json stages = nlohmann::json::object();
  for (const auto& [name, rec] : ck.stages) stages[name] = rec;
  a.meta["stages"] = stages;
  io::store_module(a, "prompts.", ck.prompts);
  if (ck.simulator) io::store_module(a, "caps.", *ck.simulator);
  io::write_archive(path, a, "PROSCKPT");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const io::TensorArchive a = io::read_archive(path, "PROSCKPT");
  try {
    if (a.meta.at("format_version").get<int>() != kCheckpointFormat) throw ConfigError("unsupported checkpoint format in '" + path + "'");
    Checkpoint ck;
    ck.stage = parse_stage(a.meta.at("stage").get<std::string>());
    ck.backbone = a.meta.at("backbone").get<BackboneConfig>();
    ck.backbone_weights = a.meta.value("backbone_weights", std::string());
    ck.caps = a.meta.at("caps").get<CaPSConfig>();
    ck.domains = a.meta.at("domains").get<std::vector<std::string>>();
    ck.classes = a.meta.at("classes").get<std::vector<std::string>>();
    for (const auto& name : a.meta.at("ablations").get<std::vector<std::string>>()) ck.ablations.set(name);
    ck.temperature = a.meta.at("temperature").get<double>();
    for (const auto& [name, rec] : a.meta.at("stages").items()) ck.stages[name] = rec.get<StageRecord>();
    const auto d = static_cast<Eigen::Index>(ck.domains.size());
    const auto c = static_cast<Eigen::Index>(ck.classes.size());
    const auto& bc = ck.backbone;
    ck.prompts.units.domain = Mat::Zero(d, bc.embed_dim);
    ck.prompts.units.semantic = Mat::Zero(c, bc.embed_dim);
    ck.prompts.templates.cls = Mat::Zero(1, bc.embed_dim);
    ck.prompts.templates.text_prompts = Mat::Zero(a.meta.at("text_prompt_length").get<Eigen::Index>(), bc.text_dim);
    ck.prompts.templates.domain_template = Mat::Zero(ck.caps.domain_prompts, bc.embed_dim);
    ck.prompts.templates.semantic_template = Mat::Zero(ck.caps.semantic_prompts, bc.embed_dim);
    io::load_module(a, "prompts.", ck.prompts);
    if (a.meta.at("has_simulator").get<bool>()) {
      Simulator sim(ck.caps, d, c, bc.num_patches);
      io::load_module(a, "caps.", sim);
      ck.simulator = std::move(sim);
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint metadata in '" + path + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Trainer

using LogSink = std::function<void(const std::string&)>;

/// Owns the mutable model state of one training stage.
/// Batch-mean stage-one loss with gradients for every trainable tensor.
/// dp_rows / sp_rows list the units that took part in the batch.
struct PulGradients {
  double loss = 0.0;
  Mat dp;
  Mat sp;
  Mat cls;
  Mat text;
  std::vector<Eigen::Index> dp_rows;
  std::vector<Eigen::Index> sp_rows;
};

class Trainer {
 public:
  /// Fresh stage-one state.
  static Trainer for_pul(std::shared_ptr<const Backbone> backbone, std::vector<std::string> domains,
                         std::vector<std::string> classes, const TrainConfig& config, const CaPSConfig& caps,
                         const Ablations& ablations) {
    config.validate();
    PromptParameters prompts =
        PromptParameters::init(*backbone, static_cast<Eigen::Index>(domains.size()), static_cast<Eigen::Index>(classes.size()),
                               config.text_prompt_length, caps.domain_prompts, caps.semantic_prompts, config.seed);
    Trainer t(ProsModel{std::move(backbone), std::move(prompts), std::nullopt, std::move(domains), std::move(classes), ablations},
              config, caps);
    t.stage_ = Stage::kPUL;
    return t;
  }

  /// Stage-two state on top of a finished stage-one checkpoint. The
  /// simulator starts from `caps.seed`; the caption bank is built once.
  static Trainer for_csl(const Checkpoint& stage_one, const TrainConfig& config, CaPSConfig caps,
                         const Ablations& ablations, std::shared_ptr<const Backbone> backbone = nullptr) {
    config.validate();
    if (stage_one.stages.find("pul") == stage_one.stages.end()) {
      throw PreconditionError("the simulator stage needs a completed prompt-unit checkpoint");
    }
    ProsModel model = stage_one.model(std::move(backbone));
    model.ablations = ablations;
    const auto& bc = model.backbone->config();
    caps.width = bc.embed_dim;
    caps.input_dim = bc.embed_dim;
    caps.domain_prompts = static_cast<int>(model.prompts.templates.domain_template.rows());
    caps.semantic_prompts = static_cast<int>(model.prompts.templates.semantic_template.rows());
    model.simulator.emplace(caps, model.prompts.units.num_domains(), model.prompts.units.num_classes(), bc.num_patches);
    Trainer t(std::move(model), config, caps);
    t.stage_ = Stage::kCSL;
    t.stages_ = stage_one.stages;
    t.frozen_bank_ = build_caption_bank(*t.model_.backbone, t.model_.classes, t.model_.prompts.templates.text_prompts);
    return t;
  }

  const ProsModel& model() const { return model_; }
  ProsModel& model() { return model_; }
  Stage stage() const { return stage_; }
  const TrainConfig& config() const { return config_; }

  /// Stage-one loss and gradients for a batch, without updating anything.
  PulGradients pul_gradients(std::span<const TrainingSample* const> batch) const {
    require(stage_ == Stage::kPUL, "pul_gradients called outside the prompt-unit stage");
    require(!batch.empty(), "pul_step: empty batch");
    const Backbone& bb = *model_.backbone;
    const auto& units = model_.prompts.units;
    const auto& tmpl = model_.prompts.templates;
    const auto num_domains = static_cast<std::size_t>(units.num_domains());
    const auto num_classes = static_cast<std::size_t>(units.num_classes());

    const CaptionBank bank = build_caption_bank(bb, model_.classes, tmpl.text_prompts, true);
    PulGradients g;
    g.dp = Mat::Zero(units.domain.rows(), units.domain.cols());
    g.sp = Mat::Zero(units.semantic.rows(), units.semantic.cols());
    g.cls = Mat::Zero(1, tmpl.cls.cols());
    Mat d_bank = Mat::Zero(bank.features.rows(), bank.features.cols());
    std::set<Eigen::Index> dp_rows;
    std::set<Eigen::Index> sp_rows;
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    for (const TrainingSample* s : batch) {
      require(s->domain < num_domains && s->cls < num_classes,
              "pul_step: sample " + s->sample_id + " has a domain/class index outside the training sets");
      const MaskSpec mask = build_mask(s->domain, s->cls, num_domains, num_classes, MaskMode::kIrrelevance);
      const SelectedUnits sel = apply_mask(units, mask, model_.ablations.usage());
      const PromptedSequence seq{tmpl.cls, vstack(sel.domain, sel.semantic), s->patches};
      const ImageTrace trace = bb.forward_image_traced(seq);
      const AlignResult r = align_loss_with_grad(trace.feature.vector, bank.features, s->cls, config_.temperature);
      g.loss += r.loss * inv_b;
      d_bank += r.d_bank * inv_b;
      const Mat dx = bb.backward_image(trace, r.d_feature * inv_b);
      g.cls += dx.topRows(1);
      Eigen::Index row = 1;
      for (Eigen::Index u : sel.domain_rows) {
        g.dp.row(u) += dx.row(row++);
        dp_rows.insert(u);
      }
      for (Eigen::Index u : sel.semantic_rows) {
        g.sp.row(u) += dx.row(row++);
        sp_rows.insert(u);
      }
    }

    g.text = Mat::Zero(tmpl.text_prompts.rows(), tmpl.text_prompts.cols());
    for (std::size_t i = 0; i < bank.traces.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const RowVec f = bank.features.row(r);
      const RowVec df = d_bank.row(r);
      const RowVec draw = (df - f * f.dot(df)) / bank.norms[i];
      g.text += bb.backward_text(bank.traces[i], draw);
    }
    g.dp_rows.assign(dp_rows.begin(), dp_rows.end());
    g.sp_rows.assign(sp_rows.begin(), sp_rows.end());
    return g;
  }

  /// One stage-one optimization step; returns the batch-mean loss.
  double pul_step(std::span<const TrainingSample* const> batch, double lr) {
    PulGradients g = pul_gradients(batch);
    auto& units = model_.prompts.units;
    auto& tmpl = model_.prompts.templates;
    optimizer_.begin_step();
    optimizer_.update("dp", units.domain, g.dp, lr, &g.dp_rows);
    optimizer_.update("sp", units.semantic, g.sp, lr, &g.sp_rows);
    optimizer_.update("text_prompts", tmpl.text_prompts, g.text, lr);
    if (!model_.ablations.no_cls_train) optimizer_.update("cls", tmpl.cls, g.cls, lr);
    return g.loss;
  }

  /// One stage-two optimization step; returns the batch-mean loss.
  double csl_step(std::span<const TrainingSample* const> batch, double lr) {
    require(stage_ == Stage::kCSL && model_.simulator && frozen_bank_,
            "csl_step needs a trainer initialised from a stage-one checkpoint");
    require(!batch.empty(), "csl_step: empty batch");
    const Backbone& bb = *model_.backbone;
    Simulator& sim = *model_.simulator;
    auto& tmpl = model_.prompts.templates;
    const auto num_domains = static_cast<std::size_t>(model_.prompts.units.num_domains());
    const auto num_classes = static_cast<std::size_t>(model_.prompts.units.num_classes());
    const Eigen::Index nd = tmpl.domain_template.rows();
    const Eigen::Index ns = tmpl.semantic_template.rows();

    Simulator grad = nn::zeros_like(sim);
    Mat d_ptd = Mat::Zero(nd, tmpl.domain_template.cols());
    Mat d_pts = Mat::Zero(ns, tmpl.semantic_template.cols());
    double loss = 0.0;
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    for (const TrainingSample* s : batch) {
      require(s->domain < num_domains && s->cls < num_classes,
              "csl_step: sample " + s->sample_id + " has a domain/class index outside the training sets");
      const MaskSpec mask = build_mask(s->domain, s->cls, num_domains, num_classes,
                                       model_.ablations.no_mask ? MaskMode::kKeepAll : MaskMode::kRelevance);
      const SelectedUnits sel = apply_mask(model_.prompts.units, mask, model_.ablations.usage());
      const SimulatorTrace st = sim.simulate_traced(tmpl, sel, s->patches);
      const ImageTrace trace = bb.forward_image_traced(assemble_inference_input(tmpl.cls, st.output, s->patches));
      const AlignResult r = align_loss_with_grad(trace.feature.vector, frozen_bank_->features, s->cls, config_.temperature);
      loss += r.loss * inv_b;
      const Mat dx = bb.backward_image(trace, r.d_feature * inv_b);
      const TemplateGrads tg = sim.backward(st, dx.middleRows(1, nd), dx.middleRows(1 + nd, ns), &grad);
      d_ptd += tg.domain_template;
      d_pts += tg.semantic_template;
    }

    optimizer_.begin_step();
    optimizer_.update("pt_d", tmpl.domain_template, d_ptd, lr);
    optimizer_.update("pt_s", tmpl.semantic_template, d_pts, lr);
    std::vector<const Mat*> grads;
    Simulator::visit(grad, "", [&](const std::string&, const Mat& g) { grads.push_back(&g); });
    std::size_t i = 0;
    Simulator::visit(sim, "caps.", [&](const std::string& name, Mat& p) { optimizer_.update(name, p, *grads[i++], lr); });
    return loss;
  }

  double step(std::span<const TrainingSample* const> batch, double lr) {
    return stage_ == Stage::kPUL ? pul_step(batch, lr) : csl_step(batch, lr);
  }

  /// Batch-mean loss of the current state, without updating anything.
  double evaluate_loss(std::span<const TrainingSample* const> batch) const {
    const Backbone& bb = *model_.backbone;
    const auto& tmpl = model_.prompts.templates;
    const auto num_domains = static_cast<std::size_t>(model_.prompts.units.num_domains());
    const auto num_classes = static_cast<std::size_t>(model_.prompts.units.num_classes());
    const CaptionBank bank =
        frozen_bank_ ? *frozen_bank_ : build_caption_bank(bb, model_.classes, tmpl.text_prompts);
    double loss = 0.0;
    for (const TrainingSample* s : batch) {
      RowVec f;
      if (stage_ == Stage::kPUL) {
        const MaskSpec mask = build_mask(s->domain, s->cls, num_domains, num_classes, MaskMode::kIrrelevance);
        f = bb.forward_image(assemble_pul_input(tmpl.cls, model_.prompts.units, mask, s->patches, model_.ablations.usage())).vector;
      } else {
        const MaskSpec mask = build_mask(s->domain, s->cls, num_domains, num_classes,
                                         model_.ablations.no_mask ? MaskMode::kKeepAll : MaskMode::kRelevance);
        const SelectedUnits sel = apply_mask(model_.prompts.units, mask, model_.ablations.usage());
        f = bb.forward_image(assemble_inference_input(tmpl.cls, model_.simulator->simulate(tmpl, sel, s->patches), s->patches)).vector;
      }
      loss += align_loss_with_grad(f, bank.features, s->cls, config_.temperature).loss;
    }
    return loss / static_cast<double>(batch.size());
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.stage = stage_;
    ck.backbone = model_.backbone->config();
    ck.caps = caps_;
    ck.prompts = model_.prompts;
    ck.simulator = model_.simulator;
    ck.domains = model_.domains;
    ck.classes = model_.classes;
    ck.ablations = model_.ablations;
    ck.temperature = config_.temperature;
    ck.stages = stages_;
    return ck;
  }

  void record_stage(StageRecord rec) { stages_[to_string(stage_)] = std::move(rec); }

 private:
  Trainer(ProsModel model, TrainConfig config, CaPSConfig caps)
      : model_(std::move(model)), config_(config), caps_(caps) {
    caps_.width = model_.backbone->config().embed_dim;
    caps_.input_dim = model_.backbone->config().embed_dim;
  }

  ProsModel model_;
  TrainConfig config_;
  CaPSConfig caps_;
  Stage stage_ = Stage::kPUL;
  nn::Adam optimizer_;
  std::optional<CaptionBank> frozen_bank_;
  std::map<std::string, StageRecord> stages_;
};

/// Items for one training run, with frozen patch embeddings precomputed.
struct StageData {
  std::vector<TrainingSample> train;
  EmbeddingGallery validation_gallery_labels;  // ids/classes only
  std::vector<PatchEmbeddings> validation_query_patches;
  std::vector<std::string> validation_query_ids;
  std::vector<std::string> validation_query_classes;
  std::vector<PatchEmbeddings> validation_gallery_patches;
};

inline StageData make_stage_data(const Backbone& backbone, const DatasetManifest& manifest, const std::vector<Mat>& images,
                                 const ProtocolSplit& split) {
  StageData d;
  d.train = make_training_samples(backbone, manifest, images, split.train, split.train_domains, split.classes.train);
  for (const auto& id : split.validation_queries) {
    const std::size_t i = manifest.index_of(id);
    d.validation_query_ids.push_back(id);
    d.validation_query_classes.push_back(manifest.items()[i].class_name);
    d.validation_query_patches.push_back(backbone.embed_patches(images[i]));
  }
  for (const auto& id : split.validation_gallery) {
    const std::size_t i = manifest.index_of(id);
    d.validation_gallery_labels.ids.push_back(id);
    d.validation_gallery_labels.classes.push_back(manifest.items()[i].class_name);
    d.validation_gallery_labels.domains.push_back(manifest.items()[i].domain);
    d.validation_gallery_patches.push_back(backbone.embed_patches(images[i]));
  }
  return d;
}

/// Validation mAP@k of `model` on the stage's validation queries / gallery.
inline double validation_map(const ProsModel& model, const StageData& data, FeatureMode mode, std::size_t k) {
  if (data.validation_query_ids.empty() || data.validation_gallery_labels.ids.empty()) return 0.0;
  EmbeddingGallery gallery = data.validation_gallery_labels;
  gallery.vectors.resize(static_cast<Eigen::Index>(gallery.ids.size()), model.backbone->config().proj_dim);
  for (std::size_t i = 0; i < gallery.ids.size(); ++i)
    gallery.vectors.row(static_cast<Eigen::Index>(i)) = model.feature(data.validation_gallery_patches[i], mode);
  std::vector<RankedResult> results;
  for (std::size_t q = 0; q < data.validation_query_ids.size(); ++q) {
    results.push_back(rank(data.validation_query_ids[q], model.feature(data.validation_query_patches[q], mode), gallery));
  }
  return map_at_k(results, class_relevance(data.validation_query_classes, gallery), k).value;
}

/// Draws a batch uniformly over (domain, class) pairs, then uniformly within the pair.
class PairSampler {
 public:
  PairSampler(const std::vector<TrainingSample>& samples, std::uint64_t seed) : rng_(seed) {
    std::map<std::pair<std::size_t, std::size_t>, std::vector<const TrainingSample*>> by_pair;
    for (const auto& s : samples) by_pair[{s.domain, s.cls}].push_back(&s);
    for (auto& [_, v] : by_pair) pairs_.push_back(std::move(v));
  }

  std::vector<const TrainingSample*> draw(std::size_t n) {
    std::vector<const TrainingSample*> out;
    out.reserve(n);
    std::uniform_int_distribution<std::size_t> pick_pair(0, pairs_.size() - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& pool = pairs_[pick_pair(rng_)];
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      out.push_back(pool[pick(rng_)]);
    }
    return out;
  }

 private:
  Rng rng_;
  std::vector<std::vector<const TrainingSample*>> pairs_;
};

/// Runs a full stage: cosine-decayed Adam over epochs, validation mAP after
/// each epoch, early stopping after `early_stop_patience` consecutive
/// non-improving epochs, and returns the best-validation checkpoint.
inline Checkpoint train_stage(Trainer& trainer, const StageData& data, const LogSink& log = {}) {
  const TrainConfig& cfg = trainer.config();
  if (data.train.empty()) throw PreconditionError("train_stage: the training split is empty");
  const long steps_per_epoch = cfg.steps_per_epoch > 0
                                   ? cfg.steps_per_epoch
                                   : static_cast<long>((data.train.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                                       static_cast<std::size_t>(cfg.batch_size));
  const long total_steps = steps_per_epoch * cfg.epochs;
  const FeatureMode mode = trainer.stage() == Stage::kPUL ? FeatureMode::kUnitsOnly : FeatureMode::kFull;
  PairSampler sampler(data.train, derive_seed(cfg.seed, trainer.stage() == Stage::kPUL ? 0x501 : 0x502));
  const std::string stage_name = to_string(trainer.stage());

  StageRecord rec;
  rec.config = cfg;
  rec.best_validation_map = -1.0;
  Checkpoint best = trainer.checkpoint();
  int waited = 0;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (long s = 0; s < steps_per_epoch; ++s, ++step) {
      const double lr = cosine_lr(cfg.lr, step, total_steps);
      const auto batch = sampler.draw(static_cast<std::size_t>(cfg.batch_size));
      const double loss = trainer.step(batch, lr);
      if (!std::isfinite(loss) || loss < 0.0) throw NumericError("training produced an invalid loss at step " + std::to_string(step));
      if (log) {
        std::ostringstream line;
        line.precision(8);
        line << epoch << ',' << step << ',' << stage_name << ',' << loss << ',' << lr;
        log(line.str());
      }
    }
    const double val = validation_map(trainer.model(), data, mode, static_cast<std::size_t>(cfg.eval_k));
    rec.validation_history.push_back(val);
    rec.epochs_run = epoch;
    if (log) {
      std::ostringstream line;
      line.precision(8);
      line << "# epoch " << epoch << " stage " << stage_name << " validation map@" << cfg.eval_k << ' ' << val;
      log(line.str());
    }
    if (val > rec.best_validation_map) {
      rec.best_validation_map = val;
      rec.best_epoch = epoch;
      best = trainer.checkpoint();
      waited = 0;
    } else if (++waited >= cfg.early_stop_patience) {
      break;
    }
  }
  trainer.record_stage(rec);
  best.stages[stage_name] = rec;
  return best;
}

}  // namespace pros
