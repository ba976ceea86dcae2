// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0
//
// Frozen dual encoder. The image tower takes an explicit token sequence
// [cls, prompts..., patches...] so prompts enter the first layer only;
// deeper layers see whatever the previous layer computed for them. The
// text tower splices learned prompt vectors into a caption at a slot.
//
// Weights come either from the deterministic synthetic generator (a pure
// function of BackboneConfig::seed) or from an external archive of the
// same architecture (see load_backbone_weights).

#pragma once

#include <nlohmann/json.hpp>

#include <cctype>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pros/errors.hpp"
#include "pros/linalg.hpp"
#include "pros/nn.hpp"
#include "pros/serialize.hpp"

namespace pros {

struct BackboneConfig {
  int embed_dim = 64;  // image token width
  int text_dim = 32;
  int num_layers = 2;
  int num_heads = 4;
  int text_layers = 2;
  int text_heads = 4;
  int num_patches = 16;
  int patch_dim = 32;  // raw values per patch fed to the patch embedding
  int proj_dim = 32;
  int context_length = 77;
  int mlp_ratio = 4;
  bool positional = true;
  // std of the shared offset added to every caption feature (modality gap)
  double text_gap = 8.0;
  std::uint64_t seed = 0;

  /// Dimensions of a ViT-B/32 CLIP model, for use with external weights.
  static BackboneConfig clip_vit_b32() {
    BackboneConfig c;
    c.embed_dim = 768;
    c.text_dim = 512;
    c.num_layers = 12;
    c.num_heads = 12;
    c.text_layers = 12;
    c.text_heads = 8;
    c.num_patches = 49;
    c.patch_dim = 3 * 32 * 32;
    c.proj_dim = 512;
    return c;
  }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string("backbone.") + name + " must be positive");
    };
    positive(embed_dim, "embed_dim");
    positive(text_dim, "text_dim");
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(text_layers, "text_layers");
    positive(text_heads, "text_heads");
    positive(num_patches, "num_patches");
    positive(patch_dim, "patch_dim");
    positive(proj_dim, "proj_dim");
    positive(context_length, "context_length");
    positive(mlp_ratio, "mlp_ratio");
    if (!(text_gap >= 0.0)) throw ConfigError("backbone.text_gap must be non-negative");
    if (embed_dim % num_heads != 0) throw ConfigError("backbone.embed_dim must be divisible by num_heads");
    if (text_dim % text_heads != 0) throw ConfigError("backbone.text_dim must be divisible by text_heads");
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"embed_dim", c.embed_dim},     {"text_dim", c.text_dim},       {"num_layers", c.num_layers},
       {"num_heads", c.num_heads},     {"text_layers", c.text_layers}, {"text_heads", c.text_heads},
       {"num_patches", c.num_patches}, {"patch_dim", c.patch_dim},     {"proj_dim", c.proj_dim},
       {"context_length", c.context_length}, {"mlp_ratio", c.mlp_ratio}, {"positional", c.positional},
       {"text_gap", c.text_gap},       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.text_dim = j.value("text_dim", c.text_dim);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.text_layers = j.value("text_layers", c.text_layers);
  c.text_heads = j.value("text_heads", c.text_heads);
  c.num_patches = j.value("num_patches", c.num_patches);
  c.patch_dim = j.value("patch_dim", c.patch_dim);
  c.proj_dim = j.value("proj_dim", c.proj_dim);
  c.context_length = j.value("context_length", c.context_length);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.positional = j.value("positional", c.positional);
  c.text_gap = j.value("text_gap", c.text_gap);
  c.seed = j.value("seed", c.seed);
}

struct PatchEmbeddings {
  Mat tokens;  // num_patches x embed_dim
};

/// Serialized order is [cls, prompts..., patches...].
struct PromptedSequence {
  Mat cls;      // 1 x embed_dim
  Mat prompts;  // n x embed_dim, n may be zero
  PatchEmbeddings patches;

  Eigen::Index length() const { return 1 + prompts.rows() + patches.tokens.rows(); }

  Mat stacked() const {
    const Eigen::Index width = cls.cols();
    Mat x(length(), width);
    x.row(0) = cls.row(0);
    if (prompts.rows() > 0) x.middleRows(1, prompts.rows()) = prompts;
    x.bottomRows(patches.tokens.rows()) = patches.tokens;
    return x;
  }
};

struct JointFeature {
  RowVec vector;
};

inline constexpr std::uint64_t kStartOfText = 0;
inline constexpr std::uint64_t kEndOfText = 1;

/// Token ids for a caption. Learned prompts are spliced before ids[slot].
struct TextTokens {
  std::vector<std::uint64_t> ids;
  std::optional<std::size_t> slot;
};

/// Whitespace tokenizer stub: words and trailing punctuation become
/// hashed ids; `slot_marker` marks where learned prompts go.
inline TextTokens tokenize(std::string_view text, std::string_view slot_marker = "{prompt}") {
  TextTokens out;
  out.ids.push_back(kStartOfText);
  auto push_word = [&](std::string_view w) {
    if (w.empty()) return;
    if (w == slot_marker) {
      if (out.slot) throw PreconditionError("caption has more than one prompt slot");
      out.slot = out.ids.size();
      return;
    }
    std::string lowered(w);
    for (char& c : lowered) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    out.ids.push_back(fnv1a(lowered) | 2ULL);  // never collides with the reserved ids
  };
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    std::string_view word = text.substr(i, j - i);
    std::string_view punct;
    if (word != slot_marker && word.size() > 1 && std::ispunct(static_cast<unsigned char>(word.back()))) {
      punct = word.substr(word.size() - 1);
      word = word.substr(0, word.size() - 1);
    }
    push_word(word);
    push_word(punct);
    i = j;
  }
  out.ids.push_back(kEndOfText);
  return out;
}

struct BackboneWeights {
  nn::Linear patch_embed;  // patch_dim -> embed_dim
  Mat patch_pos;           // num_patches x embed_dim
  Mat cls;                 // 1 x embed_dim
  nn::LayerNorm ln_pre;
  nn::Encoder image_encoder;
  nn::LayerNorm ln_post;
  nn::Linear image_proj;  // embed_dim -> proj_dim, no bias
  Mat token_table;        // vocab x text_dim; empty selects hashed synthetic embeddings
  Mat text_pos;           // context_length x text_dim
  nn::Encoder text_encoder;
  nn::LayerNorm ln_final;
  nn::Linear text_proj;  // text_dim -> proj_dim, no bias

  static BackboneWeights synthetic(const BackboneConfig& c) {
    c.validate();
    Rng rng(derive_seed(c.seed, 0xB0));
    const double s_img = 1.0 / std::sqrt(static_cast<double>(c.embed_dim));
    const double s_txt = 1.0 / std::sqrt(static_cast<double>(c.text_dim));
    BackboneWeights w;
    w.patch_embed = nn::Linear::init(rng, c.patch_dim, c.embed_dim, 1.0 / std::sqrt(static_cast<double>(c.patch_dim)));
    w.patch_embed.bias = normal_matrix(rng, 1, c.embed_dim, 0.1);
    w.patch_pos = normal_matrix(rng, c.num_patches, c.embed_dim, 0.1);
    w.cls = normal_matrix(rng, 1, c.embed_dim, 1.0);
    w.ln_pre = nn::LayerNorm::init(c.embed_dim);
    w.image_encoder = nn::Encoder::init(rng, c.num_layers, c.embed_dim, c.num_heads, c.mlp_ratio, false, s_img);
    w.ln_post = nn::LayerNorm::init(c.embed_dim);
    w.image_proj = nn::Linear::init(rng, c.embed_dim, c.proj_dim, s_img, false);
    w.text_pos = normal_matrix(rng, c.context_length, c.text_dim, 0.01);
    w.text_encoder = nn::Encoder::init(rng, c.text_layers, c.text_dim, c.text_heads, c.mlp_ratio, true, s_txt);
    w.ln_final = nn::LayerNorm::init(c.text_dim);
    if (c.text_gap > 0.0) w.ln_final.beta = normal_matrix(rng, 1, c.text_dim, c.text_gap);
    w.text_proj = nn::Linear::init(rng, c.text_dim, c.proj_dim, s_txt, false);
    return w;
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    nn::Linear::visit(self.patch_embed, prefix + "patch_embed.", f);
    f(prefix + "patch_pos", self.patch_pos);
    f(prefix + "cls", self.cls);
    nn::LayerNorm::visit(self.ln_pre, prefix + "ln_pre.", f);
    nn::Encoder::visit(self.image_encoder, prefix + "image.", f);
    nn::LayerNorm::visit(self.ln_post, prefix + "ln_post.", f);
    nn::Linear::visit(self.image_proj, prefix + "image_proj.", f);
    if (self.token_table.size() != 0) f(prefix + "token_table", self.token_table);
    f(prefix + "text_pos", self.text_pos);
    nn::Encoder::visit(self.text_encoder, prefix + "text.", f);
    nn::LayerNorm::visit(self.ln_final, prefix + "ln_final.", f);
    nn::Linear::visit(self.text_proj, prefix + "text_proj.", f);
  }
};

/// Intermediate state of one image forward, consumed by backward_image.
struct ImageTrace {
  Eigen::Index rows = 0;
  nn::LayerNorm::Cache ln_pre;
  nn::Encoder::Cache encoder;
  nn::LayerNorm::Cache ln_post;
  Mat cls_normed;
  JointFeature feature;
};

struct TextTrace {
  std::size_t slot = 0;
  Eigen::Index num_prompts = 0;
  Eigen::Index rows = 0;
  nn::Encoder::Cache encoder;
  nn::LayerNorm::Cache ln_final;
  Mat eot_normed;
  JointFeature feature;
};

class Backbone {
 public:
  static std::shared_ptr<const Backbone> synthetic(const BackboneConfig& config) {
    return std::shared_ptr<const Backbone>(new Backbone(config, BackboneWeights::synthetic(config)));
  }

  /// Plug-in point for externally supplied weights of the same architecture.
  static std::shared_ptr<const Backbone> from_weights(const BackboneConfig& config, BackboneWeights weights) {
    config.validate();
    return std::shared_ptr<const Backbone>(new Backbone(config, std::move(weights)));
  }

  const BackboneConfig& config() const { return config_; }
  const BackboneWeights& weights() const { return weights_; }
  const Mat& pretrained_cls() const { return weights_.cls; }

  PatchEmbeddings embed_patches(const Mat& image) const {
    if (image.rows() != config_.num_patches || image.cols() != config_.patch_dim) {
      throw PreconditionError("embed_patches: image is " + shape_string(image) + ", backbone expects " +
                              std::to_string(config_.num_patches) + "x" + std::to_string(config_.patch_dim) +
                              " (num_patches x patch_dim)");
    }
    Mat tokens = weights_.patch_embed.forward(image);
    if (config_.positional) tokens += weights_.patch_pos;
    if (!tokens.allFinite()) throw NumericError("embed_patches: non-finite patch tokens");
    return PatchEmbeddings{std::move(tokens)};
  }

  JointFeature forward_image(const PromptedSequence& seq) const { return run_image(seq, nullptr); }

  ImageTrace forward_image_traced(const PromptedSequence& seq) const {
    ImageTrace trace;
    trace.feature = run_image(seq, &trace);
    return trace;
  }

  /// Gradient of a loss w.r.t. the stacked input sequence, given dL/dfeature.
  Mat backward_image(const ImageTrace& trace, const RowVec& dfeature) const {
    Mat dcls_normed = weights_.image_proj.backward(trace.cls_normed, dfeature, nullptr);
    Mat dcls = weights_.ln_post.backward(trace.ln_post, dcls_normed, nullptr);
    Mat dencoded = Mat::Zero(trace.rows, config_.embed_dim);
    dencoded.row(0) = dcls.row(0);
    Mat dnormed = weights_.image_encoder.backward(trace.encoder, std::move(dencoded), nullptr);
    return weights_.ln_pre.backward(trace.ln_pre, dnormed, nullptr);
  }

  JointFeature encode_text(const TextTokens& tokens, const Mat& prompts) const {
    return run_text(tokens, prompts, nullptr);
  }

  TextTrace encode_text_traced(const TextTokens& tokens, const Mat& prompts) const {
    TextTrace trace;
    trace.feature = run_text(tokens, prompts, &trace);
    return trace;
  }

  /// Gradient w.r.t. the spliced prompt vectors, given dL/dfeature.
  Mat backward_text(const TextTrace& trace, const RowVec& dfeature) const {
    Mat deot_normed = weights_.text_proj.backward(trace.eot_normed, dfeature, nullptr);
    Mat deot = weights_.ln_final.backward(trace.ln_final, deot_normed, nullptr);
    Mat dencoded = Mat::Zero(trace.rows, config_.text_dim);
    dencoded.row(trace.rows - 1) = deot.row(0);
    Mat dx = weights_.text_encoder.backward(trace.encoder, std::move(dencoded), nullptr);
    return dx.middleRows(static_cast<Eigen::Index>(trace.slot), trace.num_prompts);
  }

  RowVec token_embedding(std::uint64_t id) const {
    if (weights_.token_table.size() != 0) {
      if (id >= static_cast<std::uint64_t>(weights_.token_table.rows())) {
        throw PreconditionError("token id " + std::to_string(id) + " outside the vocabulary");
      }
      return weights_.token_table.row(static_cast<Eigen::Index>(id));
    }
    Rng rng(derive_seed(config_.seed ^ 0x7E47ULL, id));
    return normal_matrix(rng, 1, config_.text_dim, 0.02);
  }

 private:
  Backbone(BackboneConfig config, BackboneWeights weights) : config_(config), weights_(std::move(weights)) {
    check_shapes();
  }

  void check_shapes() const {
    auto expect = [](const Mat& m, Eigen::Index r, Eigen::Index c, const char* name) {
      if (m.rows() != r || m.cols() != c) {
        throw ConfigError(std::string("backbone weight ") + name + " is " + shape_string(m) + ", expected " +
                          std::to_string(r) + "x" + std::to_string(c));
      }
    };
    const auto& c = config_;
    expect(weights_.patch_embed.weight, c.patch_dim, c.embed_dim, "patch_embed");
    expect(weights_.patch_pos, c.num_patches, c.embed_dim, "patch_pos");
    expect(weights_.cls, 1, c.embed_dim, "cls");
    expect(weights_.image_proj.weight, c.embed_dim, c.proj_dim, "image_proj");
    expect(weights_.text_pos, c.context_length, c.text_dim, "text_pos");
    expect(weights_.text_proj.weight, c.text_dim, c.proj_dim, "text_proj");
    if (weights_.image_encoder.blocks.size() != static_cast<std::size_t>(c.num_layers) ||
        weights_.text_encoder.blocks.size() != static_cast<std::size_t>(c.text_layers)) {
      throw ConfigError("backbone layer count does not match configuration");
    }
  }

  JointFeature run_image(const PromptedSequence& seq, ImageTrace* trace) const {
    const Eigen::Index width = config_.embed_dim;
    if (seq.cls.rows() != 1 || seq.cls.cols() != width ||
        (seq.prompts.rows() > 0 && seq.prompts.cols() != width) || seq.patches.tokens.cols() != width) {
      throw PreconditionError("forward_image: all tokens must have width " + std::to_string(width));
    }
    Mat x = seq.stacked();
    Mat normed = weights_.ln_pre.forward(x, trace ? &trace->ln_pre : nullptr);
    Mat encoded = weights_.image_encoder.forward(std::move(normed), trace ? &trace->encoder : nullptr, "image tower");
    Mat cls_normed = weights_.ln_post.forward(encoded.topRows(1), trace ? &trace->ln_post : nullptr);
    JointFeature out{weights_.image_proj.forward(cls_normed).row(0)};
    if (!out.vector.allFinite()) throw NumericError("forward_image: non-finite feature");
    if (trace != nullptr) {
      trace->rows = x.rows();
      trace->cls_normed = std::move(cls_normed);
    }
    return out;
  }

  JointFeature run_text(const TextTokens& tokens, const Mat& prompts, TextTrace* trace) const {
    const Eigen::Index np = prompts.rows();
    if (np > 0 && prompts.cols() != config_.text_dim) {
      throw PreconditionError("encode_text: prompt vectors must have width " + std::to_string(config_.text_dim));
    }
    if (np > 0 && !tokens.slot) throw PreconditionError("encode_text: caption has no prompt slot");
    const std::size_t slot = tokens.slot.value_or(tokens.ids.size() - 1);
    const Eigen::Index length = static_cast<Eigen::Index>(tokens.ids.size()) + np;
    if (length > config_.context_length) {
      throw PreconditionError("encode_text: caption of " + std::to_string(length) +
                              " tokens exceeds context length " + std::to_string(config_.context_length));
    }
    Mat x(length, config_.text_dim);
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
      if (i == slot && np > 0) {
        x.middleRows(row, np) = prompts;
        row += np;
      }
      x.row(row++) = token_embedding(tokens.ids[i]);
    }
    x += weights_.text_pos.topRows(length);
    Mat encoded = weights_.text_encoder.forward(std::move(x), trace ? &trace->encoder : nullptr, "text tower");
    Mat eot_normed = weights_.ln_final.forward(encoded.bottomRows(1), trace ? &trace->ln_final : nullptr);
    JointFeature out{weights_.text_proj.forward(eot_normed).row(0)};
    if (!out.vector.allFinite()) throw NumericError("encode_text: non-finite feature");
    if (trace != nullptr) {
      trace->slot = slot;
      trace->num_prompts = np;
      trace->rows = length;
      trace->eot_normed = std::move(eot_normed);
    }
    return out;
  }

  BackboneConfig config_;
  BackboneWeights weights_;
};

/// Loads externally supplied weights (tensor archive, magic "PROSBKBN").
inline std::shared_ptr<const Backbone> load_backbone_weights(const std::string& path, const BackboneConfig& config) {
  const io::TensorArchive archive = io::read_archive(path, "PROSBKBN");
  BackboneWeights w = BackboneWeights::synthetic(config);  // shapes only; every tensor is overwritten
  if (const Mat* table = archive.find("token_table")) w.token_table = *table;
  io::load_module(archive, "", w);
  return Backbone::from_weights(config, std::move(w));
}

inline void save_backbone_weights(const std::string& path, const Backbone& backbone) {
  io::TensorArchive archive;
  archive.meta["backbone"] = backbone.config();
  io::store_module(archive, "", backbone.weights());
  io::write_archive(path, archive, "PROSBKBN");
}

}  // namespace pros
