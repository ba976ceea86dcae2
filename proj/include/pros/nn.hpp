// Copyright 2026 The pros-ucdr Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal transformer building blocks with explicit reverse-mode passes.
// Every layer exposes forward(x, cache*) and backward(cache, dy, grad*):
// backward returns the gradient w.r.t. the layer input and, when `grad`
// is non-null, accumulates parameter gradients into it. Frozen modules
// pass grad == nullptr and skip all parameter-gradient work.

#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "pros/linalg.hpp"

namespace pros::nn {

/// Sets every parameter tensor of a module to zero (gradient buffers).
template <typename Module>
Module zeros_like(const Module& module) {
  Module z = module;
  Module::visit(z, "", [](const std::string&, Mat& t) { t.setZero(); });
  return z;
}

template <typename Module>
std::size_t parameter_count(const Module& module) {
  std::size_t n = 0;
  Module::visit(module, "", [&](const std::string&, const Mat& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

template <typename Module>
void add_into(Module& dst, const Module& src) {
  std::vector<const Mat*> from;
  Module::visit(src, "", [&](const std::string&, const Mat& t) { from.push_back(&t); });
  std::size_t i = 0;
  Module::visit(dst, "", [&](const std::string&, Mat& t) { t += *from[i++]; });
}

struct Linear {
  Mat weight;  // in x out
  Mat bias;    // 1 x out, or empty when the projection has no bias

  static Linear init(Rng& rng, Eigen::Index in, Eigen::Index out, double stddev, bool with_bias = true) {
    Linear l;
    l.weight = normal_matrix(rng, in, out, stddev);
    if (with_bias) l.bias = Mat::Zero(1, out);
    return l;
  }

  Eigen::Index in_dim() const { return weight.rows(); }
  Eigen::Index out_dim() const { return weight.cols(); }

  Mat forward(const Mat& x) const {
    Mat y = x * weight;
    if (bias.size() != 0) y.rowwise() += bias.row(0);
    return y;
  }

  Mat backward(const Mat& x, const Mat& dy, Linear* grad) const {
    if (grad != nullptr) {
      grad->weight.noalias() += x.transpose() * dy;
      if (bias.size() != 0) grad->bias += dy.colwise().sum();
    }
    return dy * weight.transpose();
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "weight", self.weight);
    if (self.bias.size() != 0) f(prefix + "bias", self.bias);
  }
};

struct LayerNorm {
  Mat gamma;  // 1 x d
  Mat beta;   // 1 x d
  double eps = 1e-5;

  struct Cache {
    Mat xhat;
    Eigen::VectorXd rstd;
  };

  static LayerNorm init(Eigen::Index dim) {
    return LayerNorm{Mat::Ones(1, dim), Mat::Zero(1, dim)};
  }

  Mat forward(const Mat& x, Cache* cache) const {
    const Eigen::Index d = x.cols();
    Mat xhat(x.rows(), d);
    Eigen::VectorXd rstd(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double mean = x.row(r).mean();
      const double var = (x.row(r).array() - mean).square().sum() / static_cast<double>(d);
      rstd(r) = 1.0 / std::sqrt(var + eps);
      xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
    }
    Mat y = (xhat.array().rowwise() * gamma.row(0).array()).matrix();
    y.rowwise() += beta.row(0);
    if (cache != nullptr) {
      cache->xhat = std::move(xhat);
      cache->rstd = std::move(rstd);
    }
    return y;
  }

  Mat backward(const Cache& cache, const Mat& dy, LayerNorm* grad) const {
    if (grad != nullptr) {
      grad->gamma += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
      grad->beta += dy.colwise().sum();
    }
    const Eigen::Index d = dy.cols();
    Mat dxhat = (dy.array().rowwise() * gamma.row(0).array()).matrix();
    Mat dx(dy.rows(), d);
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      const double mean_dxhat = dxhat.row(r).mean();
      const double mean_dxhat_xhat = dxhat.row(r).dot(cache.xhat.row(r)) / static_cast<double>(d);
      dx.row(r) = cache.rstd(r) *
                  (dxhat.row(r).array() - mean_dxhat - cache.xhat.row(r).array() * mean_dxhat_xhat).matrix();
    }
    return dx;
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "gamma", self.gamma);
    f(prefix + "beta", self.beta);
  }
};

/// Multi-head self-attention over all tokens, optionally causal.
struct SelfAttention {
  int num_heads = 1;
  bool causal = false;
  Linear qkv;  // d x 3d, packed [q | k | v]
  Linear out;  // d x d

  struct Cache {
    Mat input;
    Mat qkv;
    std::vector<Mat> probs;  // per head, T x T
    Mat context;             // T x d, heads concatenated
  };

  static SelfAttention init(Rng& rng, Eigen::Index dim, int heads, bool causal, double stddev) {
    require(heads >= 1 && dim % heads == 0, "attention width must be divisible by the head count");
    SelfAttention a;
    a.num_heads = heads;
    a.causal = causal;
    a.qkv = Linear::init(rng, dim, 3 * dim, stddev);
    a.out = Linear::init(rng, dim, dim, stddev);
    return a;
  }

  Mat forward(const Mat& x, Cache* cache) const {
    const Eigen::Index t = x.rows();
    const Eigen::Index d = x.cols();
    const Eigen::Index dh = d / num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat packed = qkv.forward(x);
    Mat context(t, d);
    std::vector<Mat> probs;
    if (cache != nullptr) probs.reserve(static_cast<std::size_t>(num_heads));
    for (int h = 0; h < num_heads; ++h) {
      const auto q = packed.middleCols(h * dh, dh);
      const auto k = packed.middleCols(d + h * dh, dh);
      const auto v = packed.middleCols(2 * d + h * dh, dh);
      Mat p = (q * k.transpose()) * scale;
      for (Eigen::Index r = 0; r < t; ++r) {
        const Eigen::Index limit = causal ? r + 1 : t;
        const double m = p.row(r).head(limit).maxCoeff();
        double z = 0.0;
        for (Eigen::Index c = 0; c < limit; ++c) {
          p(r, c) = std::exp(p(r, c) - m);
          z += p(r, c);
        }
        for (Eigen::Index c = 0; c < limit; ++c) p(r, c) /= z;
        for (Eigen::Index c = limit; c < t; ++c) p(r, c) = 0.0;
      }
      context.middleCols(h * dh, dh).noalias() = p * v;
      if (cache != nullptr) probs.push_back(std::move(p));
    }
    Mat y = out.forward(context);
    if (cache != nullptr) {
      cache->input = x;
      cache->qkv = std::move(packed);
      cache->probs = std::move(probs);
      cache->context = std::move(context);
    }
    return y;
  }

  Mat backward(const Cache& cache, const Mat& dy, SelfAttention* grad) const {
    const Eigen::Index t = dy.rows();
    const Eigen::Index d = dy.cols();
    const Eigen::Index dh = d / num_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat dcontext = out.backward(cache.context, dy, grad != nullptr ? &grad->out : nullptr);
    Mat dpacked(t, 3 * d);
    for (int h = 0; h < num_heads; ++h) {
      const Mat& p = cache.probs[static_cast<std::size_t>(h)];
      const auto q = cache.qkv.middleCols(h * dh, dh);
      const auto k = cache.qkv.middleCols(d + h * dh, dh);
      const auto v = cache.qkv.middleCols(2 * d + h * dh, dh);
      const auto dctx = dcontext.middleCols(h * dh, dh);
      Mat dp = dctx * v.transpose();
      dpacked.middleCols(2 * d + h * dh, dh).noalias() = p.transpose() * dctx;
      // softmax backward, row-wise
      Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
      Mat ds = (p.array() * (dp.array().colwise() - row_dot.array())).matrix() * scale;
      dpacked.middleCols(h * dh, dh).noalias() = ds * k;
      dpacked.middleCols(d + h * dh, dh).noalias() = ds.transpose() * q;
    }
    return qkv.backward(cache.input, dpacked, grad != nullptr ? &grad->qkv : nullptr);
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    Linear::visit(self.qkv, prefix + "qkv.", f);
    Linear::visit(self.out, prefix + "out.", f);
  }
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

struct Mlp {
  Linear fc1;
  Linear fc2;

  struct Cache {
    Mat input;
    Mat pre;
    Mat act;
  };

  static Mlp init(Rng& rng, Eigen::Index dim, Eigen::Index hidden, double stddev) {
    return Mlp{Linear::init(rng, dim, hidden, stddev), Linear::init(rng, hidden, dim, stddev)};
  }

  Mat forward(const Mat& x, Cache* cache) const {
    Mat pre = fc1.forward(x);
    Mat act = pre.unaryExpr([](double v) { return gelu(v); });
    Mat y = fc2.forward(act);
    if (cache != nullptr) {
      cache->input = x;
      cache->pre = std::move(pre);
      cache->act = std::move(act);
    }
    return y;
  }

  Mat backward(const Cache& cache, const Mat& dy, Mlp* grad) const {
    Mat dact = fc2.backward(cache.act, dy, grad != nullptr ? &grad->fc2 : nullptr);
    Mat dpre = (dact.array() * cache.pre.unaryExpr([](double v) { return gelu_grad(v); }).array()).matrix();
    return fc1.backward(cache.input, dpre, grad != nullptr ? &grad->fc1 : nullptr);
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    Linear::visit(self.fc1, prefix + "fc1.", f);
    Linear::visit(self.fc2, prefix + "fc2.", f);
  }
};

/// Pre-norm transformer block: x + Attn(LN(x)), then + Mlp(LN(.)).
struct Block {
  LayerNorm ln1;
  SelfAttention attn;
  LayerNorm ln2;
  Mlp mlp;

  struct Cache {
    LayerNorm::Cache ln1;
    SelfAttention::Cache attn;
    LayerNorm::Cache ln2;
    Mlp::Cache mlp;
  };

  static Block init(Rng& rng, Eigen::Index dim, int heads, int mlp_ratio, bool causal, double stddev) {
    Block b;
    b.ln1 = LayerNorm::init(dim);
    b.attn = SelfAttention::init(rng, dim, heads, causal, stddev);
    b.ln2 = LayerNorm::init(dim);
    b.mlp = Mlp::init(rng, dim, dim * mlp_ratio, stddev);
    return b;
  }

  Mat forward(const Mat& x, Cache* cache) const {
    Mat x1 = x + attn.forward(ln1.forward(x, cache ? &cache->ln1 : nullptr), cache ? &cache->attn : nullptr);
    return x1 + mlp.forward(ln2.forward(x1, cache ? &cache->ln2 : nullptr), cache ? &cache->mlp : nullptr);
  }

  Mat backward(const Cache& cache, const Mat& dy, Block* grad) const {
    Mat dx1 = dy + ln2.backward(cache.ln2, mlp.backward(cache.mlp, dy, grad ? &grad->mlp : nullptr),
                                grad ? &grad->ln2 : nullptr);
    return dx1 + ln1.backward(cache.ln1, attn.backward(cache.attn, dx1, grad ? &grad->attn : nullptr),
                              grad ? &grad->ln1 : nullptr);
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    LayerNorm::visit(self.ln1, prefix + "ln1.", f);
    SelfAttention::visit(self.attn, prefix + "attn.", f);
    LayerNorm::visit(self.ln2, prefix + "ln2.", f);
    Mlp::visit(self.mlp, prefix + "mlp.", f);
  }
};

/// A stack of blocks; aborts with the offending layer index on non-finite output.
struct Encoder {
  std::vector<Block> blocks;

  using Cache = std::vector<Block::Cache>;

  static Encoder init(Rng& rng, int layers, Eigen::Index dim, int heads, int mlp_ratio, bool causal, double stddev) {
    Encoder e;
    for (int i = 0; i < layers; ++i) e.blocks.push_back(Block::init(rng, dim, heads, mlp_ratio, causal, stddev));
    return e;
  }

  Mat forward(Mat x, Cache* cache, const char* tower = "encoder") const {
    if (cache != nullptr) cache->resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      x = blocks[i].forward(x, cache ? &(*cache)[i] : nullptr);
      if (!x.allFinite()) {
        throw NumericError(std::string(tower) + ": non-finite activation after layer " + std::to_string(i + 1));
      }
    }
    return x;
  }

  Mat backward(const Cache& cache, Mat dy, Encoder* grad) const {
    for (std::size_t i = blocks.size(); i-- > 0;) {
      dy = blocks[i].backward(cache[i], dy, grad ? &grad->blocks[i] : nullptr);
    }
    return dy;
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      Block::visit(self.blocks[i], prefix + "blocks." + std::to_string(i) + ".", f);
    }
  }
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with optional row-sparse updates: when `rows` is given, only those
/// rows (and their moments) are touched, so a unit that received no
/// gradient in a step stays bit-identical.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  void begin_step() { ++step_; }
  long step() const { return step_; }

  void update(const std::string& name, Mat& param, const Mat& grad, double lr,
              const std::vector<Eigen::Index>* rows = nullptr) {
    require(param.rows() == grad.rows() && param.cols() == grad.cols(),
            "adam: gradient shape " + shape_string(grad) + " does not match parameter " + name);
    auto [it, inserted] = state_.try_emplace(name);
    State& s = it->second;
    if (inserted) {
      s.m = Mat::Zero(param.rows(), param.cols());
      s.v = Mat::Zero(param.rows(), param.cols());
    }
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(options_.beta1, t);
    const double c2 = 1.0 - std::pow(options_.beta2, t);
    auto apply_row = [&](Eigen::Index r) {
      s.m.row(r) = options_.beta1 * s.m.row(r) + (1.0 - options_.beta1) * grad.row(r);
      s.v.row(r) = options_.beta2 * s.v.row(r) + (1.0 - options_.beta2) * grad.row(r).cwiseAbs2();
      param.row(r).array() -=
          lr * (s.m.row(r).array() / c1) / ((s.v.row(r).array() / c2).sqrt() + options_.eps);
    };
    if (rows != nullptr) {
      for (Eigen::Index r : *rows) apply_row(r);
    } else {
      for (Eigen::Index r = 0; r < param.rows(); ++r) apply_row(r);
    }
  }

 private:
  struct State {
    Mat m;
    Mat v;
  };
  AdamOptions options_;
  std::map<std::string, State> state_;
  long step_ = 0;
};

}  // namespace pros::nn
