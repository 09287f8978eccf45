#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pdisco/autodiff.hpp"
#include "pdisco/container.hpp"
#include "pdisco/errors.hpp"
#include "pdisco/head.hpp"
#include "pdisco/rng.hpp"
#include "pdisco/tensor.hpp"

namespace pdisco {

enum class TrainMode { tokens_only, full, frozen };

inline const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::tokens_only: return "tokens_only";
    case TrainMode::full: return "full";
    case TrainMode::frozen: return "frozen";
  }
  return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "tokens_only") return TrainMode::tokens_only;
  if (s == "full") return TrainMode::full;
  if (s == "frozen") return TrainMode::frozen;
  throw ConfigError("unknown train mode '" + s + "' (tokens_only|full|frozen)");
}

struct BackboneConfig {
  int patch_size = 8;
  int depth = 2;
  int heads = 4;
  int feat_dim = 64;
  int register_tokens = 4;
  TrainMode train_mode = TrainMode::full;

  void validate() const {
    if (patch_size < 1 || depth < 1 || heads < 1 || feat_dim < 1 || register_tokens < 0)
      throw ConfigError("backbone config values must be positive");
    if (feat_dim % heads != 0)
      throw ConfigError("feat_dim " + std::to_string(feat_dim) + " not divisible by heads " +
                        std::to_string(heads));
  }

  void validate_image(int image_h, int image_w) const {
    validate();
    if (image_h % patch_size != 0 || image_w % patch_size != 0)
      throw ConfigError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                        " not divisible by patch size " + std::to_string(patch_size));
  }
};

struct BackboneParams {
  struct Block {
    Tensor ln1_gamma, ln1_beta;    // (D)
    Tensor qkv_weight, qkv_bias;   // (3D, D), (3D)
    Tensor out_weight, out_bias;   // (D, D), (D)
    Tensor ln2_gamma, ln2_beta;    // (D)
    Tensor mlp1_weight, mlp1_bias; // (4D, D), (4D)
    Tensor mlp2_weight, mlp2_bias; // (D, 4D), (D)
  };

  Tensor patch_weight;  // (D, 3*P*P)
  Tensor patch_bias;    // (D)
  Tensor cls_token;     // (1, D)
  Tensor reg_tokens;    // (R, D)
  Tensor pos_embed;     // (HW, D), patch tokens only
  std::vector<Block> blocks;

  static BackboneParams init(const BackboneConfig& cfg, int grid_h, int grid_w,
                             RandomSource& rng) {
    cfg.validate();
    const int d = cfg.feat_dim;
    auto randn = [&rng](std::vector<int> dims) {
      Tensor t(std::move(dims));
      for (int i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, 0.02);
      return t;
    };
    BackboneParams p;
    // patch projection gets a wider init than the blocks so the raw color
    // signal dominates the residual stream of the untrained network
    p.patch_weight = randn({d, 3 * cfg.patch_size * cfg.patch_size});
    for (int i = 0; i < p.patch_weight.numel(); ++i) p.patch_weight[i] *= 3.0;
    p.patch_bias = Tensor({d});
    p.cls_token = randn({1, d});
    p.reg_tokens = randn({cfg.register_tokens, d});
    p.pos_embed = randn({grid_h * grid_w, d});
    p.blocks.resize(static_cast<std::size_t>(cfg.depth));
    for (Block& b : p.blocks) {
      b.ln1_gamma = Tensor({d}, 1.0);
      b.ln1_beta = Tensor({d});
      b.qkv_weight = randn({3 * d, d});
      b.qkv_bias = Tensor({3 * d});
      b.out_weight = randn({d, d});
      b.out_bias = Tensor({d});
      b.ln2_gamma = Tensor({d}, 1.0);
      b.ln2_beta = Tensor({d});
      b.mlp1_weight = randn({4 * d, d});
      b.mlp1_bias = Tensor({4 * d});
      b.mlp2_weight = randn({d, 4 * d});
      b.mlp2_bias = Tensor({d});
    }
    return p;
  }
};

// Stable name -> tensor listing; the order fixes gradient reduction and
// checkpoint layout.
using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;

inline ParamRefs backbone_parameters(BackboneParams& p) {
  ParamRefs out = {
      {"backbone.patch_weight", &p.patch_weight}, {"backbone.patch_bias", &p.patch_bias},
      {"backbone.cls_token", &p.cls_token},       {"backbone.reg_tokens", &p.reg_tokens},
      {"backbone.pos_embed", &p.pos_embed},
  };
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string prefix = "backbone.block" + std::to_string(i) + ".";
    BackboneParams::Block& b = p.blocks[i];
    out.emplace_back(prefix + "ln1_gamma", &b.ln1_gamma);
    out.emplace_back(prefix + "ln1_beta", &b.ln1_beta);
    out.emplace_back(prefix + "qkv_weight", &b.qkv_weight);
    out.emplace_back(prefix + "qkv_bias", &b.qkv_bias);
    out.emplace_back(prefix + "out_weight", &b.out_weight);
    out.emplace_back(prefix + "out_bias", &b.out_bias);
    out.emplace_back(prefix + "ln2_gamma", &b.ln2_gamma);
    out.emplace_back(prefix + "ln2_beta", &b.ln2_beta);
    out.emplace_back(prefix + "mlp1_weight", &b.mlp1_weight);
    out.emplace_back(prefix + "mlp1_bias", &b.mlp1_bias);
    out.emplace_back(prefix + "mlp2_weight", &b.mlp2_weight);
    out.emplace_back(prefix + "mlp2_bias", &b.mlp2_bias);
  }
  return out;
}

inline bool is_token_parameter(const std::string& name) {
  return name == "backbone.cls_token" || name == "backbone.reg_tokens" ||
         name == "backbone.pos_embed";
}

// tokens_only keeps the position embedding, class token and register tokens
// unfrozen and freezes the rest of the transformer.
inline std::vector<std::string> trainable_parameter_set(BackboneParams& params,
                                                        const BackboneConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& [name, tensor] : backbone_parameters(params)) {
    (void)tensor;
    switch (cfg.train_mode) {
      case TrainMode::frozen: break;
      case TrainMode::full: out.push_back(name); break;
      case TrainMode::tokens_only:
        if (is_token_parameter(name)) out.push_back(name);
        break;
    }
  }
  return out;
}

// ---- differentiable graph ----

struct BackboneVars {
  struct Block {
    Var ln1_gamma, ln1_beta, qkv_weight, qkv_bias, out_weight, out_bias;
    Var ln2_gamma, ln2_beta, mlp1_weight, mlp1_bias, mlp2_weight, mlp2_bias;
  };
  Var patch_weight, patch_bias, cls_token, reg_tokens, pos_embed;
  std::vector<Block> blocks;
};

inline BackboneVars make_backbone_vars(
    Tape& tape, const BackboneParams& p,
    const std::function<bool(const std::string&)>& trainable = [](const std::string&) {
      return true;
    }) {
  BackboneVars v;
  auto leaf = [&](const std::string& name, const Tensor& t) {
    return tape.leaf(t, trainable(name));
  };
  v.patch_weight = leaf("backbone.patch_weight", p.patch_weight);
  v.patch_bias = leaf("backbone.patch_bias", p.patch_bias);
  v.cls_token = leaf("backbone.cls_token", p.cls_token);
  v.reg_tokens = leaf("backbone.reg_tokens", p.reg_tokens);
  v.pos_embed = leaf("backbone.pos_embed", p.pos_embed);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    const std::string prefix = "backbone.block" + std::to_string(i) + ".";
    const BackboneParams::Block& b = p.blocks[i];
    BackboneVars::Block bv;
    bv.ln1_gamma = leaf(prefix + "ln1_gamma", b.ln1_gamma);
    bv.ln1_beta = leaf(prefix + "ln1_beta", b.ln1_beta);
    bv.qkv_weight = leaf(prefix + "qkv_weight", b.qkv_weight);
    bv.qkv_bias = leaf(prefix + "qkv_bias", b.qkv_bias);
    bv.out_weight = leaf(prefix + "out_weight", b.out_weight);
    bv.out_bias = leaf(prefix + "out_bias", b.out_bias);
    bv.ln2_gamma = leaf(prefix + "ln2_gamma", b.ln2_gamma);
    bv.ln2_beta = leaf(prefix + "ln2_beta", b.ln2_beta);
    bv.mlp1_weight = leaf(prefix + "mlp1_weight", b.mlp1_weight);
    bv.mlp1_bias = leaf(prefix + "mlp1_bias", b.mlp1_bias);
    bv.mlp2_weight = leaf(prefix + "mlp2_weight", b.mlp2_weight);
    bv.mlp2_bias = leaf(prefix + "mlp2_bias", b.mlp2_bias);
    v.blocks.push_back(bv);
  }
  return v;
}

// (3,M,N) image -> (HW, 3*P*P) matrix of flattened patches
inline Tensor patchify(const Tensor& image, int patch_size) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ConfigError("image must be (3,M,N)");
  const int m = image.dim(1), n = image.dim(2);
  if (m % patch_size != 0 || n % patch_size != 0)
    throw ConfigError("image " + std::to_string(m) + "x" + std::to_string(n) +
                      " not divisible by patch size " + std::to_string(patch_size));
  const int gh = m / patch_size, gw = n / patch_size;
  const int pd = 3 * patch_size * patch_size;
  Tensor out({gh * gw, pd});
  for (int pi = 0; pi < gh; ++pi)
    for (int pj = 0; pj < gw; ++pj) {
      double* row = out.data() + static_cast<std::size_t>(pi * gw + pj) * pd;
      int at = 0;
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < patch_size; ++y)
          for (int x = 0; x < patch_size; ++x)
            row[at++] = image.at3(c, pi * patch_size + y, pj * patch_size + x);
    }
  return out;
}

namespace backbone_ops {

inline constexpr double kBlockLnEps = 1e-5;

inline Var attention_block(Tape& tape, Var seq, const BackboneVars::Block& b, int heads) {
  const int d = tape.value(seq).dim(1);
  const int dh = d / heads;
  Var h = tape.layer_norm_rows(seq, b.ln1_gamma, b.ln1_beta, kBlockLnEps);
  Var qkv = tape.linear(h, b.qkv_weight, b.qkv_bias);
  std::vector<Var> heads_ctx;
  for (int i = 0; i < heads; ++i) {
    Var q = tape.slice_cols(qkv, i * dh, dh);
    Var k = tape.slice_cols(qkv, d + i * dh, dh);
    Var v = tape.slice_cols(qkv, 2 * d + i * dh, dh);
    Var scores = tape.scale(tape.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    heads_ctx.push_back(tape.matmul(tape.row_softmax(scores), v));
  }
  Var ctx = tape.concat_cols(heads_ctx);
  return tape.add(seq, tape.linear(ctx, b.out_weight, b.out_bias));
}

inline Var mlp_block(Tape& tape, Var seq, const BackboneVars::Block& b) {
  Var h = tape.layer_norm_rows(seq, b.ln2_gamma, b.ln2_beta, kBlockLnEps);
  Var m = tape.linear(tape.gelu(tape.linear(h, b.mlp1_weight, b.mlp1_bias)), b.mlp2_weight,
                      b.mlp2_bias);
  return tape.add(seq, m);
}

// image (3,M,N) -> feature locations (HW, D). Patchify, add position
// embeddings to the patch tokens, prepend class and register tokens, run the
// pre-norm blocks, then drop the class/register tokens.
inline Var embed(Tape& tape, const Tensor& image, const BackboneVars& vars,
                 const BackboneConfig& cfg) {
  cfg.validate_image(image.dim(1), image.dim(2));
  Var patches = tape.constant(patchify(image, cfg.patch_size));
  Var tok = tape.add(tape.linear(patches, vars.patch_weight, vars.patch_bias), vars.pos_embed);
  Var seq = tape.concat_rows({vars.cls_token, vars.reg_tokens, tok});
  for (const BackboneVars::Block& b : vars.blocks) {
    seq = attention_block(tape, seq, b, cfg.heads);
    seq = mlp_block(tape, seq, b);
  }
  const int hw = tape.value(patches).dim(0);
  return tape.slice_rows(seq, 1 + cfg.register_tokens, hw);
}

}  // namespace backbone_ops

// Plain embedding: (3,M,N) image -> (D, M/P, N/P) feature map.
inline Tensor embed(const Tensor& image, const BackboneParams& params,
                    const BackboneConfig& cfg) {
  cfg.validate_image(image.dim(1), image.dim(2));
  const int gh = image.dim(1) / cfg.patch_size, gw = image.dim(2) / cfg.patch_size;
  if (params.pos_embed.dim(0) != gh * gw)
    throw ConfigError("position embedding covers " + std::to_string(params.pos_embed.dim(0)) +
                      " tokens but the image yields " + std::to_string(gh * gw));
  Tape tape;
  BackboneVars vars = make_backbone_vars(tape, params, [](const std::string&) { return false; });
  Var feats = backbone_ops::embed(tape, image, vars, cfg);
  return locmat_to_chw(tape.value(feats), gh, gw);
}

// ---- precomputed feature containers ----

// Yields (sample_id, FeatureMap) pairs from a PDSC container holding
// "feat/<sample_id>" entries, so features exported from a real pretrained
// backbone can stand in for the desk-scale one.
inline std::vector<std::pair<std::string, Tensor>> load_precomputed_features(
    const std::string& path, int expected_feat_dim = -1) {
  ContainerReader reader(path);
  std::vector<std::pair<std::string, Tensor>> out;
  for (const std::string& name : reader.names()) {
    if (name.rfind("feat/", 0) != 0) continue;
    Tensor t = reader.tensor(name);
    if (t.rank() != 3)
      throw FormatError(path + ": entry '" + name + "' must be a (D,H,W) tensor");
    if (expected_feat_dim > 0 && t.dim(0) != expected_feat_dim)
      throw ConfigError(path + ": entry '" + name + "' has feature dim " +
                        std::to_string(t.dim(0)) + " but the model expects " +
                        std::to_string(expected_feat_dim));
    out.emplace_back(name.substr(5), std::move(t));
  }
  return out;
}

}  // namespace pdisco
