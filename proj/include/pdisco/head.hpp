#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pdisco/autodiff.hpp"
#include "pdisco/errors.hpp"
#include "pdisco/rng.hpp"
#include "pdisco/tensor.hpp"

namespace pdisco {

struct ModelConfig {
  int num_parts = 4;   // foreground parts; one extra background channel exists
  int num_classes = 2;
  int feat_dim = 64;
  int grid_h = 8;
  int grid_w = 8;
  bool gumbel_enabled = true;
  double gumbel_temperature = 1.0;
  double part_dropout_rate = 0.3;
  double layernorm_epsilon = 1e-5;
  bool modulation_enabled = true;

  int channels() const { return num_parts + 1; }
  int locations() const { return grid_h * grid_w; }

  void validate() const {
    if (num_parts < 1) throw ConfigError("num_parts must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (feat_dim < 1) throw ConfigError("feat_dim must be >= 1");
    if (grid_h < 2 || grid_w < 2) throw ConfigError("grid must be at least 2x2");
    if (gumbel_temperature <= 0.0) throw ConfigError("gumbel_temperature must be > 0");
    if (part_dropout_rate < 0.0 || part_dropout_rate >= 1.0)
      throw ConfigError("part_dropout_rate must lie in [0,1)");
    if (layernorm_epsilon <= 0.0) throw ConfigError("layernorm_epsilon must be > 0");
  }
};

struct HeadParams {
  Tensor prototypes;  // (K+1, D)
  Tensor mod_weight;  // (K+1, D)
  Tensor mod_bias;    // (K+1, D)
  Tensor classifier;  // (C, D)

  static HeadParams init(const ModelConfig& cfg, RandomSource& rng) {
    cfg.validate();
    HeadParams p;
    p.prototypes = Tensor({cfg.channels(), cfg.feat_dim});
    for (int i = 0; i < p.prototypes.numel(); ++i) p.prototypes[i] = rng.normal(0.0, 0.02);
    p.mod_weight = Tensor({cfg.channels(), cfg.feat_dim}, 1.0);
    p.mod_bias = Tensor({cfg.channels(), cfg.feat_dim}, 0.0);
    p.classifier = Tensor({cfg.num_classes, cfg.feat_dim});
    for (int i = 0; i < p.classifier.numel(); ++i) p.classifier[i] = rng.normal(0.0, 0.02);
    return p;
  }
};

struct ClassScores {
  Tensor per_part;  // (K, C)
  Tensor mean;      // (C)
};

// ---- layout helpers ----

// (c,h,w) -> (h*w, c)
inline Tensor chw_to_locmat(const Tensor& chw) {
  if (chw.rank() != 3) throw ConfigError("chw_to_locmat expects rank-3");
  const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Tensor out({h * w, c});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out[(i * w + j) * c + ch] = chw.at3(ch, i, j);
  return out;
}

// (h*w, c) -> (c,h,w)
inline Tensor locmat_to_chw(const Tensor& lm, int h, int w) {
  if (lm.rank() != 2 || lm.dim(0) != h * w) throw ConfigError("locmat_to_chw shape mismatch");
  const int c = lm.dim(1);
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out.at3(ch, i, j) = lm[(i * w + j) * c + ch];
  return out;
}

// Gumbel(0,1) noise for every (location, channel), drawn location-major so the
// stream is reproducible independently of how the values are consumed.
inline Tensor draw_gumbel_noise(int locations, int channels, RandomSource& rng) {
  Tensor noise({locations, channels});
  for (int i = 0; i < noise.numel(); ++i) noise[i] = rng.gumbel();
  return noise;
}

// Per-row keep/scale factors for part dropout, expanded to (K+1, D). Each of
// the K foreground rows drops with probability `rate`; survivors are scaled by
// 1/(1-rate) so evaluation needs no rescaling. The background row never drops.
inline Tensor draw_dropout_scales(const ModelConfig& cfg, double rate, RandomSource& rng) {
  Tensor scales({cfg.channels(), cfg.feat_dim}, 1.0);
  if (rate <= 0.0) return scales;
  const double keep_scale = 1.0 / (1.0 - rate);
  for (int k = 0; k < cfg.num_parts; ++k) {
    const double factor = rng.uniform() < rate ? 0.0 : keep_scale;
    for (int d = 0; d < cfg.feat_dim; ++d) scales.at2(k, d) = factor;
  }
  return scales;
}

// ---- differentiable head graph ----

struct HeadVars {
  Var prototypes, mod_weight, mod_bias, classifier;
};

inline HeadVars make_head_vars(Tape& tape, const HeadParams& params, bool trainable = true) {
  return HeadVars{tape.leaf(params.prototypes, trainable), tape.leaf(params.mod_weight, trainable),
                  tape.leaf(params.mod_bias, trainable), tape.leaf(params.classifier, trainable)};
}

struct HeadGraph {
  Var logits;      // (L, K+1)
  Var attention;   // (L, K+1)
  Var pooled;      // (K+1, D)
  Var modulated;   // (K+1, D), before part dropout
  Var dropped;     // (K+1, D), after part dropout
  Var per_part;    // (K, C)
  Var mean_score;  // (C)
};

namespace head_ops {

inline Var attention_from_logits(Tape& tape, Var logits, const ModelConfig& cfg,
                                 const Tensor* gumbel_noise) {
  Var x = logits;
  if (gumbel_noise != nullptr) x = tape.add(x, tape.constant(*gumbel_noise));
  if (cfg.gumbel_temperature != 1.0) x = tape.scale(x, 1.0 / cfg.gumbel_temperature);
  return tape.row_softmax(x);
}

// Full head on feature locations (L, D). Pass gumbel_noise / dropout_scales as
// null to disable the respective mechanism (evaluation mode).
inline HeadGraph forward(Tape& tape, Var feats, const HeadVars& vars, const ModelConfig& cfg,
                         const Tensor* gumbel_noise, const Tensor* dropout_scales) {
  HeadGraph g;
  g.logits = tape.squared_distance_logits(feats, vars.prototypes);
  g.attention = attention_from_logits(tape, g.logits, cfg, gumbel_noise);
  g.pooled = tape.scale(tape.matmul_tn(g.attention, feats), 1.0 / cfg.locations());
  if (cfg.modulation_enabled) {
    g.modulated = tape.add(
        tape.mul(tape.normalize_all(g.pooled, cfg.layernorm_epsilon), vars.mod_weight),
        vars.mod_bias);
  } else {
    g.modulated = g.pooled;
  }
  g.dropped = dropout_scales != nullptr ? tape.mul_const(g.modulated, *dropout_scales)
                                        : g.modulated;
  g.per_part = tape.matmul_nt(tape.slice_rows(g.dropped, 0, cfg.num_parts), vars.classifier);
  g.mean_score = tape.mean_rows(g.per_part);
  return g;
}

}  // namespace head_ops

// ---- plain (value-level) operations ----

// out[k,i,j] = -||z_ij - p_k||^2
inline Tensor compute_part_logits(const Tensor& features, const Tensor& prototypes) {
  if (features.rank() != 3) throw ConfigError("features must be (D,H,W)");
  if (prototypes.rank() != 2) throw ConfigError("prototypes must be (K+1,D)");
  if (features.dim(0) != prototypes.dim(1))
    throw ConfigError("feature dim " + std::to_string(features.dim(0)) +
                      " does not match prototype dim " + std::to_string(prototypes.dim(1)));
  Tape tape;
  Var L = tape.squared_distance_logits(tape.constant(chw_to_locmat(features)),
                                       tape.constant(prototypes));
  return locmat_to_chw(tape.value(L), features.dim(1), features.dim(2));
}

inline Tensor gumbel_softmax_attention(const Tensor& logits, const ModelConfig& cfg,
                                       RandomSource& rng) {
  cfg.validate();
  if (logits.rank() != 3) throw ConfigError("logits must be (K+1,H,W)");
  if (!logits.all_finite()) throw NumericError("non-finite attention logits");
  const int h = logits.dim(1), w = logits.dim(2);
  Tensor noise;
  if (cfg.gumbel_enabled) noise = draw_gumbel_noise(h * w, logits.dim(0), rng);
  Tape tape;
  Var att = head_ops::attention_from_logits(tape, tape.constant(chw_to_locmat(logits)), cfg,
                                            cfg.gumbel_enabled ? &noise : nullptr);
  return locmat_to_chw(tape.value(att), h, w);
}

// v_k = sum_ij a_kij * z_ij / (H*W), background channel included
inline Tensor pool_part_embeddings(const Tensor& attention, const Tensor& features) {
  if (attention.rank() != 3 || features.rank() != 3)
    throw ConfigError("pooling expects (K+1,H,W) attention and (D,H,W) features");
  if (attention.dim(1) != features.dim(1) || attention.dim(2) != features.dim(2))
    throw ConfigError("attention grid " + attention.shape_string() +
                      " does not match feature grid " + features.shape_string());
  Tape tape;
  Var v = tape.matmul_tn(tape.constant(chw_to_locmat(attention)),
                         tape.constant(chw_to_locmat(features)));
  Tensor out = tape.value(v);
  const double inv = 1.0 / (attention.dim(1) * attention.dim(2));
  for (int i = 0; i < out.numel(); ++i) out[i] *= inv;
  return out;
}

// Joint standardization over all (K+1)*D entries, then per-part affine.
inline Tensor modulate(const Tensor& pooled, const Tensor& weight, const Tensor& bias,
                       double eps) {
  if (!pooled.same_shape(weight) || !pooled.same_shape(bias))
    throw ConfigError("modulation shape mismatch");
  Tape tape;
  Var v = tape.add(tape.mul(tape.normalize_all(tape.constant(pooled), eps), tape.constant(weight)),
                   tape.constant(bias));
  return tape.value(v);
}

inline Tensor part_dropout(const Tensor& modulated, double rate, RandomSource& rng,
                           bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0,1)");
  if (!training || rate == 0.0) return modulated;
  ModelConfig cfg;
  cfg.num_parts = modulated.dim(0) - 1;
  cfg.feat_dim = modulated.dim(1);
  Tensor scales = draw_dropout_scales(cfg, rate, rng);
  Tensor out = modulated;
  for (int i = 0; i < out.numel(); ++i) out[i] *= scales[i];
  return out;
}

// Per-part scores over foreground rows only; mean over the K parts.
inline ClassScores classify(const Tensor& modulated, const Tensor& classifier) {
  if (modulated.rank() != 2 || classifier.rank() != 2 || modulated.dim(1) != classifier.dim(1))
    throw ConfigError("classifier dim " + classifier.shape_string() +
                      " does not match embeddings " + modulated.shape_string());
  const int k = modulated.dim(0) - 1;
  if (k < 1) throw ConfigError("need at least one foreground part");
  Tape tape;
  Var fg = tape.slice_rows(tape.constant(modulated), 0, k);
  Var pp = tape.matmul_nt(fg, tape.constant(classifier));
  Var mean = tape.mean_rows(pp);
  return ClassScores{tape.value(pp), tape.value(mean)};
}

struct HeadForward {
  Tensor logits;     // (K+1,H,W)
  Tensor attention;  // (K+1,H,W)
  Tensor pooled;     // (K+1,D)
  Tensor modulated;  // (K+1,D), before dropout; this is what the losses see
  Tensor dropped;    // (K+1,D), what the classifier saw
  ClassScores scores;
};

// The composed head: logits -> attention -> pooling -> modulation -> part
// dropout -> classification. Stochastic pieces draw from `rng` in a fixed
// order (gumbel noise first, then the dropout mask).
inline HeadForward head_forward(const Tensor& features, const HeadParams& params,
                                const ModelConfig& cfg, RandomSource& rng, bool training) {
  cfg.validate();
  require_shape(features, {cfg.feat_dim, cfg.grid_h, cfg.grid_w}, "head features");
  Tensor noise, scales;
  const bool use_gumbel = cfg.gumbel_enabled && training;
  if (use_gumbel) noise = draw_gumbel_noise(cfg.locations(), cfg.channels(), rng);
  const bool use_dropout = training && cfg.part_dropout_rate > 0.0;
  if (use_dropout) scales = draw_dropout_scales(cfg, cfg.part_dropout_rate, rng);

  Tape tape;
  HeadVars vars = make_head_vars(tape, params, false);
  HeadGraph g = head_ops::forward(tape, tape.constant(chw_to_locmat(features)), vars, cfg,
                                  use_gumbel ? &noise : nullptr, use_dropout ? &scales : nullptr);
  HeadForward out;
  out.logits = locmat_to_chw(tape.value(g.logits), cfg.grid_h, cfg.grid_w);
  out.attention = locmat_to_chw(tape.value(g.attention), cfg.grid_h, cfg.grid_w);
  out.pooled = tape.value(g.pooled);
  out.modulated = tape.value(g.modulated);
  out.dropped = tape.value(g.dropped);
  out.scores = ClassScores{tape.value(g.per_part), tape.value(g.mean_score)};
  return out;
}

}  // namespace pdisco
