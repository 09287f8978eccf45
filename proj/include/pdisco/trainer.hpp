#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pdisco/backbone.hpp"
#include "pdisco/container.hpp"
#include "pdisco/data_synth.hpp"
#include "pdisco/errors.hpp"
#include "pdisco/head.hpp"
#include "pdisco/losses.hpp"
#include "pdisco/metrics.hpp"
#include "pdisco/parallel.hpp"
#include "pdisco/warp.hpp"

namespace pdisco {

struct Model {
  ModelConfig head_cfg;
  BackboneConfig backbone_cfg;
  BackboneParams backbone;
  HeadParams head;

  static Model init(const ModelConfig& head_cfg, const BackboneConfig& backbone_cfg,
                    std::uint64_t seed) {
    head_cfg.validate();
    backbone_cfg.validate();
    if (head_cfg.feat_dim != backbone_cfg.feat_dim)
      throw ConfigError("head and backbone disagree on the feature dimension");
    Model m;
    m.head_cfg = head_cfg;
    m.backbone_cfg = backbone_cfg;
    RandomSource rng(hash_mix(seed, 0x1217ULL));
    m.backbone = BackboneParams::init(backbone_cfg, head_cfg.grid_h, head_cfg.grid_w, rng);
    m.head = HeadParams::init(head_cfg, rng);
    return m;
  }

  ParamRefs parameters() {
    ParamRefs refs = backbone_parameters(backbone);
    refs.emplace_back("head.prototypes", &head.prototypes);
    refs.emplace_back("head.mod_weight", &head.mod_weight);
    refs.emplace_back("head.mod_bias", &head.mod_bias);
    refs.emplace_back("head.classifier", &head.classifier);
    return refs;
  }

  // Appendix-style optimizer groups: backbone tokens (and, in full mode, the
  // rest of the backbone), the prototypes, and modulation + classifier.
  enum class Group { backbone_tokens, prototypes, modulation_classifier };

  static Group group_of(const std::string& name) {
    if (name.rfind("backbone.", 0) == 0) return Group::backbone_tokens;
    if (name == "head.prototypes") return Group::prototypes;
    return Group::modulation_classifier;
  }

  bool is_trainable(const std::string& name) const {
    if (name.rfind("backbone.", 0) != 0) return true;  // head params always train
    switch (backbone_cfg.train_mode) {
      case TrainMode::frozen: return false;
      case TrainMode::full: return true;
      case TrainMode::tokens_only: return is_token_parameter(name);
    }
    return false;
  }
};

struct TrainConfig {
  int epochs = 28;
  int batch_size = 16;
  double lr_backbone_tokens = 1e-6;
  double lr_prototypes = 1e-3;
  double lr_modulation_classifier = 1e-2;
  double lr_decay_factor = 0.5;
  int lr_decay_every = 4;
  double grad_clip_norm = 2.0;
  LossWeights weights;
  double part_dropout = 0.3;
  std::uint64_t seed = 42;
  AffineRanges affine;
  bool deterministic = true;
  int threads = 0;  // 0 = hardware, capped by PDISCO_THREADS

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (lr_backbone_tokens <= 0 || lr_prototypes <= 0 || lr_modulation_classifier <= 0)
      throw ConfigError("learning rates must be > 0");
    if (lr_decay_every < 1) throw ConfigError("lr_decay_every must be >= 1");
    if (grad_clip_norm <= 0) throw ConfigError("grad_clip_norm must be > 0");
    if (part_dropout < 0 || part_dropout >= 1) throw ConfigError("part_dropout must be in [0,1)");
    weights.validate();
  }
};

// square-root batch scaling against the reference batch of 16
inline double scale_lr_for_batch(double base_lr, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  return base_lr * std::sqrt(batch_size / 16.0);
}

struct GroupLrs {
  double backbone_tokens = 0, prototypes = 0, modulation_classifier = 0;

  double of(Model::Group g) const {
    switch (g) {
      case Model::Group::backbone_tokens: return backbone_tokens;
      case Model::Group::prototypes: return prototypes;
      case Model::Group::modulation_classifier: return modulation_classifier;
    }
    return 0;
  }
};

// step schedule: base * factor^floor(epoch / every), batch scaling included
inline GroupLrs lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("epoch must be >= 0");
  const double decay = std::pow(cfg.lr_decay_factor, epoch / cfg.lr_decay_every);
  GroupLrs lrs;
  lrs.backbone_tokens = scale_lr_for_batch(cfg.lr_backbone_tokens, cfg.batch_size) * decay;
  lrs.prototypes = scale_lr_for_batch(cfg.lr_prototypes, cfg.batch_size) * decay;
  lrs.modulation_classifier =
      scale_lr_for_batch(cfg.lr_modulation_classifier, cfg.batch_size) * decay;
  return lrs;
}

struct AdamState {
  std::vector<Tensor> m, v;  // ordered like Model::parameters()
  long step = 0;

  static AdamState init(Model& model) {
    AdamState s;
    for (auto& [name, tensor] : model.parameters()) {
      (void)name;
      s.m.emplace_back(tensor->dims());
      s.v.emplace_back(tensor->dims());
    }
    return s;
  }
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

struct LossBreakdown {
  LossTerms terms;
  double total = 0.0;
  double grad_norm_preclip = 0.0;
  double grad_norm_used = 0.0;
};

namespace trainer_detail {

// rng stream tags so toggling one mechanism never shifts another's draws
inline constexpr std::uint64_t kStreamGumbel = 0x67756d31;
inline constexpr std::uint64_t kStreamGumbelTwin = 0x67756d32;
inline constexpr std::uint64_t kStreamDropout = 0x64726f70;
inline constexpr std::uint64_t kStreamAffine = 0x61666669;
inline constexpr std::uint64_t kStreamShuffle = 0x73687566;

inline RandomSource stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t epoch,
                           std::uint64_t step, std::uint64_t item) {
  return RandomSource(hash_mix({seed, tag, epoch, step, item}));
}

struct ImageGraph {
  std::unique_ptr<Tape> tape;
  BackboneVars backbone_vars;
  HeadVars head_vars;
  std::vector<Var> param_vars;    // ordered like Model::parameters()
  HeadGraph head;
  Var pooled_attention;           // (L, K+1)
  Var equivariance;               // invalid when disabled
  double cls = 0, orth = 0, ent = 0, tv = 0, p0 = 0, eq = 0;
  Var cls_v, orth_v, ent_v, tv_v, p0_v;
};

inline std::vector<Var> flatten_param_vars(const BackboneVars& bv, const HeadVars& hv) {
  std::vector<Var> flat = {bv.patch_weight, bv.patch_bias, bv.cls_token, bv.reg_tokens,
                           bv.pos_embed};
  for (const auto& blk : bv.blocks) {
    flat.insert(flat.end(), {blk.ln1_gamma, blk.ln1_beta, blk.qkv_weight, blk.qkv_bias,
                             blk.out_weight, blk.out_bias, blk.ln2_gamma, blk.ln2_beta,
                             blk.mlp1_weight, blk.mlp1_bias, blk.mlp2_weight, blk.mlp2_bias});
  }
  flat.insert(flat.end(), {hv.prototypes, hv.mod_weight, hv.mod_bias, hv.classifier});
  return flat;
}

}  // namespace trainer_detail

// One optimization step over a batch: forward on the originals, a second
// attention-only pass on affine-transformed copies for the equivariance term,
// the seven-term weighted loss, global gradient clipping, and a per-group
// Adam update. Returns the per-term values for logging.
inline LossBreakdown train_step(Model& model, AdamState& adam,
                                const std::vector<const AnnotatedSample*>& batch,
                                const TrainConfig& cfg, int epoch, int step_index) {
  using namespace trainer_detail;
  cfg.validate();
  if (batch.empty()) throw InputError("train_step: empty batch");
  const int b = static_cast<int>(batch.size());
  const ModelConfig& hc = model.head_cfg;
  const int k = hc.num_parts, channels = hc.channels(), locations = hc.locations();
  const LossWeights& w = cfg.weights;
  const bool use_gumbel = hc.gumbel_enabled;
  const bool use_dropout = cfg.part_dropout > 0.0;
  const bool use_equivariance = w.equivariance > 0.0;
  const int threads = worker_count(cfg.threads);

  const Tensor mask2d = center_mask(hc.grid_h, hc.grid_w);
  Tensor mask_flat({locations});
  for (int i = 0; i < locations; ++i) mask_flat[i] = mask2d[i];

  auto trainable = [&](const std::string& name) { return model.is_trainable(name); };

  // phase 1: build per-image graphs (losses except presence_fg)
  std::vector<ImageGraph> graphs(static_cast<std::size_t>(b));
  parallel_for(b, threads, [&](int i) {
    const AnnotatedSample& sample = *batch[i];
    ImageGraph& g = graphs[static_cast<std::size_t>(i)];
    g.tape = std::make_unique<Tape>();
    Tape& tape = *g.tape;
    g.backbone_vars = make_backbone_vars(tape, model.backbone, trainable);
    g.head_vars = make_head_vars(tape, model.head, true);
    g.param_vars = flatten_param_vars(g.backbone_vars, g.head_vars);

    const Tensor image = sample.image_tensor();
    Var feats = backbone_ops::embed(tape, image, g.backbone_vars, model.backbone_cfg);

    Tensor noise, scales;
    if (use_gumbel) {
      RandomSource r = stream(cfg.seed, kStreamGumbel, epoch, step_index, i);
      noise = draw_gumbel_noise(locations, channels, r);
    }
    if (use_dropout) {
      RandomSource r = stream(cfg.seed, kStreamDropout, epoch, step_index, i);
      scales = draw_dropout_scales(hc, cfg.part_dropout, r);
    }
    g.head = head_ops::forward(tape, feats, g.head_vars, hc, use_gumbel ? &noise : nullptr,
                               use_dropout ? &scales : nullptr);

    if (w.classification > 0)
      g.cls_v = loss_ops::classification(tape, g.head.mean_score, sample.class_id);
    if (w.orthogonality > 0) g.orth_v = loss_ops::orthogonality(tape, g.head.modulated);
    if (w.entropy > 0) g.ent_v = loss_ops::entropy(tape, g.head.attention, channels);
    if (w.total_variation > 0)
      g.tv_v = loss_ops::total_variation(tape, g.head.attention, hc.grid_h, hc.grid_w);
    if (w.presence_fg > 0 || w.presence_bg > 0)
      g.pooled_attention = loss_ops::pooled_attention(tape, g.head.attention, hc.grid_h,
                                                      hc.grid_w);
    if (w.presence_bg > 0)
      g.p0_v = loss_ops::presence_bg_term(tape, g.pooled_attention, mask_flat, channels - 1);

    if (use_equivariance) {
      RandomSource affine_rng = stream(cfg.seed, kStreamAffine, epoch, step_index, i);
      const AffineTransform t = sample_affine(affine_rng, cfg.affine);
      Var feats2 =
          backbone_ops::embed(tape, warp(image, t, false), g.backbone_vars, model.backbone_cfg);
      Var logits2 = tape.squared_distance_logits(feats2, g.head_vars.prototypes);
      Tensor noise2;
      if (use_gumbel) {
        RandomSource r = stream(cfg.seed, kStreamGumbelTwin, epoch, step_index, i);
        noise2 = draw_gumbel_noise(locations, channels, r);
      }
      Var att2 =
          head_ops::attention_from_logits(tape, logits2, hc, use_gumbel ? &noise2 : nullptr);
      g.equivariance = loss_ops::equivariance(tape, g.head.attention, att2, hc.grid_h,
                                              hc.grid_w, t, k);
    }

    auto grab = [&](Var v) { return v.valid() ? tape.value(v)[0] : 0.0; };
    g.cls = grab(g.cls_v);
    g.orth = grab(g.orth_v);
    g.ent = grab(g.ent_v);
    g.tv = grab(g.tv_v);
    g.p0 = grab(g.p0_v);
    g.eq = grab(g.equivariance);
  });

  // batch term values + non-finite checks naming the term and batch index
  LossBreakdown out;
  auto check_term = [&](double v, const char* name, int index) {
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite ") + name + " loss at batch index " +
                         std::to_string(index));
    return v;
  };
  for (int i = 0; i < b; ++i) {
    const ImageGraph& g = graphs[static_cast<std::size_t>(i)];
    if (w.classification > 0) out.terms.classification += check_term(g.cls, "classification", i);
    if (w.orthogonality > 0) out.terms.orthogonality += check_term(g.orth, "orthogonality", i);
    if (w.entropy > 0) out.terms.entropy += check_term(g.ent, "entropy", i);
    if (w.total_variation > 0)
      out.terms.total_variation += check_term(g.tv, "total_variation", i);
    if (w.presence_bg > 0) out.terms.presence_bg += check_term(g.p0, "presence_bg", i);
    if (use_equivariance) out.terms.equivariance += check_term(g.eq, "equivariance", i);
  }
  out.terms.classification /= b;
  out.terms.orthogonality /= b;
  out.terms.entropy /= b;
  out.terms.total_variation /= b;
  out.terms.presence_bg /= b;
  out.terms.equivariance /= b;

  // presence_fg couples the batch through a max; pick the winning pooled cell
  // per part (lowest batch index, then lowest location on ties)
  std::vector<int> win_image(static_cast<std::size_t>(k), -1);
  std::vector<int> win_flat(static_cast<std::size_t>(k), -1);
  if (w.presence_fg > 0) {
    double best_sum = 0.0;
    for (int part = 0; part < k; ++part) {
      double best = -1e300;
      for (int i = 0; i < b; ++i) {
        const Tensor& pooled = graphs[static_cast<std::size_t>(i)].tape->value(
            graphs[static_cast<std::size_t>(i)].pooled_attention);
        for (int loc = 0; loc < locations; ++loc) {
          const double v = pooled[loc * channels + part];
          if (v > best) {
            best = v;
            win_image[static_cast<std::size_t>(part)] = i;
            win_flat[static_cast<std::size_t>(part)] = loc * channels + part;
          }
        }
      }
      best_sum += check_term(best, "presence_fg", win_image[static_cast<std::size_t>(part)]);
    }
    out.terms.presence_fg = 1.0 - best_sum / k;
  }

  out.total = total_loss(out.terms, w);

  // phase 2: per-image weighted objectives and backward passes
  parallel_for(b, threads, [&](int i) {
    ImageGraph& g = graphs[static_cast<std::size_t>(i)];
    Tape& tape = *g.tape;
    Var obj;
    auto add_term = [&](Var v, double weight) {
      if (!v.valid() || weight == 0.0) return;
      Var scaled = tape.scale(v, weight / b);
      obj = obj.valid() ? tape.add(obj, scaled) : scaled;
    };
    add_term(g.cls_v, w.classification);
    add_term(g.orth_v, w.orthogonality);
    add_term(g.ent_v, w.entropy);
    add_term(g.tv_v, w.total_variation);
    add_term(g.p0_v, w.presence_bg);
    add_term(g.equivariance, w.equivariance);
    if (w.presence_fg > 0) {
      for (int part = 0; part < k; ++part) {
        if (win_image[static_cast<std::size_t>(part)] != i) continue;
        Var picked = tape.pick(g.pooled_attention, win_flat[static_cast<std::size_t>(part)]);
        Var scaled = tape.scale(picked, -w.presence_fg / k);
        obj = obj.valid() ? tape.add(obj, scaled) : scaled;
      }
    }
    if (obj.valid()) tape.backward(obj);
  });

  // phase 3: deterministic reduction in parameter order, clip, Adam
  ParamRefs refs = model.parameters();
  std::vector<Tensor> grads;
  grads.reserve(refs.size());
  double norm_sq = 0.0;
  for (std::size_t p = 0; p < refs.size(); ++p) {
    Tensor g(refs[p].second->dims());
    if (model.is_trainable(refs[p].first)) {
      for (int i = 0; i < b; ++i) {
        const ImageGraph& ig = graphs[static_cast<std::size_t>(i)];
        const Tensor gi = ig.tape->gradient(ig.param_vars[p]);
        for (int e = 0; e < g.numel(); ++e) g[e] += gi[e];
      }
    }
    for (int e = 0; e < g.numel(); ++e) norm_sq += g[e] * g[e];
    grads.push_back(std::move(g));
  }
  graphs.clear();

  out.grad_norm_preclip = std::sqrt(norm_sq);
  const double clip_scale =
      out.grad_norm_preclip > cfg.grad_clip_norm && out.grad_norm_preclip > 0.0
          ? cfg.grad_clip_norm / out.grad_norm_preclip
          : 1.0;
  out.grad_norm_used = out.grad_norm_preclip * clip_scale;

  const GroupLrs lrs = lr_at(epoch, cfg);
  adam.step += 1;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(adam.step));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(adam.step));
  for (std::size_t p = 0; p < refs.size(); ++p) {
    if (!model.is_trainable(refs[p].first)) continue;
    const double lr = lrs.of(Model::group_of(refs[p].first));
    Tensor& param = *refs[p].second;
    Tensor& m = adam.m[p];
    Tensor& v = adam.v[p];
    const Tensor& g = grads[p];
    for (int e = 0; e < param.numel(); ++e) {
      const double ge = g[e] * clip_scale;
      m[e] = kAdamBeta1 * m[e] + (1.0 - kAdamBeta1) * ge;
      v[e] = kAdamBeta2 * v[e] + (1.0 - kAdamBeta2) * ge * ge;
      param[e] -= lr * (m[e] / bc1) / (std::sqrt(v[e] / bc2) + kAdamEpsilon);
    }
  }
  return out;
}

// ---- evaluation helper (validation top-1) ----

inline double evaluate_top1(Model& model, const Dataset& ds, const std::vector<int>& indices,
                            int threads = 0) {
  if (indices.empty()) throw InputError("evaluate_top1: no samples");
  ModelConfig eval_cfg = model.head_cfg;
  eval_cfg.gumbel_enabled = false;
  std::vector<int> hits(indices.size(), 0);
  const int t = worker_count(threads);
  parallel_for(static_cast<int>(indices.size()), t, [&](int i) {
    const AnnotatedSample& s = ds.samples[static_cast<std::size_t>(indices[i])];
    const Tensor feats = embed(s.image_tensor(), model.backbone, model.backbone_cfg);
    RandomSource rng(0);
    const HeadForward fwd = head_forward(feats, model.head, eval_cfg, rng, false);
    int best = 0;
    for (int c = 1; c < eval_cfg.num_classes; ++c)
      if (fwd.scores.mean[c] > fwd.scores.mean[best]) best = c;
    hits[static_cast<std::size_t>(i)] = best == s.class_id;
  });
  long correct = 0;
  for (int h : hits) correct += h;
  return static_cast<double>(correct) / indices.size();
}

// ---- checkpoints ----

struct Checkpoint {
  Model model;
  AdamState adam;
  TrainConfig train_cfg;
  int next_epoch = 0;
  double best_val = -1.0;
};

inline void save_checkpoint(const std::string& path, Model& model, const AdamState& adam,
                            const TrainConfig& cfg, int next_epoch, double best_val) {
  ContainerWriter w;
  ParamRefs refs = model.parameters();
  for (std::size_t p = 0; p < refs.size(); ++p) {
    w.add_tensor("param/" + refs[p].first, *refs[p].second);
    w.add_tensor("adam/m/" + refs[p].first, adam.m[p]);
    w.add_tensor("adam/v/" + refs[p].first, adam.v[p]);
  }
  w.add_scalar_i64("meta/next_epoch", next_epoch);
  w.add_scalar_i64("meta/adam_step", adam.step);
  w.add_scalar_f64("meta/best_val", best_val);
  w.add_scalar_i64("meta/seed", static_cast<std::int64_t>(cfg.seed));

  const ModelConfig& hc = model.head_cfg;
  w.add_scalar_i64("cfg/model/num_parts", hc.num_parts);
  w.add_scalar_i64("cfg/model/num_classes", hc.num_classes);
  w.add_scalar_i64("cfg/model/feat_dim", hc.feat_dim);
  w.add_scalar_i64("cfg/model/grid_h", hc.grid_h);
  w.add_scalar_i64("cfg/model/grid_w", hc.grid_w);
  w.add_scalar_i64("cfg/model/gumbel_enabled", hc.gumbel_enabled ? 1 : 0);
  w.add_scalar_f64("cfg/model/gumbel_temperature", hc.gumbel_temperature);
  w.add_scalar_f64("cfg/model/part_dropout_rate", hc.part_dropout_rate);
  w.add_scalar_f64("cfg/model/layernorm_epsilon", hc.layernorm_epsilon);
  w.add_scalar_i64("cfg/model/modulation_enabled", hc.modulation_enabled ? 1 : 0);

  const BackboneConfig& bc = model.backbone_cfg;
  w.add_scalar_i64("cfg/backbone/patch_size", bc.patch_size);
  w.add_scalar_i64("cfg/backbone/depth", bc.depth);
  w.add_scalar_i64("cfg/backbone/heads", bc.heads);
  w.add_scalar_i64("cfg/backbone/feat_dim", bc.feat_dim);
  w.add_scalar_i64("cfg/backbone/register_tokens", bc.register_tokens);
  w.add_scalar_i64("cfg/backbone/train_mode", static_cast<std::int64_t>(bc.train_mode));

  w.add_scalar_i64("cfg/train/epochs", cfg.epochs);
  w.add_scalar_i64("cfg/train/batch_size", cfg.batch_size);
  w.add_scalar_f64("cfg/train/lr_backbone_tokens", cfg.lr_backbone_tokens);
  w.add_scalar_f64("cfg/train/lr_prototypes", cfg.lr_prototypes);
  w.add_scalar_f64("cfg/train/lr_modulation_classifier", cfg.lr_modulation_classifier);
  w.add_scalar_f64("cfg/train/lr_decay_factor", cfg.lr_decay_factor);
  w.add_scalar_i64("cfg/train/lr_decay_every", cfg.lr_decay_every);
  w.add_scalar_f64("cfg/train/grad_clip_norm", cfg.grad_clip_norm);
  w.add_scalar_f64("cfg/train/part_dropout", cfg.part_dropout);
  w.add_scalar_f64("cfg/train/w_classification", cfg.weights.classification);
  w.add_scalar_f64("cfg/train/w_orthogonality", cfg.weights.orthogonality);
  w.add_scalar_f64("cfg/train/w_equivariance", cfg.weights.equivariance);
  w.add_scalar_f64("cfg/train/w_presence_fg", cfg.weights.presence_fg);
  w.add_scalar_f64("cfg/train/w_presence_bg", cfg.weights.presence_bg);
  w.add_scalar_f64("cfg/train/w_entropy", cfg.weights.entropy);
  w.add_scalar_f64("cfg/train/w_total_variation", cfg.weights.total_variation);
  w.add_scalar_f64("cfg/train/affine_rotation_min", cfg.affine.rotation_min);
  w.add_scalar_f64("cfg/train/affine_rotation_max", cfg.affine.rotation_max);
  w.add_scalar_f64("cfg/train/affine_scale_min", cfg.affine.scale_min);
  w.add_scalar_f64("cfg/train/affine_scale_max", cfg.affine.scale_max);
  w.add_scalar_f64("cfg/train/affine_translate_min", cfg.affine.translate_min);
  w.add_scalar_f64("cfg/train/affine_translate_max", cfg.affine.translate_max);
  w.write(path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  ContainerReader r(path);
  Checkpoint ck;

  ModelConfig hc;
  hc.num_parts = static_cast<int>(r.scalar_i64("cfg/model/num_parts"));
  hc.num_classes = static_cast<int>(r.scalar_i64("cfg/model/num_classes"));
  hc.feat_dim = static_cast<int>(r.scalar_i64("cfg/model/feat_dim"));
  hc.grid_h = static_cast<int>(r.scalar_i64("cfg/model/grid_h"));
  hc.grid_w = static_cast<int>(r.scalar_i64("cfg/model/grid_w"));
  hc.gumbel_enabled = r.scalar_i64("cfg/model/gumbel_enabled") != 0;
  hc.gumbel_temperature = r.scalar_f64("cfg/model/gumbel_temperature");
  hc.part_dropout_rate = r.scalar_f64("cfg/model/part_dropout_rate");
  hc.layernorm_epsilon = r.scalar_f64("cfg/model/layernorm_epsilon");
  hc.modulation_enabled = r.scalar_i64("cfg/model/modulation_enabled") != 0;

  BackboneConfig bc;
  bc.patch_size = static_cast<int>(r.scalar_i64("cfg/backbone/patch_size"));
  bc.depth = static_cast<int>(r.scalar_i64("cfg/backbone/depth"));
  bc.heads = static_cast<int>(r.scalar_i64("cfg/backbone/heads"));
  bc.feat_dim = static_cast<int>(r.scalar_i64("cfg/backbone/feat_dim"));
  bc.register_tokens = static_cast<int>(r.scalar_i64("cfg/backbone/register_tokens"));
  bc.train_mode = static_cast<TrainMode>(r.scalar_i64("cfg/backbone/train_mode"));

  TrainConfig tc;
  tc.epochs = static_cast<int>(r.scalar_i64("cfg/train/epochs"));
  tc.batch_size = static_cast<int>(r.scalar_i64("cfg/train/batch_size"));
  tc.lr_backbone_tokens = r.scalar_f64("cfg/train/lr_backbone_tokens");
  tc.lr_prototypes = r.scalar_f64("cfg/train/lr_prototypes");
  tc.lr_modulation_classifier = r.scalar_f64("cfg/train/lr_modulation_classifier");
  tc.lr_decay_factor = r.scalar_f64("cfg/train/lr_decay_factor");
  tc.lr_decay_every = static_cast<int>(r.scalar_i64("cfg/train/lr_decay_every"));
  tc.grad_clip_norm = r.scalar_f64("cfg/train/grad_clip_norm");
  tc.part_dropout = r.scalar_f64("cfg/train/part_dropout");
  tc.seed = static_cast<std::uint64_t>(r.scalar_i64("meta/seed"));
  tc.weights.classification = r.scalar_f64("cfg/train/w_classification");
  tc.weights.orthogonality = r.scalar_f64("cfg/train/w_orthogonality");
  tc.weights.equivariance = r.scalar_f64("cfg/train/w_equivariance");
  tc.weights.presence_fg = r.scalar_f64("cfg/train/w_presence_fg");
  tc.weights.presence_bg = r.scalar_f64("cfg/train/w_presence_bg");
  tc.weights.entropy = r.scalar_f64("cfg/train/w_entropy");
  tc.weights.total_variation = r.scalar_f64("cfg/train/w_total_variation");
  tc.affine.rotation_min = r.scalar_f64("cfg/train/affine_rotation_min");
  tc.affine.rotation_max = r.scalar_f64("cfg/train/affine_rotation_max");
  tc.affine.scale_min = r.scalar_f64("cfg/train/affine_scale_min");
  tc.affine.scale_max = r.scalar_f64("cfg/train/affine_scale_max");
  tc.affine.translate_min = r.scalar_f64("cfg/train/affine_translate_min");
  tc.affine.translate_max = r.scalar_f64("cfg/train/affine_translate_max");

  ck.model = Model::init(hc, bc, tc.seed);
  ck.train_cfg = tc;
  ck.adam = AdamState::init(ck.model);
  ParamRefs refs = ck.model.parameters();
  for (std::size_t p = 0; p < refs.size(); ++p) {
    *refs[p].second = r.tensor("param/" + refs[p].first);
    ck.adam.m[p] = r.tensor("adam/m/" + refs[p].first);
    ck.adam.v[p] = r.tensor("adam/v/" + refs[p].first);
  }
  ck.adam.step = r.scalar_i64("meta/adam_step");
  ck.next_epoch = static_cast<int>(r.scalar_i64("meta/next_epoch"));
  ck.best_val = r.scalar_f64("meta/best_val");
  return ck;
}

// Warm-starts the prototype bank with actual patch features: deterministic
// farthest-point selection over features of a spread of training images.
// Randomly initialized prototypes sit far off the feature manifold, and the
// background term then captures every location before the foreground
// prototypes ever see a gradient worth following.
inline void init_prototypes_from_data(Model& model, const Dataset& ds,
                                      const std::vector<int>& train_idx, std::uint64_t seed) {
  const int want = std::min<int>(32, static_cast<int>(train_idx.size()));
  std::vector<Tensor> feature_rows;
  for (int i = 0; i < want; ++i) {
    const int idx = train_idx[static_cast<std::size_t>(i) * train_idx.size() / want];
    const AnnotatedSample& s = ds.samples[static_cast<std::size_t>(idx)];
    feature_rows.push_back(
        chw_to_locmat(embed(s.image_tensor(), model.backbone, model.backbone_cfg)));
  }
  const int d = model.head_cfg.feat_dim, per_image = feature_rows[0].dim(0);
  const long total = static_cast<long>(feature_rows.size()) * per_image;
  auto feature_at = [&](long at) {
    return feature_rows[static_cast<std::size_t>(at / per_image)].data() +
           static_cast<std::size_t>(at % per_image) * d;
  };

  const int channels = model.head_cfg.channels();
  std::vector<long> chosen;
  chosen.push_back(static_cast<long>(hash_mix(seed, 0xBEEFULL) % static_cast<std::uint64_t>(total)));
  std::vector<double> min_dist(static_cast<std::size_t>(total), 1e300);
  while (static_cast<int>(chosen.size()) < channels) {
    const double* last = feature_at(chosen.back());
    long best = 0;
    double best_d = -1.0;
    for (long at = 0; at < total; ++at) {
      const double* f = feature_at(at);
      double dist = 0.0;
      for (int j = 0; j < d; ++j) dist += (f[j] - last[j]) * (f[j] - last[j]);
      double& md = min_dist[static_cast<std::size_t>(at)];
      md = std::min(md, dist);
      if (md > best_d) {
        best_d = md;
        best = at;
      }
    }
    chosen.push_back(best);
  }

  // Lloyd refinement turns the farthest-point seeds into cluster centers, so
  // each prototype opens as the mean of one feature mode instead of a single
  // (possibly peripheral) sample.
  std::vector<double> centers(static_cast<std::size_t>(channels) * d);
  for (int k = 0; k < channels; ++k) {
    const double* f = feature_at(chosen[static_cast<std::size_t>(k)]);
    std::copy(f, f + d, centers.begin() + static_cast<std::size_t>(k) * d);
  }
  std::vector<double> sums(centers.size());
  std::vector<long> counts(static_cast<std::size_t>(channels));
  for (int iter = 0; iter < 10; ++iter) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0L);
    for (long at = 0; at < total; ++at) {
      const double* f = feature_at(at);
      int best = 0;
      double best_d = 1e300;
      for (int k = 0; k < channels; ++k) {
        const double* c = centers.data() + static_cast<std::size_t>(k) * d;
        double dist = 0.0;
        for (int j = 0; j < d; ++j) dist += (f[j] - c[j]) * (f[j] - c[j]);
        if (dist < best_d) {
          best_d = dist;
          best = k;
        }
      }
      double* s = sums.data() + static_cast<std::size_t>(best) * d;
      for (int j = 0; j < d; ++j) s[j] += f[j];
      ++counts[static_cast<std::size_t>(best)];
    }
    for (int k = 0; k < channels; ++k) {
      if (counts[static_cast<std::size_t>(k)] == 0) continue;  // keep the old center
      double* c = centers.data() + static_cast<std::size_t>(k) * d;
      const double* s = sums.data() + static_cast<std::size_t>(k) * d;
      for (int j = 0; j < d; ++j) c[j] = s[j] / counts[static_cast<std::size_t>(k)];
    }
  }

  // the center nearest the mean border feature claims the background row
  const int gh = model.head_cfg.grid_h, gw = model.head_cfg.grid_w;
  std::vector<double> border_mean(static_cast<std::size_t>(d), 0.0);
  long border_count = 0;
  for (const Tensor& rows : feature_rows)
    for (int i = 0; i < gh; ++i)
      for (int j = 0; j < gw; ++j) {
        if (i != 0 && i != gh - 1 && j != 0 && j != gw - 1) continue;
        const double* f = rows.data() + static_cast<std::size_t>(i * gw + j) * d;
        for (int e = 0; e < d; ++e) border_mean[static_cast<std::size_t>(e)] += f[e];
        ++border_count;
      }
  for (double& v : border_mean) v /= border_count;
  int bg_pick = 0;
  double bg_dist = 1e300;
  for (int k = 0; k < channels; ++k) {
    const double* c = centers.data() + static_cast<std::size_t>(k) * d;
    double dist = 0.0;
    for (int j = 0; j < d; ++j) dist += (c[j] - border_mean[static_cast<std::size_t>(j)]) *
                                        (c[j] - border_mean[static_cast<std::size_t>(j)]);
    if (dist < bg_dist) {
      bg_dist = dist;
      bg_pick = k;
    }
  }
  for (int j = 0; j < d; ++j)
    std::swap(centers[static_cast<std::size_t>(bg_pick) * d + j],
              centers[static_cast<std::size_t>(channels - 1) * d + j]);

  for (int k = 0; k < channels; ++k)
    for (int j = 0; j < d; ++j)
      model.head.prototypes.at2(k, j) = centers[static_cast<std::size_t>(k) * d + j];
}

// ---- the fit loop ----

struct HistoryRow {
  int epoch = 0;
  std::string term;
  double value = 0.0;
};

struct FitResult {
  std::vector<HistoryRow> history;
  double best_val = -1.0;
  std::string best_path;
};

// Runs epochs of train_step with the step schedule, evaluates validation
// top-1 each epoch, writes epoch_<e>.ckpt plus a `best` checkpoint, and
// appends history.csv. Pass a Checkpoint to resume from its epoch counter.
inline FitResult fit(const Dataset& ds, Model& model, const TrainConfig& cfg,
                     const std::string& out_dir, AdamState* resume_adam = nullptr,
                     int start_epoch = 0, double start_best = -1.0) {
  cfg.validate();
  if (model.head_cfg.num_classes != ds.num_classes)
    throw ConfigError("model expects " + std::to_string(model.head_cfg.num_classes) +
                      " classes, dataset has " + std::to_string(ds.num_classes));
  const std::vector<int> train_idx = ds.split_indices(Split::train);
  const std::vector<int> val_idx = ds.split_indices(Split::val);
  if (train_idx.empty() || val_idx.empty())
    throw InputError("fit requires non-empty train and val splits");

  std::filesystem::create_directories(out_dir);
  const std::string history_path = out_dir + "/history.csv";
  if (start_epoch == 0) {
    std::ofstream h(history_path, std::ios::trunc);
    h << "epoch,term,value\n";
    init_prototypes_from_data(model, ds, train_idx, cfg.seed);
  }

  AdamState local_adam;
  AdamState& adam = resume_adam ? *resume_adam : local_adam;
  if (!resume_adam) adam = AdamState::init(model);

  FitResult result;
  result.best_val = start_best;
  result.best_path = out_dir + "/best.ckpt";

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = train_idx;
    RandomSource shuffle_rng(hash_mix({cfg.seed, trainer_detail::kStreamShuffle,
                                       static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    LossTerms sums;
    double total_sum = 0.0;
    int steps = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      std::vector<const AnnotatedSample*> batch;
      for (std::size_t i = at; i < std::min(order.size(), at + cfg.batch_size); ++i)
        batch.push_back(&ds.samples[static_cast<std::size_t>(order[i])]);
      const LossBreakdown lb = train_step(model, adam, batch, cfg, epoch, steps);
      sums.classification += lb.terms.classification;
      sums.orthogonality += lb.terms.orthogonality;
      sums.equivariance += lb.terms.equivariance;
      sums.presence_fg += lb.terms.presence_fg;
      sums.presence_bg += lb.terms.presence_bg;
      sums.entropy += lb.terms.entropy;
      sums.total_variation += lb.terms.total_variation;
      total_sum += lb.total;
      ++steps;
    }

    const double val_top1 = evaluate_top1(model, ds, val_idx, cfg.threads);

    std::ofstream h(history_path, std::ios::app);
    auto push = [&](const std::string& term, double value) {
      result.history.push_back(HistoryRow{epoch, term, value});
      h << epoch << "," << term << "," << value << "\n";
    };
    const LossWeights& w = cfg.weights;
    if (w.classification > 0) push("classification", sums.classification / steps);
    if (w.orthogonality > 0) push("orthogonality", sums.orthogonality / steps);
    if (w.equivariance > 0) push("equivariance", sums.equivariance / steps);
    if (w.presence_fg > 0) push("presence_fg", sums.presence_fg / steps);
    if (w.presence_bg > 0) push("presence_bg", sums.presence_bg / steps);
    if (w.entropy > 0) push("entropy", sums.entropy / steps);
    if (w.total_variation > 0) push("total_variation", sums.total_variation / steps);
    push("total", total_sum / steps);
    push("val_top1", val_top1);

    if (val_top1 > result.best_val) {
      result.best_val = val_top1;
      save_checkpoint(result.best_path, model, adam, cfg, epoch + 1, result.best_val);
    }
    save_checkpoint(out_dir + "/epoch_" + std::to_string(epoch) + ".ckpt", model, adam, cfg,
                    epoch + 1, result.best_val);
  }
  return result;
}

}  // namespace pdisco
