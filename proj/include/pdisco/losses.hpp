#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pdisco/autodiff.hpp"
#include "pdisco/errors.hpp"
#include "pdisco/head.hpp"
#include "pdisco/tensor.hpp"
#include "pdisco/warp.hpp"

namespace pdisco {

// A weight of zero disables its term exactly: the term is neither evaluated
// nor differentiated.
struct LossWeights {
  double classification = 1.0;
  double orthogonality = 1.0;
  double equivariance = 1.0;
  double presence_fg = 1.0;
  double presence_bg = 2.0;
  double entropy = 1.0;
  double total_variation = 1.0;

  void validate() const {
    const double all[] = {classification, orthogonality, equivariance, presence_fg,
                          presence_bg,    entropy,       total_variation};
    for (double w : all)
      if (!(w >= 0.0)) throw ConfigError("loss weights must be non-negative");
  }
};

struct LossTerms {
  double classification = 0.0;
  double orthogonality = 0.0;
  double equivariance = 0.0;
  double presence_fg = 0.0;
  double presence_bg = 0.0;
  double entropy = 0.0;
  double total_variation = 0.0;
};

inline constexpr double kPresenceLogGuard = 1e-8;
inline constexpr double kCosineEpsilon = 1e-12;

// Soft mask privileging locations away from the grid center; 1 at the corners,
// 0 at the exact center of odd-sized grids.
inline Tensor center_mask(int h, int w) {
  if (h < 2 || w < 2) throw ConfigError("center mask needs at least a 2x2 grid");
  Tensor m({h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double di = static_cast<double>(i) / (h - 1) - 0.5;
      const double dj = static_cast<double>(j) / (w - 1) - 0.5;
      m.at2(i, j) = 2.0 * di * di + 2.0 * dj * dj;
    }
  return m;
}

// 3x3 mean with stride 1, same size; the divisor counts only in-canvas taps
// (4 at corners, 6 at edges, 9 inside). Grids smaller than the kernel fall
// back to a global average.
inline SpatialMap presence_pool_map(int h, int w) {
  SpatialMap map(static_cast<std::size_t>(h) * w);
  if (h < 3 || w < 3) {
    const double inv = 1.0 / (h * w);
    for (auto& taps : map)
      for (int src = 0; src < h * w; ++src) taps.push_back(SpatialTap{src, inv});
    return map;
  }
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      auto& taps = map[static_cast<std::size_t>(i) * w + j];
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const int y = i + di, x = j + dj;
          if (y >= 0 && y < h && x >= 0 && x < w) taps.push_back(SpatialTap{y * w + x, 1.0});
        }
      for (auto& tap : taps) tap.weight = 1.0 / taps.size();
    }
  return map;
}

// ---- differentiable builders (shared by the plain functions and the trainer) ----

namespace loss_ops {

// -log softmax(mean_scores)[label]
inline Var classification(Tape& tape, Var mean_scores, int label) {
  const int c = tape.value(mean_scores).numel();
  if (label < 0 || label >= c)
    throw InputError("class label " + std::to_string(label) + " outside [0," +
                     std::to_string(c) + ")");
  return tape.sub(tape.logsumexp(mean_scores), tape.pick(mean_scores, label));
}

// sum of pairwise cosine similarities over all ordered row pairs (background
// row included); written as twice the sum over unordered pairs
inline Var orthogonality(Tape& tape, Var modulated) {
  const int rows = tape.value(modulated).dim(0);
  std::vector<Var> row_vars(rows);
  for (int k = 0; k < rows; ++k) row_vars[k] = tape.pick_row(modulated, k);
  Var total;
  for (int k = 0; k < rows; ++k)
    for (int l = k + 1; l < rows; ++l) {
      Var c = tape.cosine(row_vars[k], row_vars[l], kCosineEpsilon);
      total = total.valid() ? tape.add(total, c) : c;
    }
  return tape.scale(total, 2.0);
}

// 1 - (1/K) sum_k cos(A_orig^k, T^{-1}(A_trans^k)), foreground channels only
inline Var equivariance(Tape& tape, Var att_orig, Var att_trans, int h, int w,
                        const AffineTransform& t, int num_parts) {
  Var inv = tape.spatial_linear(att_trans, warp_map(h, w, t, true));
  Var sum;
  for (int k = 0; k < num_parts; ++k) {
    Var c = tape.cosine(tape.slice_cols(att_orig, k, 1), tape.slice_cols(inv, k, 1),
                        kCosineEpsilon);
    sum = sum.valid() ? tape.add(sum, c) : c;
  }
  return tape.add_scalar(tape.scale(sum, -1.0 / num_parts), 1.0);
}

inline Var entropy(Tape& tape, Var attention_lm, int channels) {
  return tape.scale(tape.entropy_sum(attention_lm), -1.0 / channels);
}

inline Var total_variation(Tape& tape, Var attention_lm, int h, int w) {
  return tape.tv_penalty(attention_lm, h, w);
}

inline Var pooled_attention(Tape& tape, Var attention_lm, int h, int w) {
  return tape.spatial_linear(attention_lm, presence_pool_map(h, w));
}

// -log(max_ij m_ij * pooled_bg_ij + guard) for a single image
inline Var presence_bg_term(Tape& tape, Var pooled_lm, const Tensor& mask, int bg_channel) {
  const int L = tape.value(pooled_lm).dim(0);
  if (mask.numel() != L) throw ConfigError("center mask does not match pooled grid");
  Tensor mask_col({L, 1});
  for (int i = 0; i < L; ++i) mask_col[i] = mask[i];
  Var bg = tape.slice_cols(pooled_lm, bg_channel, 1);
  Var best = tape.max_all(tape.mul_const(bg, std::move(mask_col)));
  return tape.neg(tape.vlog(tape.add_scalar(best, kPresenceLogGuard)));
}

}  // namespace loss_ops

// ---- plain loss functions ----

inline double classification_loss(const ClassScores& scores, int label) {
  Tape tape;
  return tape.value(loss_ops::classification(tape, tape.constant(scores.mean), label))[0];
}

inline double orthogonality_loss(const Tensor& modulated) {
  if (modulated.rank() != 2) throw ConfigError("orthogonality expects (K+1,D) embeddings");
  Tape tape;
  return tape.value(loss_ops::orthogonality(tape, tape.constant(modulated)))[0];
}

inline double equivariance_loss(const Tensor& att_orig, const Tensor& att_transformed,
                                const AffineTransform& t) {
  if (!att_orig.same_shape(att_transformed) || att_orig.rank() != 3)
    throw ConfigError("equivariance expects two (K+1,H,W) attention stacks");
  const int k = att_orig.dim(0) - 1, h = att_orig.dim(1), w = att_orig.dim(2);
  Tape tape;
  Var loss = loss_ops::equivariance(tape, tape.constant(chw_to_locmat(att_orig)),
                                    tape.constant(chw_to_locmat(att_transformed)), h, w, t, k);
  return tape.value(loss)[0];
}

// 3x3 presence pooling over every channel of an attention stack
inline Tensor pool_presence(const Tensor& attention) {
  if (attention.rank() != 3) throw ConfigError("pool_presence expects (K+1,H,W)");
  const int h = attention.dim(1), w = attention.dim(2);
  Tape tape;
  Var pooled = tape.spatial_linear(tape.constant(chw_to_locmat(attention)),
                                   presence_pool_map(h, w));
  return locmat_to_chw(tape.value(pooled), h, w);
}

// pooled_batch: (B, K, H', W') of pooled foreground attention
inline double presence_loss_fg(const Tensor& pooled_batch) {
  if (pooled_batch.rank() != 4) throw ConfigError("presence_fg expects (B,K,H,W)");
  const int b = pooled_batch.dim(0), k = pooled_batch.dim(1);
  const int hw = pooled_batch.dim(2) * pooled_batch.dim(3);
  double total = 0.0;
  for (int part = 0; part < k; ++part) {
    double best = -1e300;
    for (int img = 0; img < b; ++img) {
      const double* base =
          pooled_batch.data() + (static_cast<std::size_t>(img) * k + part) * hw;
      for (int i = 0; i < hw; ++i) best = std::max(best, base[i]);
    }
    total += best;
  }
  return 1.0 - total / k;
}

// pooled_bg_batch: (B, H', W') of pooled background attention
inline double presence_loss_bg(const Tensor& pooled_bg_batch, const Tensor& mask) {
  if (pooled_bg_batch.rank() != 3) throw ConfigError("presence_bg expects (B,H,W)");
  if (mask.rank() != 2 || mask.dim(0) != pooled_bg_batch.dim(1) ||
      mask.dim(1) != pooled_bg_batch.dim(2))
    throw ConfigError("center mask shape does not match pooled maps");
  const int b = pooled_bg_batch.dim(0), hw = mask.numel();
  double total = 0.0;
  for (int img = 0; img < b; ++img) {
    const double* base = pooled_bg_batch.data() + static_cast<std::size_t>(img) * hw;
    double best = -1e300;
    for (int i = 0; i < hw; ++i) best = std::max(best, mask[i] * base[i]);
    total += std::log(best + kPresenceLogGuard);
  }
  return -total / b;
}

inline double entropy_loss(const Tensor& attention) {
  if (attention.rank() != 3) throw ConfigError("entropy expects (K+1,H,W)");
  Tape tape;
  return tape.value(loss_ops::entropy(tape, tape.constant(chw_to_locmat(attention)),
                                      attention.dim(0)))[0];
}

inline double total_variation_loss(const Tensor& attention) {
  if (attention.rank() != 3) throw ConfigError("total variation expects (K+1,H,W)");
  Tape tape;
  return tape.value(loss_ops::total_variation(tape, tape.constant(chw_to_locmat(attention)),
                                              attention.dim(1), attention.dim(2)))[0];
}

inline double total_loss(const LossTerms& terms, const LossWeights& w) {
  w.validate();
  double total = 0.0;
  auto take = [&](double weight, double term, const char* name) {
    if (weight == 0.0) return;
    if (!std::isfinite(term))
      throw NumericError(std::string("non-finite ") + name + " loss term");
    total += weight * term;
  };
  take(w.classification, terms.classification, "classification");
  take(w.orthogonality, terms.orthogonality, "orthogonality");
  take(w.equivariance, terms.equivariance, "equivariance");
  take(w.presence_fg, terms.presence_fg, "presence_fg");
  take(w.presence_bg, terms.presence_bg, "presence_bg");
  take(w.entropy, terms.entropy, "entropy");
  take(w.total_variation, terms.total_variation, "total_variation");
  return total;
}

}  // namespace pdisco
