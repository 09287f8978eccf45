#pragma once

#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pdisco/data_synth.hpp"
#include "pdisco/metrics.hpp"
#include "pdisco/parallel.hpp"
#include "pdisco/trainer.hpp"

namespace pdisco {

struct EvalOptions {
  std::set<std::string> metrics;  // empty = everything available
  bool inject_gt = false;         // use ground truth as the prediction (wiring oracle)
  int threads = 0;
};

struct EvalReport {
  std::optional<double> top1, nmi_value, ari_value, kp, fg_miou, attention_entropy;
  int skipped_empty_fg = 0;

  std::string to_text() const {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed;
    auto put = [&](const char* key, const std::optional<double>& v) {
      if (v) os << key << "=" << *v << "\n";
    };
    put("top1", top1);
    put("nmi", nmi_value);
    put("ari", ari_value);
    put("kp", kp);
    put("fg_miou", fg_miou);
    put("attention_entropy", attention_entropy);
    return os.str();
  }
};

namespace eval_detail {

struct PerImage {
  int hit = 0;
  std::vector<int> pred_labels, gt_labels;
  bool has_fg = false;
  double iou = 0.0;
  double entropy_sum = 0.0;
  long entropy_count = 0;
  std::vector<Centroid> cents;
};

inline std::vector<int> mask_to_int(const std::vector<std::uint8_t>& mask) {
  return {mask.begin(), mask.end()};
}

}  // namespace eval_detail

// Full metric suite over one split. Ground-truth injection replaces the model
// prediction with the annotation itself for the clustering and mask metrics,
// which must then come out at their ideal values.
inline EvalReport evaluate(Model& model, const Dataset& ds, Split split,
                           const EvalOptions& opts) {
  using eval_detail::PerImage;
  const std::vector<int> indices = ds.split_indices(split);
  if (indices.empty())
    throw InputError(std::string("no samples in split '") + to_string(split) + "'");

  auto wanted = [&](const char* name) {
    return opts.metrics.empty() || opts.metrics.count(name) > 0;
  };
  const bool want_clustering = wanted("nmi") || wanted("ari");
  const bool want_kp = wanted("kp");
  if (!opts.metrics.empty() && opts.metrics.count("kp") && !ds.has_keypoints)
    throw InputError("kp metric requested but the dataset has no keypoints.csv");

  ModelConfig eval_cfg = model.head_cfg;
  eval_cfg.gumbel_enabled = false;

  auto forward_attention = [&](const AnnotatedSample& s) {
    const Tensor feats = embed(s.image_tensor(), model.backbone, model.backbone_cfg);
    RandomSource rng(0);
    return head_forward(feats, model.head, eval_cfg, rng, false);
  };

  std::vector<PerImage> rows(indices.size());
  parallel_for(static_cast<int>(indices.size()), worker_count(opts.threads), [&](int i) {
    const AnnotatedSample& s = ds.samples[static_cast<std::size_t>(indices[i])];
    PerImage& row = rows[static_cast<std::size_t>(i)];
    const HeadForward fwd = forward_attention(s);

    int best = 0;
    for (int c = 1; c < eval_cfg.num_classes; ++c)
      if (fwd.scores.mean[c] > fwd.scores.mean[best]) best = c;
    row.hit = best == s.class_id;

    PartAssignment assignment = opts.inject_gt
                                    ? PartAssignment{s.side, s.side,
                                                     eval_detail::mask_to_int(s.part_mask)}
                                    : part_assignment(fwd.attention);
    if (want_clustering)
      row.has_fg = part_clustering_labels(assignment, eval_detail::mask_to_int(s.part_mask),
                                          s.side, s.side, row.pred_labels, row.gt_labels);
    if (wanted("fg_miou")) row.iou = foreground_iou(assignment, s.fg_mask, s.side, s.side);
    if (wanted("attention_entropy")) {
      EntropyAccumulator acc;
      acc.add(fwd.attention);
      row.entropy_sum = acc.mean() * acc.count();
      row.entropy_count = acc.count();
    }
    if (want_kp && ds.has_keypoints) row.cents = centroids(fwd.attention);
  });

  EvalReport report;
  if (wanted("top1")) {
    long hits = 0;
    for (const PerImage& r : rows) hits += r.hit;
    report.top1 = static_cast<double>(hits) / rows.size();
  }
  if (want_clustering) {
    std::vector<int> pred, gt;
    for (const PerImage& r : rows) {
      if (!r.has_fg) {
        ++report.skipped_empty_fg;
        continue;
      }
      pred.insert(pred.end(), r.pred_labels.begin(), r.pred_labels.end());
      gt.insert(gt.end(), r.gt_labels.begin(), r.gt_labels.end());
    }
    if (!pred.empty()) {
      if (wanted("nmi")) report.nmi_value = nmi(pred, gt);
      if (wanted("ari")) report.ari_value = ari(pred, gt);
    }
  }
  if (wanted("fg_miou")) {
    double total = 0.0;
    for (const PerImage& r : rows) total += r.iou;
    report.fg_miou = total / rows.size();
  }
  if (wanted("attention_entropy")) {
    double total = 0.0;
    long count = 0;
    for (const PerImage& r : rows) {
      total += r.entropy_sum;
      count += r.entropy_count;
    }
    report.attention_entropy = count ? total / count : 0.0;
  }

  if (want_kp && ds.has_keypoints) {
    const std::vector<int> train_idx = ds.split_indices(Split::train);
    std::vector<KeypointSample> train_samples(train_idx.size());
    parallel_for(static_cast<int>(train_idx.size()), worker_count(opts.threads), [&](int i) {
      const AnnotatedSample& s = ds.samples[static_cast<std::size_t>(train_idx[i])];
      const HeadForward fwd = forward_attention(s);
      train_samples[static_cast<std::size_t>(i)] =
          KeypointSample{centroids(fwd.attention), s.keypoints};
    });
    std::vector<KeypointSample> test_samples;
    for (std::size_t i = 0; i < rows.size(); ++i)
      test_samples.push_back(KeypointSample{
          rows[i].cents, ds.samples[static_cast<std::size_t>(indices[i])].keypoints});
    report.kp = keypoint_regression_error(train_samples, test_samples);
  }
  return report;
}

// Background-channel statistics used by the ablation direction checks.
inline double mean_background_activation(Model& model, const Dataset& ds, Split split,
                                         int threads = 0) {
  const std::vector<int> indices = ds.split_indices(split);
  if (indices.empty()) throw InputError("no samples in requested split");
  ModelConfig eval_cfg = model.head_cfg;
  eval_cfg.gumbel_enabled = false;
  std::vector<double> means(indices.size(), 0.0);
  parallel_for(static_cast<int>(indices.size()), worker_count(threads), [&](int i) {
    const AnnotatedSample& s = ds.samples[static_cast<std::size_t>(indices[i])];
    const Tensor feats = embed(s.image_tensor(), model.backbone, model.backbone_cfg);
    RandomSource rng(0);
    const HeadForward fwd = head_forward(feats, model.head, eval_cfg, rng, false);
    const int bg = eval_cfg.channels() - 1, hw = eval_cfg.locations();
    double sum = 0.0;
    for (int loc = 0; loc < hw; ++loc) sum += fwd.attention[bg * hw + loc];
    means[static_cast<std::size_t>(i)] = sum / hw;
  });
  double total = 0.0;
  for (double m : means) total += m;
  return total / means.size();
}

inline double mean_attention_tv(Model& model, const Dataset& ds, Split split, int threads = 0) {
  const std::vector<int> indices = ds.split_indices(split);
  if (indices.empty()) throw InputError("no samples in requested split");
  ModelConfig eval_cfg = model.head_cfg;
  eval_cfg.gumbel_enabled = false;
  std::vector<double> values(indices.size(), 0.0);
  parallel_for(static_cast<int>(indices.size()), worker_count(threads), [&](int i) {
    const AnnotatedSample& s = ds.samples[static_cast<std::size_t>(indices[i])];
    const Tensor feats = embed(s.image_tensor(), model.backbone, model.backbone_cfg);
    RandomSource rng(0);
    const HeadForward fwd = head_forward(feats, model.head, eval_cfg, rng, false);
    values[static_cast<std::size_t>(i)] = total_variation_loss(fwd.attention);
  });
  double total = 0.0;
  for (double v : values) total += v;
  return total / values.size();
}

}  // namespace pdisco
